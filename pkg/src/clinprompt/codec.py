"""Bidirectional codecs between structured annotations and template text.

Seven task families share one pattern: gold annotations serialize into
natural-language clauses built from the template constants below, and
generated text parses back into annotations anchored to the source snippet.
Output that will not parse is triaged as Interpretable (template keywords
plus something recoverable), Irrelevant (fluent but off-template), or
Nonlogical (degenerate repetition or no alphabetic content).

Template constants are versioned: downstream fixtures may rely on the exact
clause wording, separators (" ; " for unquoted concept clauses, "; "
elsewhere) and the curly quotes around quoted arguments. Straight quotes are
accepted when parsing. Parsed surface strings are re-anchored to the source
leftmost-first (exact, then case-insensitive, then whitespace-insensitive);
repeated surfaces consume occurrences left to right.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ContractError, SchemaError

TEMPLATE_VERSION = "1"

TASK_CONCEPTS = "concepts"
TASK_RELATIONS = "relations"
TASK_NORMALIZATION = "normalization"
TASK_ABBREV = "abbreviation"
TASK_NLI = "nli"
TASK_MEDICATION = "medication"
TASK_PROGRESS = "progress_note"
ALL_TASKS = (TASK_CONCEPTS, TASK_RELATIONS, TASK_NORMALIZATION, TASK_ABBREV,
             TASK_NLI, TASK_MEDICATION, TASK_PROGRESS)

STATUS_WELL_FORMED = "WellFormed"
STATUS_INTERPRETABLE = "Interpretable"
STATUS_IRRELEVANT = "Irrelevant"
STATUS_NONLOGICAL = "Nonlogical"
ALL_STATUSES = (STATUS_WELL_FORMED, STATUS_INTERPRETABLE, STATUS_IRRELEVANT,
                STATUS_NONLOGICAL)

KIND_WSD = "abbrev_wsd"
KIND_NLI = "nli"
KIND_MED_EVENT = "med_event"
KIND_MED_CONTEXT = "med_context"
KIND_PROGRESS = "progress_note"

NLI_LABELS = ("entailment", "contradiction", "neutral")
MED_EVENT_LABELS = ("Disposition", "NoDisposition", "Undetermined")
MED_DIMENSIONS = ("Action", "Negation", "Temporality", "Certainty", "Actor")
MED_CONTEXT_VALUES = {
    "Action": ("Start", "Stop", "Increase", "Decrease", "UniqueDose", "OtherChange", "Unknown"),
    "Negation": ("Negated", "NotNegated"),
    "Temporality": ("Past", "Present", "Future", "Unknown"),
    "Certainty": ("Certain", "Hypothetical", "Conditional", "Unknown"),
    "Actor": ("Physician", "Patient", "Unknown"),
}
PROGRESS_LABELS = ("Direct", "Indirect", "Neither", "Not Relevant")
NO_RELATION = "No-relation"

DEFAULT_CONCEPT_LABELS = (
    "drug", "strength", "form", "dosage", "frequency", "route", "reason",
    "duration", "ADE", "Disorder", "Medication", "Abbreviation",
)
DEFAULT_RELATION_LABELS = (
    "Strength-Drug", "Dosage-Drug", "Duration-Drug", "Frequency-Drug",
    "Form-Drug", "Route-Drug", "Reason-Drug", "ADE-Drug",
    "Living status-Type", "Living status-Status", "Tobacco-Amount",
    "Tobacco-Status", "Alcohol-Status", "Alcohol-Amount", "Drug-Method",
    "Drug-Frequency", "Drug-Status", "Employment-Duration", "Employment-Type",
    NO_RELATION,
)

TEMPLATE_KEYWORDS = ("extracted", "relation", "sense", "category", "normalized", "hypothesis")

CONCEPT_CLAUSE = "the extracted {label} entity is {text}"
RELATION_CLAUSE = "the relation between “{arg1}” and “{arg2}” is “{label}”"
NORMALIZATION_CLAUSE = ("the normalized string of the disorder concept "
                        "“{mention}” is “{name}”")
WSD_TEMPLATE = "The sense of the abbreviation “{abbrev}” is “{sense}”."
NLI_TEMPLATE = ("The hypothesis that “{hypothesis}” is {label} "
                "to the premise that “{premise}”.")
MED_EVENT_CLAUSE = "the category of medication event “{mention}” is “{label}”."
MED_CONTEXT_CLAUSE = ("the category of disposition event “{mention}” "
                      "from the dimension of {dimension} is “{label}”.")
MED_EVENT_HEADER = "Event Classification:"
MED_CONTEXT_HEADER = "Context Classification:"
PROGRESS_TEMPLATE = "The relation between the given assessment and plan subsection is {label}."

NO_CUI = "NoCUI"


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ConceptAnnotation:
    start: int
    end: int
    label: str
    text: str


@dataclass(frozen=True)
class RelationAnnotation:
    arg1: ConceptAnnotation
    arg2: ConceptAnnotation
    label: str


@dataclass(frozen=True)
class NormalizationAnnotation:
    mention: ConceptAnnotation
    cui: str
    preferred_name: str


@dataclass(frozen=True)
class ClassificationGold:
    """One closed-set labeling decision: WSD sense, NLI verdict, medication
    event or one context dimension, or a progress-note relation."""

    kind: str
    label: str
    focus: ConceptAnnotation | None = None
    contexts: tuple[tuple[str, str], ...] = ()
    dimension: str | None = None

    def context(self, key: str) -> str:
        for k, v in self.contexts:
            if k == key:
                return v
        raise KeyError(key)


@dataclass
class TaskInstance:
    instance_id: str
    task: str
    source_text: str
    input_text: str
    gold: list
    target_text: str


@dataclass
class ParsedOutput:
    status: str
    predictions: list = field(default_factory=list)


def validate_concept(concept: ConceptAnnotation, source: str) -> None:
    if not (0 <= concept.start < concept.end <= len(source)):
        raise ContractError(f"span {concept.start}..{concept.end} outside source of length {len(source)}")
    if source[concept.start:concept.end] != concept.text:
        raise ContractError(
            f"surface {concept.text!r} does not match source slice "
            f"{source[concept.start:concept.end]!r}")


# ---------------------------------------------------------------------------
# lexicon


class Lexicon:
    """CUI to preferred-name table; lookup is case-insensitive on names."""

    def __init__(self, entries: list[tuple[str, str]]):
        self.entries = list(entries)
        self._by_name: dict[str, list[str]] = {}
        for cui, name in entries:
            self._by_name.setdefault(name.lower(), []).append(cui)
        for cuis in self._by_name.values():
            cuis.sort()

    def cuis_for(self, name: str) -> list[str]:
        return self._by_name.get(name.lower(), [])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cui, name in self.entries:
                fh.write(f"{cui}\t{name}\n")

    @classmethod
    def load(cls, path) -> "Lexicon":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for number, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not re.fullmatch(r"C\d{7}", parts[0]):
                    raise SchemaError(f"{path}: line {number}: expected 'CUI<TAB>name', got {line!r}")
                entries.append((parts[0], parts[1]))
        return cls(entries)


DEFAULT_LEXICON_ENTRIES = [
    ("C0003864", "Arthritis"),
    ("C0004238", "Atrial fibrillation"),
    ("C0007286", "Carpal Tunnel Syndrome"),
    ("C0011860", "Diabetes mellitus type 2"),
    ("C0019360", "Herpes zoster disease"),
    ("C0020538", "Hypertensive disease"),
    ("C0024050", "Lower gastrointestinal hemorrhage"),
    ("C0027051", "Myocardial infarction"),
    ("C0032285", "Pneumonia"),
    ("C0038454", "Cerebrovascular accident"),
]
DEFAULT_LEXICON = Lexicon(DEFAULT_LEXICON_ENTRIES)


@dataclass(frozen=True)
class LookupResult:
    cui: str
    ambiguous: bool


def normalize_lookup(preferred_name: str, lexicon: Lexicon) -> LookupResult:
    """Map a preferred name to its CUI; misses yield the NoCUI marker and
    ambiguous names resolve to the lowest CUI with the flag set."""
    cuis = lexicon.cuis_for(preferred_name.strip())
    if not cuis:
        return LookupResult(NO_CUI, False)
    return LookupResult(cuis[0], len(cuis) > 1)


# ---------------------------------------------------------------------------
# serialization


def _cap_first(text: str) -> str:
    return text[0].upper() + text[1:] if text else text


def serialize_target(task: str, gold: list, source_text: str | None = None) -> str:
    """Render gold annotations as template clauses, ordered by source offsets."""
    if task == TASK_CONCEPTS:
        if source_text is not None:
            for c in gold:
                validate_concept(c, source_text)
        if not gold:
            return ""
        ordered = sorted(gold, key=lambda c: (c.start, c.end))
        clauses = [CONCEPT_CLAUSE.format(label=c.label, text=c.text) for c in ordered]
        return _cap_first(" ; ".join(clauses) + " .")
    if task == TASK_RELATIONS:
        if source_text is not None:
            for r in gold:
                validate_concept(r.arg1, source_text)
                validate_concept(r.arg2, source_text)
        if not gold:
            return ""
        ordered = sorted(gold, key=lambda r: (r.arg1.start, r.arg2.start))
        clauses = [RELATION_CLAUSE.format(arg1=r.arg1.text, arg2=r.arg2.text, label=r.label)
                   for r in ordered]
        return _cap_first("; ".join(clauses) + ".")
    if task == TASK_NORMALIZATION:
        if source_text is not None:
            for n in gold:
                validate_concept(n.mention, source_text)
        if not gold:
            return ""
        ordered = sorted(gold, key=lambda n: (n.mention.start, n.mention.end))
        clauses = [NORMALIZATION_CLAUSE.format(mention=n.mention.text, name=n.preferred_name)
                   for n in ordered]
        return _cap_first("; ".join(clauses) + ".")
    if task == TASK_ABBREV:
        (item,) = gold
        return WSD_TEMPLATE.format(abbrev=item.focus.text, sense=item.label)
    if task == TASK_NLI:
        (item,) = gold
        if item.label not in NLI_LABELS:
            raise ContractError(f"NLI label {item.label!r} outside {NLI_LABELS}")
        return NLI_TEMPLATE.format(hypothesis=item.context("hypothesis"),
                                   label=item.label, premise=item.context("premise"))
    if task == TASK_MEDICATION:
        return _serialize_medication(gold)
    if task == TASK_PROGRESS:
        (item,) = gold
        if item.label not in PROGRESS_LABELS:
            raise ContractError(f"progress label {item.label!r} outside {PROGRESS_LABELS}")
        return PROGRESS_TEMPLATE.format(label=item.label)
    raise ContractError(f"unknown task {task!r}")


def _serialize_medication(gold: list) -> str:
    events = [g for g in gold if g.kind == KIND_MED_EVENT]
    dims = [g for g in gold if g.kind == KIND_MED_CONTEXT]
    if len(events) != 1:
        raise ContractError("medication gold needs exactly one event decision")
    event = events[0]
    if event.label not in MED_EVENT_LABELS:
        raise ContractError(f"medication event label {event.label!r} outside {MED_EVENT_LABELS}")
    if dims and event.label != "Disposition":
        raise ContractError("context dimensions are only serialized for Disposition events")
    parts = [MED_EVENT_HEADER, _cap_first(
        MED_EVENT_CLAUSE.format(mention=event.focus.text, label=event.label))]
    if dims:
        order = {d: i for i, d in enumerate(MED_DIMENSIONS)}
        for d in dims:
            if d.dimension not in order:
                raise ContractError(f"unknown context dimension {d.dimension!r}")
            if d.label not in MED_CONTEXT_VALUES[d.dimension]:
                raise ContractError(f"value {d.label!r} outside dimension {d.dimension}")
        parts.append(MED_CONTEXT_HEADER)
        for d in sorted(dims, key=lambda g: order[g.dimension]):
            parts.append(_cap_first(MED_CONTEXT_CLAUSE.format(
                mention=d.focus.text, dimension=d.dimension, label=d.label)))
    return " ".join(parts)


# ---------------------------------------------------------------------------
# input construction


def build_input(task: str, source_text: str = "", *,
                pair: tuple[ConceptAnnotation, ConceptAnnotation] | None = None,
                premise: str = "", hypothesis: str = "",
                assessment: str = "", plan: str = "") -> str:
    """Render the model-facing input text for one instance.

    Extraction-style tasks pass the snippet through verbatim; relation inputs
    wrap the candidate pair in [s1]..[e1] / [s2]..[e2] markers; NLI and
    progress notes use labeled two-part layouts.
    """
    if task in (TASK_CONCEPTS, TASK_NORMALIZATION, TASK_ABBREV, TASK_MEDICATION):
        if not source_text:
            raise ContractError("input context must be non-empty")
        return source_text
    if task == TASK_RELATIONS:
        if not source_text:
            raise ContractError("input context must be non-empty")
        if pair is None:
            return source_text
        return _mark_pair(source_text, pair)
    if task == TASK_NLI:
        if not premise or not hypothesis:
            raise ContractError("NLI needs a premise and a hypothesis")
        return f"Premise: {premise} Hypothesis: {hypothesis}"
    if task == TASK_PROGRESS:
        if not assessment or not plan:
            raise ContractError("progress notes need assessment and plan sections")
        return f"Assessment: “{assessment}” Plan: “{plan}”"
    raise ContractError(f"unknown task {task!r}")


def _mark_pair(source: str, pair: tuple[ConceptAnnotation, ConceptAnnotation]) -> str:
    arg1, arg2 = pair
    validate_concept(arg1, source)
    validate_concept(arg2, source)
    a, b = (arg1, arg2) if arg1.start <= arg2.start else (arg2, arg1)
    if a.end > b.start and not (a.start <= b.start and b.end <= a.end):
        raise ContractError("candidate argument spans overlap without nesting")
    inserts = [
        (arg1.start, 1, "[s1] "), (arg1.end, 0, " [e1]"),
        (arg2.start, 1, "[s2] "), (arg2.end, 0, " [e2]"),
    ]
    # insert right-to-left; at equal positions close markers before opens
    out = source
    for pos, _, text in sorted(inserts, key=lambda x: (x[0], x[1]), reverse=True):
        out = out[:pos] + text + out[pos:]
    return out


# ---------------------------------------------------------------------------
# span re-anchoring


def _squash_map(text: str) -> tuple[str, list[int]]:
    chars = []
    index = []
    for i, ch in enumerate(text):
        if not ch.isspace():
            chars.append(ch.lower())
            index.append(i)
    return "".join(chars), index


class _Anchor:
    """Leftmost-unconsumed surface matcher over one source text."""

    def __init__(self, source: str, consume: bool = True):
        self.source = source
        self.consume = consume
        self.taken: list[tuple[int, int]] = []
        self._squashed, self._index = _squash_map(source)

    def _free(self, start: int, end: int) -> bool:
        return all(end <= s or start >= e for s, e in self.taken)

    def _scan(self, haystack: str, needle: str) -> tuple[int, int] | None:
        pos = 0
        while True:
            hit = haystack.find(needle, pos)
            if hit < 0:
                return None
            span = (hit, hit + len(needle))
            if self._free(*span):
                return span
            pos = hit + 1

    def find(self, surface: str) -> tuple[int, int] | None:
        surface = surface.strip()
        if not surface:
            return None
        span = self._scan(self.source, surface)
        if span is None:
            span = self._scan(self.source.lower(), surface.lower())
        if span is None:
            span = self._find_squashed(surface)
        if span is not None and self.consume:
            self.taken.append(span)
        return span

    def _find_squashed(self, surface: str) -> tuple[int, int] | None:
        needle = "".join(ch.lower() for ch in surface if not ch.isspace())
        if not needle:
            return None
        pos = 0
        while True:
            hit = self._squashed.find(needle, pos)
            if hit < 0:
                return None
            start = self._index[hit]
            end = self._index[hit + len(needle) - 1] + 1
            if self._free(start, end):
                return (start, end)
            pos = hit + 1


def _anchor_concept(anchor: _Anchor, surface: str, label: str) -> ConceptAnnotation | None:
    span = anchor.find(surface)
    if span is None:
        return None
    start, end = span
    return ConceptAnnotation(start=start, end=end, label=label,
                             text=anchor.source[start:end])


# ---------------------------------------------------------------------------
# parsing helpers

_QO = "[“\"]"
_QC = "[”\"]"

_CONCEPT_START = re.compile(r"the\s+extracted\s+", re.IGNORECASE)
_CONCEPT_CLAUSE_RE = re.compile(
    r"^the\s+extracted\s+(?P<label>[\w/-]+(?:\s+[\w/-]+)*?)\s+(?:entity\s+)?is\s+"
    r"(?P<text>.+?)\s*[;.]?\s*$",
    re.IGNORECASE | re.DOTALL)
_RELATION_START = re.compile(r"the\s+relation\s+between\s+" + _QO, re.IGNORECASE)
_RELATION_CLAUSE_RE = re.compile(
    r"^the\s+relation\s+between\s+" + _QO + r"\s*(?P<arg1>.*?)\s*" + _QC +
    r"\s+and\s+" + _QO + r"\s*(?P<arg2>.*?)\s*" + _QC +
    r"\s+is\s+" + _QO + r"\s*(?P<label>.*?)\s*" + _QC + r"\s*[;.]?\s*$",
    re.IGNORECASE | re.DOTALL)
_NORMALIZATION_START = re.compile(r"the\s+normalized\s+string\s+", re.IGNORECASE)
_NORMALIZATION_CLAUSE_RE = re.compile(
    r"^the\s+normalized\s+string\s+of\s+the\s+disorder\s+concept\s+" + _QO +
    r"\s*(?P<mention>.*?)\s*" + _QC + r"\s+is\s+" + _QO +
    r"\s*(?P<name>.*?)\s*" + _QC + r"\s*[;.]?\s*$",
    re.IGNORECASE | re.DOTALL)
_WSD_RE = re.compile(
    r"^\s*the\s+sense\s+of\s+the\s+abbreviation\s+" + _QO + r"\s*(?P<abbrev>.*?)\s*" + _QC +
    r"\s+is\s+" + _QO + r"\s*(?P<sense>.*?)\s*" + _QC + r"\s*\.?\s*$",
    re.IGNORECASE | re.DOTALL)
_NLI_RE = re.compile(
    r"^\s*the\s+hypothesis\s+that\s+" + _QO + r"\s*(?P<hypothesis>.*?)\s*" + _QC +
    r"\s+is\s+(?P<label>\w+)\s+to\s+the\s+premise\s+that\s+" + _QO +
    r"\s*(?P<premise>.*?)\s*" + _QC + r"\s*\.?\s*$",
    re.IGNORECASE | re.DOTALL)
_MED_START = re.compile(r"the\s+category\s+of\s+", re.IGNORECASE)
_MED_EVENT_RE = re.compile(
    r"^the\s+category\s+of\s+(?:the\s+)?medication\s+event\s+" + _QO +
    r"\s*(?P<mention>.*?)\s*" + _QC + r"\s+is\s+" + _QO +
    r"\s*(?P<label>.*?)\s*" + _QC + r"\s*\.?\s*$",
    re.IGNORECASE | re.DOTALL)
_MED_CONTEXT_RE = re.compile(
    r"^the\s+category\s+of\s+(?:the\s+)?disposition\s+event\s+" + _QO +
    r"\s*(?P<mention>.*?)\s*" + _QC + r"\s+from\s+the\s+dimension\s+of\s+"
    r"(?P<dimension>\w+)\s+is\s+" + _QO + r"\s*(?P<label>.*?)\s*" + _QC + r"\s*\.?\s*$",
    re.IGNORECASE | re.DOTALL)
_PROGRESS_RE = re.compile(
    r"^\s*the\s+relation\s+between\s+the\s+given\s+assessment\s+and\s+plan\s+"
    r"subsection\s+is\s+" + _QO + r"?\s*(?P<label>[A-Za-z][A-Za-z ]*?)\s*" + _QC + r"?\s*\.?\s*$",
    re.IGNORECASE)


def _split_clauses(text: str, start_re: re.Pattern) -> tuple[list[str], str]:
    """Cut text into chunks at clause-start phrases; residue is the prefix."""
    starts = [m.start() for m in start_re.finditer(text)]
    if not starts:
        return [], text
    chunks = []
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else len(text)
        chunks.append(text[s:e])
    return chunks, text[:starts[0]]


def _is_filler(text: str) -> bool:
    return re.fullmatch(r"[\s;.,]*", text) is not None


def _canonical(label: str) -> str:
    return re.sub(r"[\s_-]+", " ", label.strip().lower())


def _inventory_map(labels) -> dict[str, str]:
    return {_canonical(l): l for l in labels}


def _degenerate(text: str) -> bool:
    """Token-trigram repetition at or above one half, or no alphabetic content.

    The threshold is inclusive: the canonical degenerate three-fold repeat of
    a two-word token lands exactly at 0.5.
    """
    if not any(ch.isalpha() for ch in text):
        return True
    words = re.findall(r"[a-z0-9]+", text.lower())
    trigrams = list(zip(words, words[1:], words[2:]))
    if len(trigrams) < 2:
        return False
    ratio = 1.0 - len(set(trigrams)) / len(trigrams)
    return ratio >= 0.5


def _has_keyword(text: str) -> bool:
    lowered = text.lower()
    return any(re.search(rf"\b{kw}\b", lowered) for kw in TEMPLATE_KEYWORDS)


def _triage(text: str) -> str:
    if _degenerate(text):
        return STATUS_NONLOGICAL
    return STATUS_IRRELEVANT


# ---------------------------------------------------------------------------
# parsing


def parse_output(task: str, generated_text: str, source_text: str,
                 expected_pairs: list[tuple[ConceptAnnotation, ConceptAnnotation]] | None = None,
                 *, lexicon: Lexicon | None = None,
                 concept_labels=None, relation_labels=None) -> ParsedOutput:
    """Back-convert generated target text into structured predictions.

    Total over arbitrary input: anything that does not parse cleanly is
    classified rather than raised. ``source_text`` is required because
    extracted surfaces are re-anchored to character offsets.
    """
    if source_text is None:
        raise ContractError("parse_output needs the source text for re-anchoring")
    if task not in ALL_TASKS:
        raise ContractError(f"unknown task {task!r}")
    text = generated_text if isinstance(generated_text, str) else ""

    if task == TASK_CONCEPTS:
        return _parse_concepts(text, source_text, concept_labels)
    if task == TASK_RELATIONS:
        return _parse_relations(text, source_text, expected_pairs, relation_labels)
    if task == TASK_NORMALIZATION:
        return _parse_normalization(text, source_text, lexicon or DEFAULT_LEXICON)
    if task == TASK_ABBREV:
        return _parse_wsd(text, source_text)
    if task == TASK_NLI:
        return _parse_nli(text)
    if task == TASK_MEDICATION:
        return _parse_medication(text, source_text)
    return _parse_progress(text)


def _parse_concepts(text: str, source: str, labels) -> ParsedOutput:
    if not text.strip():
        return ParsedOutput(STATUS_WELL_FORMED, [])
    inventory = _inventory_map(labels if labels is not None else DEFAULT_CONCEPT_LABELS)
    chunks, residue = _split_clauses(text, _CONCEPT_START)
    anchor = _Anchor(source)
    predictions: list[ConceptAnnotation] = []
    clean = _is_filler(residue)
    for chunk in chunks:
        m = _CONCEPT_CLAUSE_RE.match(chunk)
        if not m:
            clean = False
            continue
        label = inventory.get(_canonical(m.group("label")))
        if label is None:
            clean = False
            continue
        concept = _anchor_concept(anchor, m.group("text"), label)
        if concept is None:
            clean = False
            continue
        predictions.append(concept)
    if predictions and clean:
        return ParsedOutput(STATUS_WELL_FORMED, predictions)
    if predictions:
        return ParsedOutput(STATUS_INTERPRETABLE, predictions)
    if _has_keyword(text) and not _degenerate(text):
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _parse_relations(text: str, source: str, expected_pairs, labels) -> ParsedOutput:
    if not text.strip():
        return ParsedOutput(STATUS_WELL_FORMED, [])
    inventory = _inventory_map(labels if labels is not None else DEFAULT_RELATION_LABELS)
    chunks, residue = _split_clauses(text, _RELATION_START)
    predictions: list[RelationAnnotation] = []
    clean = _is_filler(residue)
    for chunk in chunks:
        m = _RELATION_CLAUSE_RE.match(chunk)
        if not m:
            clean = False
            continue
        label = inventory.get(_canonical(m.group("label")))
        if label is None:
            clean = False
            continue
        relation = _anchor_relation(source, m.group("arg1"), m.group("arg2"), label,
                                    expected_pairs)
        if relation is None:
            clean = False
            continue
        predictions.append(relation)
    if predictions and clean:
        return ParsedOutput(STATUS_WELL_FORMED, predictions)
    if predictions:
        return ParsedOutput(STATUS_INTERPRETABLE, predictions)
    recovered = _recover_relation(text, source, inventory, expected_pairs)
    if recovered:
        return ParsedOutput(STATUS_INTERPRETABLE, recovered)
    if _has_keyword(text) and not _degenerate(text):
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _anchor_relation(source: str, surf1: str, surf2: str, label: str,
                     expected_pairs) -> RelationAnnotation | None:
    if expected_pairs:
        for a1, a2 in expected_pairs:
            if a1.text.strip() == surf1.strip() and a2.text.strip() == surf2.strip():
                return RelationAnnotation(arg1=a1, arg2=a2, label=label)
    # relation arguments may legitimately share offsets across clauses, so
    # each clause anchors independently without consuming occurrences
    anchor = _Anchor(source, consume=False)
    arg1 = _anchor_concept(anchor, surf1, "")
    arg2 = _anchor_concept(anchor, surf2, "")
    if arg1 is None or arg2 is None:
        return None
    return RelationAnnotation(arg1=arg1, arg2=arg2, label=label)


_TYPED_ENTITY_RE = re.compile(
    r"\b(?P<type>[A-Z][\w-]*(?:\s+[A-Za-z][\w-]*)?)\s+entity\s+" + _QO +
    r"\s*(?P<surface>.*?)\s*" + _QC)
_QUOTED_LABEL_RE = re.compile(r"is\s+" + _QO + r"\s*(?P<label>[^“”\"]+?)\s*" + _QC,
                              re.IGNORECASE)


def _recover_relation(text: str, source: str, inventory: dict[str, str],
                      expected_pairs) -> list[RelationAnnotation]:
    """Best-effort recovery from systematic off-template relation phrasings."""
    if not re.search(r"\brelation\b", text, re.IGNORECASE):
        return []
    typed = [(m.group("type"), m.group("surface")) for m in _TYPED_ENTITY_RE.finditer(text)]
    label = None
    args: tuple[str, str] | None = None
    if len(typed) >= 2:
        (t1, s1), (t2, s2) = typed[0], typed[1]
        for candidate, ordered in ((f"{t2}-{t1}", (s2, s1)), (f"{t1}-{t2}", (s1, s2))):
            hit = inventory.get(_canonical(candidate))
            if hit is not None:
                label, args = hit, ordered
                break
    if label is None:
        m = _QUOTED_LABEL_RE.search(text)
        if m:
            raw = re.sub(r"^(has|is)[_\s-]+", "", m.group("label").strip(), flags=re.IGNORECASE)
            hit = inventory.get(_canonical(raw))
            if hit is None:
                prefixed = sorted(v for k, v in inventory.items()
                                  if k.split(" ")[0] == _canonical(raw))
                hit = prefixed[0] if prefixed else None
            if hit is not None:
                label = hit
                quoted = re.findall(_QO + r"\s*(.*?)\s*" + _QC, text)
                others = [q for q in quoted if _canonical(q) != _canonical(m.group("label"))]
                if len(others) >= 2:
                    args = (others[0], others[1])
    if label is None or args is None:
        return []
    relation = _anchor_relation(source, args[0], args[1], label, expected_pairs)
    return [relation] if relation is not None else []


def _parse_normalization(text: str, source: str, lexicon: Lexicon) -> ParsedOutput:
    if not text.strip():
        return ParsedOutput(STATUS_WELL_FORMED, [])
    chunks, residue = _split_clauses(text, _NORMALIZATION_START)
    anchor = _Anchor(source)
    predictions: list[NormalizationAnnotation] = []
    clean = _is_filler(residue)
    for chunk in chunks:
        m = _NORMALIZATION_CLAUSE_RE.match(chunk)
        if not m:
            clean = False
            continue
        mention = _anchor_concept(anchor, m.group("mention"), "Disorder")
        if mention is None:
            clean = False
            continue
        name = m.group("name").strip()
        hit = normalize_lookup(name, lexicon)
        predictions.append(NormalizationAnnotation(mention=mention, cui=hit.cui,
                                                   preferred_name=name))
    if predictions and clean:
        return ParsedOutput(STATUS_WELL_FORMED, predictions)
    if predictions:
        return ParsedOutput(STATUS_INTERPRETABLE, predictions)
    if _has_keyword(text) and not _degenerate(text):
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _parse_wsd(text: str, source: str) -> ParsedOutput:
    m = _WSD_RE.match(text)
    if m and m.group("sense").strip():
        focus = _anchor_concept(_Anchor(source), m.group("abbrev"), "Abbreviation")
        if focus is not None:
            pred = ClassificationGold(kind=KIND_WSD, label=m.group("sense").strip(), focus=focus)
            return ParsedOutput(STATUS_WELL_FORMED, [pred])
    if _has_keyword(text) and not _degenerate(text):
        m2 = re.search(r"\bsense\b.*?" + _QO + r"\s*(?P<sense>.+?)\s*" + _QC + r"\s*\.?\s*$",
                       text, re.IGNORECASE | re.DOTALL)
        if m2:
            pred = ClassificationGold(kind=KIND_WSD, label=m2.group("sense").strip())
            return ParsedOutput(STATUS_INTERPRETABLE, [pred])
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _parse_nli(text: str) -> ParsedOutput:
    m = _NLI_RE.match(text)
    if m:
        label = m.group("label").lower()
        if label in NLI_LABELS:
            pred = ClassificationGold(
                kind=KIND_NLI, label=label,
                contexts=(("premise", m.group("premise").strip()),
                          ("hypothesis", m.group("hypothesis").strip())))
            return ParsedOutput(STATUS_WELL_FORMED, [pred])
    if _has_keyword(text) and not _degenerate(text):
        label = _find_inventory_word(text, NLI_LABELS)
        if label:
            return ParsedOutput(STATUS_INTERPRETABLE,
                                [ClassificationGold(kind=KIND_NLI, label=label)])
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _parse_medication(text: str, source: str) -> ParsedOutput:
    if not text.strip():
        return ParsedOutput(_triage(text), [])
    stripped = re.sub(r"(event|context)\s+classification\s*:", " ", text, flags=re.IGNORECASE)
    chunks, residue = _split_clauses(stripped, _MED_START)
    anchor = _Anchor(source, consume=False)
    predictions: list[ClassificationGold] = []
    clean = _is_filler(residue)
    event_values = _inventory_map(MED_EVENT_LABELS)
    dim_names = _inventory_map(MED_DIMENSIONS)
    for chunk in chunks:
        ev = _MED_EVENT_RE.match(chunk)
        if ev:
            label = event_values.get(_canonical(ev.group("label")))
            focus = _anchor_concept(anchor, ev.group("mention"), "Medication")
            if label is None or focus is None:
                clean = False
                continue
            predictions.append(ClassificationGold(kind=KIND_MED_EVENT, label=label, focus=focus))
            continue
        cx = _MED_CONTEXT_RE.match(chunk)
        if cx:
            dimension = dim_names.get(_canonical(cx.group("dimension")))
            focus = _anchor_concept(anchor, cx.group("mention"), "Medication")
            if dimension is None or focus is None:
                clean = False
                continue
            value = _inventory_map(MED_CONTEXT_VALUES[dimension]).get(_canonical(cx.group("label")))
            if value is None:
                clean = False
                continue
            predictions.append(ClassificationGold(kind=KIND_MED_CONTEXT, label=value,
                                                  focus=focus, dimension=dimension))
            continue
        clean = False
    has_event = any(p.kind == KIND_MED_EVENT for p in predictions)
    if predictions and clean and has_event:
        return ParsedOutput(STATUS_WELL_FORMED, predictions)
    if predictions:
        return ParsedOutput(STATUS_INTERPRETABLE, predictions)
    if _has_keyword(text) and not _degenerate(text):
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _parse_progress(text: str) -> ParsedOutput:
    m = _PROGRESS_RE.match(text)
    if m:
        labels = _inventory_map(PROGRESS_LABELS)
        label = labels.get(_canonical(m.group("label")))
        if label is not None:
            return ParsedOutput(STATUS_WELL_FORMED,
                                [ClassificationGold(kind=KIND_PROGRESS, label=label)])
    if _has_keyword(text) and not _degenerate(text):
        label = _find_inventory_word(text, PROGRESS_LABELS)
        if label:
            return ParsedOutput(STATUS_INTERPRETABLE,
                                [ClassificationGold(kind=KIND_PROGRESS, label=label)])
        return ParsedOutput(STATUS_INTERPRETABLE, [])
    return ParsedOutput(_triage(text), [])


def _find_inventory_word(text: str, labels) -> str | None:
    for label in labels:
        if re.search(rf"\b{re.escape(label.lower())}\b", text.lower()):
            return label
    return None


# ---------------------------------------------------------------------------
# round trip


def _classification_view(items: list) -> list:
    return [(g.kind, g.dimension, g.focus, g.label) for g in items]


def round_trip(task: str, gold: list, source_text: str, *,
               lexicon: Lexicon | None = None) -> bool:
    """serialize then parse, comparing structure, labels and offsets exactly.

    Progress-note gold compares label-only because its template carries no
    section text; NLI additionally compares the premise/hypothesis strings.
    """
    target = serialize_target(task, gold, source_text)
    parsed = parse_output(task, target, source_text, lexicon=lexicon)
    if parsed.status != STATUS_WELL_FORMED:
        return False
    pred = parsed.predictions
    if task == TASK_CONCEPTS:
        key = lambda c: (c.start, c.end, c.label)
        return sorted(gold, key=key) == sorted(pred, key=key)
    if task == TASK_RELATIONS:
        key = lambda r: (r.arg1.start, r.arg2.start, r.label)
        gold_view = [(r.arg1.start, r.arg1.end, r.arg2.start, r.arg2.end, r.label)
                     for r in sorted(gold, key=key)]
        pred_view = [(r.arg1.start, r.arg1.end, r.arg2.start, r.arg2.end, r.label)
                     for r in sorted(pred, key=key)]
        return gold_view == pred_view
    if task == TASK_NORMALIZATION:
        key = lambda n: n.mention.start
        gold_view = [(n.mention.start, n.mention.end, n.cui) for n in sorted(gold, key=key)]
        pred_view = [(n.mention.start, n.mention.end, n.cui) for n in sorted(pred, key=key)]
        return gold_view == pred_view
    if task == TASK_NLI:
        if len(gold) != 1 or len(pred) != 1:
            return False
        g, p = gold[0], pred[0]
        return (g.label == p.label
                and g.context("premise") == p.context("premise")
                and g.context("hypothesis") == p.context("hypothesis"))
    if task == TASK_PROGRESS:
        return [g.label for g in gold] == [p.label for p in pred]
    return _classification_view(gold) == _classification_view(pred)
