"""Dataset plumbing: standoff ingestion, a synthetic instance generator, and
the line-delimited instance interchange format.

The generator builds snippets by template filling, so gold character offsets
are exact by construction and every instance survives the codec round trip;
it is the fixture factory for the property tests.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from . import codec
from .codec import (ClassificationGold, ConceptAnnotation, Lexicon,
                    NormalizationAnnotation, RelationAnnotation, TaskInstance)
from .errors import ContractError, SchemaError

# ---------------------------------------------------------------------------
# standoff subset: T (entity) and R (binary relation) records


@dataclass
class StandoffEntity:
    entity_id: str
    label: str
    start: int
    end: int
    surface: str


@dataclass
class StandoffRelation:
    relation_id: str
    label: str
    arg1: str
    arg2: str


@dataclass
class StandoffDocument:
    doc_id: str
    text: str
    entities: dict[str, StandoffEntity]
    relations: dict[str, StandoffRelation]


_T_LINE = re.compile(r"^(T\d+)\t(\S+) (\d+) (\d+)\t(.*)$")
_R_LINE = re.compile(r"^(R\d+)\t(\S+) Arg1:(T\d+) Arg2:(T\d+)\s*$")


def load_standoff(text_path, ann_path) -> StandoffDocument:
    with open(text_path, encoding="utf-8") as fh:
        text = fh.read()
    entities: dict[str, StandoffEntity] = {}
    relations: dict[str, StandoffRelation] = {}
    with open(ann_path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            t = _T_LINE.match(line)
            if t:
                entity_id, label, start, end, surface = t.groups()
                start, end = int(start), int(end)
                if not (0 <= start < end <= len(text)):
                    raise SchemaError(f"{ann_path}: line {number}: span {start}..{end} outside text")
                if text[start:end] != surface:
                    raise SchemaError(
                        f"{ann_path}: line {number}: surface {surface!r} does not match "
                        f"text slice {text[start:end]!r}")
                entities[entity_id] = StandoffEntity(entity_id, label, start, end, surface)
                continue
            r = _R_LINE.match(line)
            if r:
                relation_id, label, arg1, arg2 = r.groups()
                relations[relation_id] = StandoffRelation(relation_id, label, arg1, arg2)
                continue
            raise SchemaError(f"{ann_path}: line {number}: malformed record {line!r}")
    for relation in relations.values():
        for ref in (relation.arg1, relation.arg2):
            if ref not in entities:
                raise SchemaError(
                    f"{ann_path}: relation {relation.relation_id} references missing entity {ref}")
    doc_id = re.sub(r"\.txt$", "", str(text_path).rsplit("/", 1)[-1])
    return StandoffDocument(doc_id=doc_id, text=text, entities=entities, relations=relations)


def save_standoff(doc: StandoffDocument, text_path, ann_path) -> None:
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(doc.text)
    lines = []
    for entity in doc.entities.values():
        lines.append(f"{entity.entity_id}\t{entity.label} {entity.start} {entity.end}\t{entity.surface}")
    for relation in doc.relations.values():
        lines.append(f"{relation.relation_id}\t{relation.label} "
                     f"Arg1:{relation.arg1} Arg2:{relation.arg2}")
    with open(ann_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def _entity_to_concept(entity: StandoffEntity) -> ConceptAnnotation:
    return ConceptAnnotation(start=entity.start, end=entity.end,
                             label=entity.label, text=entity.surface)


def standoff_to_instances(doc: StandoffDocument, task: str) -> list[TaskInstance]:
    """Concepts: one instance per document. Relations: one marked pair each."""
    if task == codec.TASK_CONCEPTS:
        gold = sorted((_entity_to_concept(e) for e in doc.entities.values()),
                      key=lambda c: (c.start, c.end))
        return [TaskInstance(
            instance_id=f"{doc.doc_id}-concepts",
            task=task,
            source_text=doc.text,
            input_text=codec.build_input(task, doc.text),
            gold=gold,
            target_text=codec.serialize_target(task, gold, doc.text),
        )]
    if task == codec.TASK_RELATIONS:
        instances = []
        for relation_id in sorted(doc.relations, key=lambda r: int(r[1:])):
            relation = doc.relations[relation_id]
            arg1 = _entity_to_concept(doc.entities[relation.arg1])
            arg2 = _entity_to_concept(doc.entities[relation.arg2])
            gold = [RelationAnnotation(arg1=arg1, arg2=arg2, label=relation.label)]
            instances.append(TaskInstance(
                instance_id=f"{doc.doc_id}-{relation_id}",
                task=task,
                source_text=doc.text,
                input_text=codec.build_input(task, doc.text, pair=(arg1, arg2)),
                gold=gold,
                target_text=codec.serialize_target(task, gold, doc.text),
            ))
        return instances
    raise ContractError(f"standoff conversion supports concepts and relations, not {task!r}")


# ---------------------------------------------------------------------------
# synthetic generator


DRUG_POOL = ("Colchicine", "Metformin", "Lisinopril", "Atorvastatin",
             "Amoxicillin", "Warfarin", "Prednisone", "Omeprazole")
STRENGTH_POOL = ("0.6 mg", "500 mg", "10 mg", "81 mg", "25 mg", "40 mg")
FORM_POOL = ("Tablet", "Capsule", "Syringe")
DOSAGE_POOL = ("One (1)", "Two (2)", "1 - 2")
ROUTE_POOL = ("PO", "Inhalation", "by mouth")
FREQUENCY_POOL = ("DAILY (Daily)", "BID (2 times a day)",
                  "Q6H (every 6 hours) as needed", "QOD (every other am)")
REASON_POOL = ("Gout flare/pain", "constipation", "pain", "high cholesterol", "rash")

RELATION_FRAGMENTS = (
    ("Lives", "at the group home", "Living status-Type"),
    ("smoking", "28 year pack hx", "Tobacco-Amount"),
    ("etoh", "remote", "Alcohol-Status"),
    ("bus driver", "for 18 yrs", "Employment-Duration"),
    ("former IVDU", "used once", "Drug-Frequency"),
    ("denies cocaine", "currently", "Drug-Status"),
    ("retired teacher", "since 2001", "Employment-Type"),
    ("fish oil", "daily", codec.NO_RELATION),
)

NORMALIZATION_POOL = (
    ("arthritis", "Arthritis", "C0003864"),
    ("carpal tunnel", "Carpal Tunnel Syndrome", "C0007286"),
    ("shingles", "Herpes zoster disease", "C0019360"),
    ("LGIB", "Lower gastrointestinal hemorrhage", "C0024050"),
    ("afib", "Atrial fibrillation", "C0004238"),
    ("HTN", "Hypertensive disease", "C0020538"),
    ("DM2", "Diabetes mellitus type 2", "C0011860"),
    ("pneumonia", "Pneumonia", "C0032285"),
    ("stroke", "Cerebrovascular accident", "C0038454"),
)

ABBREV_POOL = (
    ("CEA", ("carcinoembryonic antigen", "carotid endarterectomy")),
    ("AB", ("abortion", "antibody")),
    ("RA", ("rheumatoid arthritis", "right atrium")),
    ("MS", ("multiple sclerosis", "mitral stenosis")),
    ("PE", ("pulmonary embolism", "physical examination")),
)
# no consecutive uppercase runs here: abbreviations must anchor to their slot
ABBREV_CONTEXTS = (
    "Lab results: Normal except for an elevated {a} at 6.1 noted this visit.",
    "Assessment note: the finding of {a} was discussed with the family today.",
    "Review: prior documentation mentions {a} in the problem list.",
)

NLI_POOL = (
    ("The patient complained of dyspnea on exertion and jaw tightness.",
     "The patient has symptoms of a cardiac problem.", "entailment"),
    ("The chest radiograph was clear with no infiltrate.",
     "The patient has pneumonia on imaging.", "contradiction"),
    ("The patient was discharged home on hospital day three.",
     "The patient lives with a caregiver.", "neutral"),
    ("Blood cultures grew gram negative rods in two bottles.",
     "The patient has a bloodstream infection.", "entailment"),
    ("He denies any fevers, chills, or night sweats.",
     "The patient reports fevers at home.", "contradiction"),
    ("She was started on a heparin drip overnight.",
     "The patient will need surgery tomorrow.", "neutral"),
)

MEDICATION_POOL = ("aspirin", "metoprolol", "lisinopril", "insulin", "atorvastatin")
MEDICATION_CONTEXTS = (
    "Plan: we will continue her on {m} at the current dose.",
    "She refuses to take {m} due to previous concerns.",
    "Recommend holding {m} until the follow-up visit next week.",
)

PROGRESS_ASSESSMENTS = (
    "45 year old male with chest pain and new ECG changes.",
    "Elderly female admitted with community acquired pneumonia.",
    "Patient with poorly controlled diabetes and persistent fatigue.",
    "Middle aged male with acute kidney injury on admission labs.",
)
PROGRESS_PLANS = (
    "Baseline TTE today to assess function.",
    "Continue antibiotics and monitor oxygen requirement.",
    "Start insulin sliding scale and check morning labs.",
    "Renal ultrasound and hold nephrotoxic medications.",
)
LABEL_COPY_LEADS = (
    "Patient reviewed today with",
    "Follow up note filed with",
    "Overnight events reviewed with",
    "Daily progress documented with",
)

TASK_LABEL_COPY = "label_copy"


@dataclass
class SyntheticSpec:
    task: str
    count: int
    seed: int = 0


def default_lexicon() -> Lexicon:
    return Lexicon([(cui, name) for _, name, cui in NORMALIZATION_POOL])


class _Builder:
    def __init__(self):
        self.parts: list[str] = []
        self.length = 0

    def lit(self, text: str) -> None:
        self.parts.append(text)
        self.length += len(text)

    def span(self, text: str, label: str) -> ConceptAnnotation:
        start = self.length
        self.lit(text)
        return ConceptAnnotation(start=start, end=self.length, label=label, text=text)

    @property
    def text(self) -> str:
        return "".join(self.parts)


def generate_synthetic(spec: SyntheticSpec) -> list[TaskInstance]:
    """Deterministic template-filled instances for one task family."""
    if spec.count < 0:
        raise ContractError("instance count must be non-negative")
    task = codec.TASK_PROGRESS if spec.task == TASK_LABEL_COPY else spec.task
    if task not in codec.ALL_TASKS:
        raise ContractError(f"unknown task {spec.task!r}")
    rng = np.random.default_rng(spec.seed)
    builders = {
        codec.TASK_CONCEPTS: _synth_concepts,
        codec.TASK_RELATIONS: _synth_relations,
        codec.TASK_NORMALIZATION: _synth_normalization,
        codec.TASK_ABBREV: _synth_abbrev,
        codec.TASK_NLI: _synth_nli,
        codec.TASK_MEDICATION: _synth_medication,
        codec.TASK_PROGRESS: _synth_progress,
    }
    make = builders[task]
    instances = []
    for i in range(spec.count):
        source, gold, kwargs = make(rng, i, label_copy=spec.task == TASK_LABEL_COPY)
        instances.append(TaskInstance(
            instance_id=f"{spec.task}-{spec.seed}-{i:05d}",
            task=task,
            source_text=source,
            input_text=codec.build_input(task, source, **kwargs),
            gold=gold,
            target_text=codec.serialize_target(task, gold, source),
        ))
    return instances


def _pick(rng: np.random.Generator, pool):
    return pool[int(rng.integers(0, len(pool)))]


def _synth_concepts(rng, i, label_copy=False):
    b = _Builder()
    gold = []
    b.lit(f"{int(rng.integers(1, 99))}. ")
    gold.append(b.span(_pick(rng, DRUG_POOL), "drug"))
    b.lit(" ")
    gold.append(b.span(_pick(rng, STRENGTH_POOL), "strength"))
    b.lit(" ")
    form = _pick(rng, FORM_POOL)
    gold.append(b.span(form, "form"))
    b.lit(" Sig: ")
    gold.append(b.span(_pick(rng, DOSAGE_POOL), "dosage"))
    b.lit(" ")
    if rng.integers(0, 2):
        # second mention of the same form, annotated too: duplicate surfaces
        gold.append(b.span(form, "form"))
        b.lit(" ")
    gold.append(b.span(_pick(rng, ROUTE_POOL), "route"))
    b.lit(" ")
    gold.append(b.span(_pick(rng, FREQUENCY_POOL), "frequency"))
    b.lit(" for ")
    gold.append(b.span(_pick(rng, REASON_POOL), "reason"))
    b.lit(".")
    return b.text, gold, {}


def _synth_relations(rng, i, label_copy=False):
    b = _Builder()
    gold = []
    b.lit("Social History: ")
    count = int(rng.integers(1, 4))
    picks = rng.choice(len(RELATION_FRAGMENTS), size=count, replace=False)
    for j, pick in enumerate(sorted(int(p) for p in picks)):
        arg1_text, arg2_text, label = RELATION_FRAGMENTS[pick]
        if j:
            b.lit(", ")
        type1, _, type2 = label.partition("-")
        arg1 = b.span(arg1_text, type1 or "entity")
        b.lit(" ")
        arg2 = b.span(arg2_text, type2 or "entity")
        gold.append(RelationAnnotation(arg1=arg1, arg2=arg2, label=label))
    b.lit(".")
    return b.text, gold, {}


def _synth_normalization(rng, i, label_copy=False):
    b = _Builder()
    gold = []
    b.lit("Past Medical History: ")
    count = int(rng.integers(1, 5))
    picks = rng.choice(len(NORMALIZATION_POOL), size=count, replace=False)
    for j, pick in enumerate(sorted(int(p) for p in picks)):
        mention_text, name, cui = NORMALIZATION_POOL[pick]
        if j:
            b.lit(", ")
        mention = b.span(mention_text, "Disorder")
        gold.append(NormalizationAnnotation(mention=mention, cui=cui, preferred_name=name))
    b.lit(".")
    return b.text, gold, {}


def _synth_abbrev(rng, i, label_copy=False):
    abbrev, senses = ABBREV_POOL[int(rng.integers(0, len(ABBREV_POOL)))]
    template = _pick(rng, ABBREV_CONTEXTS)
    prefix, _, suffix = template.partition("{a}")
    b = _Builder()
    b.lit(prefix)
    focus = b.span(abbrev, "Abbreviation")
    b.lit(suffix)
    gold = [ClassificationGold(kind=codec.KIND_WSD, label=_pick(rng, senses), focus=focus)]
    return b.text, gold, {}


def _synth_nli(rng, i, label_copy=False):
    premise, hypothesis, label = NLI_POOL[int(rng.integers(0, len(NLI_POOL)))]
    gold = [ClassificationGold(kind=codec.KIND_NLI, label=label,
                               contexts=(("premise", premise), ("hypothesis", hypothesis)))]
    source = f"Premise: {premise} Hypothesis: {hypothesis}"
    return source, gold, {"premise": premise, "hypothesis": hypothesis}


def _synth_medication(rng, i, label_copy=False):
    med = _pick(rng, MEDICATION_POOL)
    template = _pick(rng, MEDICATION_CONTEXTS)
    prefix, _, suffix = template.partition("{m}")
    b = _Builder()
    b.lit(prefix)
    focus = b.span(med, "Medication")
    b.lit(suffix)
    event = _pick(rng, codec.MED_EVENT_LABELS)
    gold = [ClassificationGold(kind=codec.KIND_MED_EVENT, label=event, focus=focus)]
    if event == "Disposition":
        for dimension in codec.MED_DIMENSIONS:
            value = _pick(rng, codec.MED_CONTEXT_VALUES[dimension])
            gold.append(ClassificationGold(kind=codec.KIND_MED_CONTEXT, label=value,
                                           focus=focus, dimension=dimension))
    return b.text, gold, {}


def _synth_progress(rng, i, label_copy=False):
    label = codec.PROGRESS_LABELS[i % len(codec.PROGRESS_LABELS)] if label_copy \
        else _pick(rng, codec.PROGRESS_LABELS)
    if label_copy:
        assessment = f"{_pick(rng, LABEL_COPY_LEADS)} status {label} noted."
    else:
        assessment = _pick(rng, PROGRESS_ASSESSMENTS)
    plan = _pick(rng, PROGRESS_PLANS)
    gold = [ClassificationGold(kind=codec.KIND_PROGRESS, label=label,
                               contexts=(("assessment", assessment), ("plan", plan)))]
    source = f"Assessment: {assessment} Plan: {plan}"
    return source, gold, {"assessment": assessment, "plan": plan}


# ---------------------------------------------------------------------------
# instance interchange format (JSON lines)


def _concept_to_json(c: ConceptAnnotation) -> dict:
    return {"start": c.start, "end": c.end, "label": c.label, "text": c.text}


def _concept_from_json(obj, where: str) -> ConceptAnnotation:
    for fld in ("start", "end", "label", "text"):
        if fld not in obj:
            raise SchemaError(f"{where}: concept record lacks field {fld!r}")
    return ConceptAnnotation(start=int(obj["start"]), end=int(obj["end"]),
                             label=obj["label"], text=obj["text"])


def _gold_to_json(task: str, gold: list) -> dict:
    if task == codec.TASK_CONCEPTS:
        return {"concepts": [_concept_to_json(c) for c in gold]}
    if task == codec.TASK_RELATIONS:
        return {"relations": [{"arg1": _concept_to_json(r.arg1),
                               "arg2": _concept_to_json(r.arg2),
                               "label": r.label} for r in gold]}
    if task == codec.TASK_NORMALIZATION:
        return {"mentions": [dict(_concept_to_json(n.mention), cui=n.cui,
                                  preferred_name=n.preferred_name) for n in gold]}
    return {"classification": [{
        "kind": g.kind,
        "label": g.label,
        "dimension": g.dimension,
        "focus": _concept_to_json(g.focus) if g.focus is not None else None,
        "contexts": dict(g.contexts),
    } for g in gold]}


def _gold_from_json(task: str, obj, where: str) -> list:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: gold must be an object")
    if task == codec.TASK_CONCEPTS:
        if "concepts" not in obj:
            raise SchemaError(f"{where}: gold lacks field 'concepts'")
        return [_concept_from_json(c, where) for c in obj["concepts"]]
    if task == codec.TASK_RELATIONS:
        if "relations" not in obj:
            raise SchemaError(f"{where}: gold lacks field 'relations'")
        out = []
        for r in obj["relations"]:
            for fld in ("arg1", "arg2", "label"):
                if fld not in r:
                    raise SchemaError(f"{where}: relation record lacks field {fld!r}")
            out.append(RelationAnnotation(arg1=_concept_from_json(r["arg1"], where),
                                          arg2=_concept_from_json(r["arg2"], where),
                                          label=r["label"]))
        return out
    if task == codec.TASK_NORMALIZATION:
        if "mentions" not in obj:
            raise SchemaError(f"{where}: gold lacks field 'mentions'")
        out = []
        for m in obj["mentions"]:
            for fld in ("cui", "preferred_name"):
                if fld not in m:
                    raise SchemaError(f"{where}: mention record lacks field {fld!r}")
            out.append(NormalizationAnnotation(mention=_concept_from_json(m, where),
                                               cui=m["cui"], preferred_name=m["preferred_name"]))
        return out
    if "classification" not in obj:
        raise SchemaError(f"{where}: gold lacks field 'classification'")
    out = []
    for g in obj["classification"]:
        for fld in ("kind", "label"):
            if fld not in g:
                raise SchemaError(f"{where}: classification record lacks field {fld!r}")
        focus = _concept_from_json(g["focus"], where) if g.get("focus") else None
        contexts = tuple(sorted(g.get("contexts", {}).items()))
        out.append(ClassificationGold(kind=g["kind"], label=g["label"], focus=focus,
                                      contexts=contexts, dimension=g.get("dimension")))
    return out


def write_instances(path, instances: list[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            record = {
                "id": inst.instance_id,
                "task": inst.task,
                "source_text": inst.source_text,
                "input_text": inst.input_text,
                "gold": _gold_to_json(inst.task, inst.gold),
                "target_text": inst.target_text,
            }
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def read_instances(path) -> list[TaskInstance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            where = f"{path}: line {number}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{where}: invalid record: {exc}") from None
            for fld in ("id", "task", "source_text", "input_text", "gold", "target_text"):
                if fld not in record:
                    raise SchemaError(f"{where}: record lacks field {fld!r}")
            task = record["task"]
            if task not in codec.ALL_TASKS:
                raise SchemaError(f"{where}: unknown task {task!r}")
            gold = _gold_from_json(task, record["gold"], where)
            expected = codec.serialize_target(task, gold, record["source_text"])
            if expected != record["target_text"]:
                raise SchemaError(f"{where}: target_text does not match serialized gold")
            instances.append(TaskInstance(
                instance_id=record["id"],
                task=task,
                source_text=record["source_text"],
                input_text=record["input_text"],
                gold=gold,
                target_text=record["target_text"],
            ))
    return instances


# ---------------------------------------------------------------------------
# generations file: one record per instance


def write_generations(path, rows: list[tuple[str, str, bool]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for instance_id, text, truncated in rows:
            fh.write(json.dumps({"id": instance_id, "generated": text,
                                 "truncated": truncated},
                                ensure_ascii=False, sort_keys=True) + "\n")


def read_generations(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: line {number}: invalid record: {exc}") from None
            for fld in ("id", "generated"):
                if fld not in record:
                    raise SchemaError(f"{path}: line {number}: record lacks field {fld!r}")
            out[record["id"]] = record["generated"]
    return out
