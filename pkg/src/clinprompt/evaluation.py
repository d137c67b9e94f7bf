"""Micro-averaged precision/recall/F1 and accuracy over codec predictions.

Matching is greedy one-to-one: gold items in offset order each take the
leftmost unmatched prediction that qualifies under the mode. Zero
denominators score zero. Nonlogical and Irrelevant generations contribute no
predictions, so their gold counts as misses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import codec
from .codec import (ALL_STATUSES, ConceptAnnotation, Lexicon, NormalizationAnnotation,
                    RelationAnnotation, TaskInstance)
from .errors import ContractError

MODE_STRICT = "strict"
MODE_RELAXED = "relaxed"


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn


def prf(counts: Counts) -> tuple[float, float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class EvalReport:
    per_category: dict[str, Counts]
    micro: Counts
    precision: float
    recall: float
    f1: float
    accuracy: float | None = None
    status_histogram: dict[str, int] = field(default_factory=dict)
    instances: int = 0
    task: str = ""
    mode: str = MODE_STRICT


def micro_prf(per_category: dict[str, Counts]) -> EvalReport:
    micro = Counts()
    for counts in per_category.values():
        micro.add(counts)
    p, r, f1 = prf(micro)
    return EvalReport(per_category=dict(per_category), micro=micro,
                      precision=p, recall=r, f1=f1)


def _bucket(per_category: dict[str, Counts], category: str) -> Counts:
    if category not in per_category:
        per_category[category] = Counts()
    return per_category[category]


def _greedy_match(gold: list, pred: list, gold_key, pred_key, fits) -> tuple[list, list, list]:
    """Returns (matched pairs, unmatched gold, unmatched pred)."""
    ordered_gold = sorted(range(len(gold)), key=lambda i: gold_key(gold[i]))
    ordered_pred = sorted(range(len(pred)), key=lambda i: pred_key(pred[i]))
    used: set[int] = set()
    pairs = []
    missed = []
    for gi in ordered_gold:
        chosen = None
        for pi in ordered_pred:
            if pi in used:
                continue
            if fits(gold[gi], pred[pi]):
                chosen = pi
                break
        if chosen is None:
            missed.append(gold[gi])
        else:
            used.add(chosen)
            pairs.append((gold[gi], pred[chosen]))
    extras = [pred[pi] for pi in ordered_pred if pi not in used]
    return pairs, missed, extras


def _spans_overlap(a_start: int, a_end: int, b_start: int, b_end: int) -> bool:
    return max(a_start, b_start) < min(a_end, b_end)


def match_concepts(gold: list[ConceptAnnotation], pred: list[ConceptAnnotation],
                   mode: str = MODE_STRICT) -> dict[str, Counts]:
    """Strict: identical (start, end, label). Relaxed: overlapping span, same label."""
    if mode not in (MODE_STRICT, MODE_RELAXED):
        raise ContractError(f"unknown match mode {mode!r}")

    def fits(g, p):
        if g.label != p.label:
            return False
        if mode == MODE_STRICT:
            return g.start == p.start and g.end == p.end
        return _spans_overlap(g.start, g.end, p.start, p.end)

    span = lambda c: (c.start, c.end)
    pairs, missed, extras = _greedy_match(gold, pred, span, span, fits)
    per_category: dict[str, Counts] = {}
    for g, _ in pairs:
        _bucket(per_category, g.label).tp += 1
    for g in missed:
        _bucket(per_category, g.label).fn += 1
    for p in extras:
        _bucket(per_category, p.label).fp += 1
    return per_category


def match_relations(gold: list[RelationAnnotation],
                    pred: list[RelationAnnotation]) -> dict[str, Counts]:
    """A hit needs both argument spans to match exactly plus the same label."""

    def fits(g, p):
        return (g.label == p.label
                and (g.arg1.start, g.arg1.end) == (p.arg1.start, p.arg1.end)
                and (g.arg2.start, g.arg2.end) == (p.arg2.start, p.arg2.end))

    span = lambda r: (r.arg1.start, r.arg2.start)
    pairs, missed, extras = _greedy_match(gold, pred, span, span, fits)
    per_category: dict[str, Counts] = {}
    for g, _ in pairs:
        _bucket(per_category, g.label).tp += 1
    for g in missed:
        _bucket(per_category, g.label).fn += 1
    for p in extras:
        _bucket(per_category, p.label).fp += 1
    return per_category


def score_normalization(gold: list[NormalizationAnnotation],
                        pred: list[NormalizationAnnotation],
                        mode: str = MODE_STRICT) -> dict[str, Counts]:
    """A hit needs the same CUI plus a span match under the chosen mode."""
    if mode not in (MODE_STRICT, MODE_RELAXED):
        raise ContractError(f"unknown match mode {mode!r}")

    def fits(g, p):
        if g.cui != p.cui or g.cui == codec.NO_CUI:
            return False
        if mode == MODE_STRICT:
            return (g.mention.start, g.mention.end) == (p.mention.start, p.mention.end)
        return _spans_overlap(g.mention.start, g.mention.end, p.mention.start, p.mention.end)

    span = lambda n: (n.mention.start, n.mention.end)
    pairs, missed, extras = _greedy_match(gold, pred, span, span, fits)
    per_category: dict[str, Counts] = {}
    for g, _ in pairs:
        _bucket(per_category, "Disorder").tp += 1
    for _ in missed:
        _bucket(per_category, "Disorder").fn += 1
    for _ in extras:
        _bucket(per_category, "Disorder").fp += 1
    return per_category


def accuracy(gold_labels: list[str], pred_labels: list[str | None]) -> float:
    if len(gold_labels) != len(pred_labels):
        raise ContractError(
            f"accuracy needs equal-length label lists, got {len(gold_labels)}/{len(pred_labels)}")
    if not gold_labels:
        return 0.0
    hits = sum(1 for g, p in zip(gold_labels, pred_labels) if g == p)
    return hits / len(gold_labels)


def match_labels(pairs: list[tuple[str, str, str | None]]) -> dict[str, Counts]:
    """Count (category, gold, predicted-or-None) classification decisions."""
    per_category: dict[str, Counts] = {}
    for category, gold_label, pred_label in pairs:
        if pred_label is None:
            _bucket(per_category, f"{category}:{gold_label}").fn += 1
        elif pred_label == gold_label:
            _bucket(per_category, f"{category}:{gold_label}").tp += 1
        else:
            _bucket(per_category, f"{category}:{gold_label}").fn += 1
            _bucket(per_category, f"{category}:{pred_label}").fp += 1
    return per_category


# ---------------------------------------------------------------------------
# instance-level scoring


def score_instances(instances: list[TaskInstance], generations: dict[str, str],
                    mode: str = MODE_STRICT, lexicon: Lexicon | None = None) -> EvalReport:
    """Parse one generation per instance and score against the stored gold."""
    if not instances:
        raise ContractError("no instances to score")
    tasks = {inst.task for inst in instances}
    if len(tasks) != 1:
        raise ContractError(f"instances mix tasks {sorted(tasks)}; score one task at a time")
    task = instances[0].task
    histogram = {status: 0 for status in ALL_STATUSES}
    per_category: dict[str, Counts] = {}
    label_pairs: list[tuple[str, str, str | None]] = []
    classification = task in (codec.TASK_ABBREV, codec.TASK_NLI,
                              codec.TASK_MEDICATION, codec.TASK_PROGRESS)

    for inst in instances:
        if inst.instance_id not in generations:
            raise ContractError(f"no generation for instance {inst.instance_id!r}")
        pairs = None
        if task == codec.TASK_RELATIONS:
            pairs = [(r.arg1, r.arg2) for r in inst.gold]
        parsed = codec.parse_output(task, generations[inst.instance_id], inst.source_text,
                                    expected_pairs=pairs, lexicon=lexicon)
        histogram[parsed.status] += 1
        if task == codec.TASK_CONCEPTS:
            for cat, counts in match_concepts(inst.gold, parsed.predictions, mode).items():
                _bucket(per_category, cat).add(counts)
        elif task == codec.TASK_RELATIONS:
            for cat, counts in match_relations(inst.gold, parsed.predictions).items():
                _bucket(per_category, cat).add(counts)
        elif task == codec.TASK_NORMALIZATION:
            for cat, counts in score_normalization(inst.gold, parsed.predictions, mode).items():
                _bucket(per_category, cat).add(counts)
        else:
            label_pairs.extend(_classification_pairs(inst.gold, parsed.predictions))

    if classification:
        per_category = match_labels(label_pairs)
    report = micro_prf(per_category)
    report.status_histogram = histogram
    report.instances = len(instances)
    report.task = task
    report.mode = mode
    if classification:
        report.accuracy = accuracy([g for _, g, _ in label_pairs],
                                   [p for _, _, p in label_pairs])
    return report


def _classification_pairs(gold: list, predictions: list) -> list[tuple[str, str, str | None]]:
    def slot(item):
        return (item.kind, item.dimension)

    predicted = {}
    for p in predictions:
        predicted.setdefault(slot(p), p.label)
    out = []
    for g in gold:
        category = g.kind if g.dimension is None else f"{g.kind}.{g.dimension}"
        out.append((category, g.label, predicted.get(slot(g))))
    return out


# ---------------------------------------------------------------------------
# report rendering


def render_report_text(report: EvalReport) -> str:
    lines = [
        f"task={report.task}",
        f"mode={report.mode}",
        f"instances={report.instances}",
    ]
    for status in ALL_STATUSES:
        lines.append(f"status.{status}={report.status_histogram.get(status, 0)}")
    lines += [
        f"micro.tp={report.micro.tp}",
        f"micro.fp={report.micro.fp}",
        f"micro.fn={report.micro.fn}",
        f"micro.precision={report.precision:.6f}",
        f"micro.recall={report.recall:.6f}",
        f"micro.f1={report.f1:.6f}",
    ]
    if report.accuracy is not None:
        lines.append(f"accuracy={report.accuracy:.6f}")
    return "\n".join(lines) + "\n"


def render_report_table(report: EvalReport) -> str:
    lines = ["category\ttp\tfp\tfn\tprecision\trecall\tf1"]
    for category in sorted(report.per_category):
        counts = report.per_category[category]
        p, r, f1 = prf(counts)
        lines.append(f"{category}\t{counts.tp}\t{counts.fp}\t{counts.fn}"
                     f"\t{p:.6f}\t{r:.6f}\t{f1:.6f}")
    lines.append(f"MICRO\t{report.micro.tp}\t{report.micro.fp}\t{report.micro.fn}"
                 f"\t{report.precision:.6f}\t{report.recall:.6f}\t{report.f1:.6f}")
    return "\n".join(lines) + "\n"
