"""Confusion matrices, accuracy / precision / recall, macro means and the
sorting-stream ("material flow") reading of a confusion matrix.

Rows are actual classes, columns are predicted classes. Precision or recall
with a zero denominator is ``None`` (undefined) rather than 0 and is left
out of macro means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import UndefinedMetricError

SEVERITIES = ("benign", "value_loss", "hindrance")

# What a stray item of each class does to a stream it does not belong in.
DEFAULT_SEVERITY = {
    "metal_piece": "benign",
    "pcb": "value_loss",
    "glass": "hindrance",
    "battery": "value_loss",
    "other": "value_loss",
}

BINARY_MAPPING = {"battery": "battery", "metal_piece": "other", "pcb": "other", "glass": "other"}


def percent(value: float | None) -> str:
    """Render a fraction as a percentage with two decimals, rounding half up."""
    if value is None:
        return "n/a"
    d = Decimal(repr(value * 100)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{d}%"


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        classes = tuple(self.classes)
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(classes)
        if len(set(classes)) != k:
            raise ValueError(f"duplicate class names in {classes}")
        if counts.shape != (k, k):
            raise ValueError(f"counts must be {k}x{k}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "counts", counts)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.classes == other.classes
                and np.array_equal(self.counts, other.counts))

    def index(self, cls: str) -> int:
        try:
            return self.classes.index(cls)
        except ValueError:
            raise ValueError(f"unknown class {cls!r}; valid classes: {list(self.classes)}") from None

    @property
    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def actual_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def false_positives(self) -> np.ndarray:
        return self.predicted_totals - self.true_positives

    @property
    def false_negatives(self) -> np.ndarray:
        return self.actual_totals - self.true_positives

    @property
    def n_true(self) -> int:
        return int(np.trace(self.counts))

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())

    def collapse(self, mapping: Mapping[str, str], classes: Sequence[str] | None = None
                 ) -> "ConfusionMatrix":
        """Merge classes via ``mapping`` (old -> new); unmapped classes keep their name."""
        targets = [mapping.get(c, c) for c in self.classes]
        order = tuple(classes) if classes is not None else tuple(dict.fromkeys(targets))
        missing = set(targets) - set(order)
        if missing:
            raise ValueError(f"mapping targets {sorted(missing)} absent from {list(order)}")
        proj = np.zeros((len(self.classes), len(order)), dtype=np.int64)
        for i, t in enumerate(targets):
            proj[i, order.index(t)] = 1
        return ConfusionMatrix(order, proj.T @ self.counts @ proj)

    def reorder(self, classes: Sequence[str]) -> "ConfusionMatrix":
        idx = [self.index(c) for c in classes]
        if sorted(idx) != list(range(len(self.classes))):
            raise ValueError("reorder needs a permutation of the class list")
        return ConfusionMatrix(tuple(classes), self.counts[np.ix_(idx, idx)])

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ConfusionMatrix":
        try:
            return cls(tuple(data["classes"]), np.asarray(data["counts"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"confusion JSON needs 'classes' and 'counts': {exc}") from None


def confusion_from_predictions(actual: Sequence[str], predicted: Sequence[str],
                               classes: Sequence[str]) -> ConfusionMatrix:
    if len(actual) != len(predicted):
        raise ValueError(f"length mismatch: {len(actual)} actual vs {len(predicted)} predicted")
    lookup = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for a, p in zip(actual, predicted):
        if a not in lookup or p not in lookup:
            bad = a if a not in lookup else p
            raise ValueError(f"unknown label {bad!r}; valid classes: {list(classes)}")
        counts[lookup[a], lookup[p]] += 1
    return ConfusionMatrix(tuple(classes), counts)


def accuracy(cm: ConfusionMatrix) -> float:
    """Correct predictions over all predictions."""
    if cm.n_total == 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return cm.n_true / cm.n_total


def precision(cm: ConfusionMatrix, cls: str) -> float | None:
    i = cm.index(cls)
    denom = int(cm.predicted_totals[i])
    return int(cm.counts[i, i]) / denom if denom else None


def recall(cm: ConfusionMatrix, cls: str) -> float | None:
    i = cm.index(cls)
    denom = int(cm.actual_totals[i])
    return int(cm.counts[i, i]) / denom if denom else None


@dataclass(frozen=True)
class ClassMetrics:
    cls: str
    precision: float | None
    recall: float | None


def macro_means(per_class: Sequence[ClassMetrics]) -> tuple[float, float]:
    """Unweighted means of the defined per-class precisions and recalls."""
    ps = [m.precision for m in per_class if m.precision is not None]
    rs = [m.recall for m in per_class if m.recall is not None]
    if not ps and not rs:
        raise UndefinedMetricError("no class has a defined precision or recall")
    if not ps or not rs:
        raise UndefinedMetricError(
            "macro %s undefined: no class has a defined value" % ("precision" if not ps else "recall"))
    return sum(ps) / len(ps), sum(rs) / len(rs)


@dataclass
class EvaluationReport:
    confusion: ConfusionMatrix
    per_class: list[ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    flags: list[str] = field(default_factory=list)

    @property
    def classes(self) -> tuple[str, ...]:
        return self.confusion.classes

    def metrics_for(self, cls: str) -> ClassMetrics:
        for m in self.per_class:
            if m.cls == cls:
                return m
        raise ValueError(f"unknown class {cls!r}")

    def to_dict(self) -> dict:
        d = {
            "classes": list(self.classes),
            "confusion": self.confusion.counts.tolist(),
            "accuracy": self.accuracy,
            "per_class": [{"class": m.cls, "precision": m.precision, "recall": m.recall}
                          for m in self.per_class],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
        }
        if self.flags:
            d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            ConfusionMatrix(tuple(d["classes"]), np.asarray(d["confusion"])),
            [ClassMetrics(m["class"], m["precision"], m["recall"]) for m in d["per_class"]],
            d["accuracy"], d["macro_precision"], d["macro_recall"], list(d.get("flags", [])),
        )

    def format_table(self) -> str:
        lines = [f"{'class':<14}{'precision':>11}{'recall':>10}"]
        for m in self.per_class:
            lines.append(f"{m.cls:<14}{percent(m.precision):>11}{percent(m.recall):>10}")
        lines.append(f"{'macro':<14}{percent(self.macro_precision):>11}{percent(self.macro_recall):>10}")
        lines.append(f"accuracy {percent(self.accuracy)} ({self.confusion.n_true}/{self.confusion.n_total})")
        lines.extend(f"note: {f}" for f in self.flags)
        return "\n".join(lines)


def evaluate(cm: ConfusionMatrix) -> EvaluationReport:
    per_class = [ClassMetrics(c, precision(cm, c), recall(cm, c)) for c in cm.classes]
    mp, mr = macro_means(per_class)
    return EvaluationReport(cm, per_class, accuracy(cm), mp, mr)


def format_confusion(cm: ConfusionMatrix) -> str:
    """Plain-text grid: rows actual, columns predicted."""
    w = max(8, *(len(c) + 2 for c in cm.classes))
    head = " " * w + "".join(f"{c:>{w}}" for c in cm.classes)
    rows = [f"{c:<{w}}" + "".join(f"{int(v):>{w}}" for v in row)
            for c, row in zip(cm.classes, cm.counts)]
    return "\n".join(["actual \\ predicted", head, *rows])


# -- material flow -------------------------------------------------------------

@dataclass(frozen=True)
class ContaminantFinding:
    cls: str
    count: int
    severity: str


@dataclass
class MaterialFlowReport:
    target_class: str
    stream_composition: dict[str, int]
    purity: float | None
    recovery: float | None
    contaminant_findings: list[ContaminantFinding]

    def to_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "stream_composition": dict(self.stream_composition),
            "purity": self.purity,
            "recovery": self.recovery,
            "contaminant_findings": [{"class": f.cls, "count": f.count, "severity": f.severity}
                                     for f in self.contaminant_findings],
        }

    def summary(self) -> str:
        total = sum(self.stream_composition.values())
        lines = [f"{self.target_class} stream: {total} items, purity {percent(self.purity)}, "
                 f"recovery {percent(self.recovery)}"]
        lines += [f"  {cls}: {n}" for cls, n in self.stream_composition.items()]
        if self.contaminant_findings:
            lines += [f"  contaminant {f.cls} x{f.count} ({f.severity})"
                      for f in self.contaminant_findings]
        else:
            lines.append("  no contaminants")
        return "\n".join(lines)


def material_flow(cm: ConfusionMatrix, target_class: str = "battery",
                  severity_map: Mapping[str, str] | None = None) -> MaterialFlowReport:
    """Read the predicted-``target_class`` column as a sorted output stream.

    Purity is the target's precision and recovery its recall. Each other
    class found in the stream is reported with the severity ``severity_map``
    assigns to it.
    """
    j = cm.index(target_class)
    severity_map = DEFAULT_SEVERITY if severity_map is None else severity_map
    others = [c for c in cm.classes if c != target_class]
    missing = [c for c in others if c not in severity_map]
    if missing:
        raise ValueError(f"severity_map lacks classes {missing}")
    bad = {c: s for c, s in severity_map.items() if s not in SEVERITIES}
    if bad:
        raise ValueError(f"unknown severities {bad}; expected one of {SEVERITIES}")
    column = cm.counts[:, j]
    composition = {c: int(n) for c, n in zip(cm.classes, column)}
    findings = [ContaminantFinding(c, composition[c], severity_map[c])
                for c in others if composition[c] > 0]
    return MaterialFlowReport(target_class, composition, precision(cm, target_class),
                              recall(cm, target_class), findings)


# -- comparisons ---------------------------------------------------------------

def _delta(a, b):
    return None if a is None or b is None else b - a


def compare_reports(a: EvaluationReport, b: EvaluationReport,
                    mapping: Mapping[str, str] | None = None) -> dict:
    """Signed differences ``b - a`` for every shared metric.

    When the class sets differ, ``mapping`` collapses the finer report's
    confusion matrix onto the coarser one's classes before comparing.
    """
    if set(a.classes) != set(b.classes):
        if mapping is None:
            raise ValueError(f"class sets differ ({list(a.classes)} vs {list(b.classes)}) "
                             "and no mapping was given")
        if set(mapping) >= set(a.classes):
            a = evaluate(a.confusion.collapse(mapping, b.classes))
        elif set(mapping) >= set(b.classes):
            b = evaluate(b.confusion.collapse(mapping, a.classes))
        else:
            raise ValueError("mapping covers neither report's class set")
        if set(a.classes) != set(b.classes):
            raise ValueError("class sets still differ after mapping")
    rows = []
    for cls in a.classes:
        ma, mb = a.metrics_for(cls), b.metrics_for(cls)
        rows.append({"class": cls, "precision": _delta(ma.precision, mb.precision),
                     "recall": _delta(ma.recall, mb.recall)})
    return {
        "accuracy": b.accuracy - a.accuracy,
        "macro_precision": b.macro_precision - a.macro_precision,
        "macro_recall": b.macro_recall - a.macro_recall,
        "per_class": rows,
    }


def dump_json(obj: dict, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")
