"""Patch-wise evaluation: confusion matrices and derived metrics.

Unseen predictions never enter the matrix; they are reported as reduced
coverage instead, since ground truth only exists for annotated tissue.
Ratios with a zero denominator are reported as absent (None), never as 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labels import CLASS_ORDER, Label, PatchClass


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are truth, columns are prediction, in fixed class order."""

    classes: tuple[Label, ...]
    counts: np.ndarray  # (k, k) int64
    n_unseen: int = 0

    def __post_init__(self):
        k = len(self.classes)
        if self.counts.shape != (k, k):
            raise ValueError(f"counts shape {self.counts.shape} does not match {k} classes")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def coverage(self) -> float:
        """Fraction of predictions confident enough to be evaluated."""
        seen = self.total
        denom = seen + self.n_unseen
        return seen / denom if denom else 0.0

    def binary_counts(self, positive: Label = Label.MALIGNANT) -> tuple[int, int, int, int]:
        """(TP, FN, FP, TN) treating `positive` one-vs-rest."""
        i = self.classes.index(positive)
        tp = int(self.counts[i, i])
        fn = int(self.counts[i].sum()) - tp
        fp = int(self.counts[:, i].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fn, fp, tn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    f1: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    coverage: float
    per_class: dict[str, dict[str, float | None]] | None = None

    def to_json_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "coverage": self.coverage,
        }
        if self.per_class is not None:
            d["per_class"] = self.per_class
        return d


def confusion(
    preds: Sequence[PatchClass],
    truths: Sequence[Label],
    classes: tuple[Label, ...] | None = None,
) -> ConfusionMatrix:
    """Count (truth, prediction) pairs, setting unseen predictions aside.

    `classes` defaults to (benign, malignant) when no normal labels occur
    on either side, else the full three-class order.
    """
    if len(preds) != len(truths):
        raise EvaluationError(f"{len(preds)} predictions but {len(truths)} truths")
    if classes is None:
        has_normal = any(t is Label.NORMAL for t in truths) or any(
            p is PatchClass.NORMAL for p in preds
        )
        classes = CLASS_ORDER if has_normal else CLASS_ORDER[:2]
    index = {label: i for i, label in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    n_unseen = 0
    for pred, truth in zip(preds, truths):
        if pred is PatchClass.UNSEEN:
            n_unseen += 1
            continue
        pred_label = Label(pred.value)
        if truth not in index or pred_label not in index:
            raise EvaluationError(
                f"pair ({truth}, {pred}) outside class set {[c.value for c in classes]}"
            )
        counts[index[truth], index[pred_label]] += 1
    return ConfusionMatrix(classes=tuple(classes), counts=counts, n_unseen=n_unseen)


def _ratio(num: int, denom: int) -> float | None:
    return num / denom if denom else None


def metrics(cm: ConfusionMatrix, positive: Label = Label.MALIGNANT) -> MetricsReport:
    """Accuracy plus the positive-class sensitivity/specificity/precision/F1.

    Multiclass matrices additionally get a one-vs-rest breakdown per class.
    """
    if cm.total == 0:
        raise EvaluationError("cannot compute metrics from an empty matrix")
    accuracy = float(np.trace(cm.counts)) / cm.total
    tp, fn, fp, tn = cm.binary_counts(positive)
    sensitivity = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    precision = _ratio(tp, tp + fp)
    if precision is None or sensitivity is None or precision + sensitivity == 0:
        f1 = None
    else:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)

    per_class = None
    if len(cm.classes) > 2:
        per_class = {}
        for label in cm.classes:
            ctp, cfn, cfp, ctn = cm.binary_counts(label)
            crec = _ratio(ctp, ctp + cfn)
            cprec = _ratio(ctp, ctp + cfp)
            if cprec is None or crec is None or cprec + crec == 0:
                cf1 = None
            else:
                cf1 = 2 * cprec * crec / (cprec + crec)
            per_class[label.value] = {
                "sensitivity": crec,
                "specificity": _ratio(ctn, ctn + cfp),
                "precision": cprec,
                "f1": cf1,
                "support": ctp + cfn,
            }
    return MetricsReport(
        accuracy=accuracy,
        f1=f1,
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        coverage=cm.coverage,
        per_class=per_class,
    )


def report_csv(report: MetricsReport, model_name: str = "model") -> str:
    """One-row CSV with the headline columns (accuracy as a percentage)."""

    def fmt(v: float | None) -> str:
        return "" if v is None else f"{v:.4f}"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "acc_percent", "f1", "sensitivity", "specificity"])
    writer.writerow(
        [
            model_name,
            f"{report.accuracy * 100:.2f}",
            fmt(report.f1),
            fmt(report.sensitivity),
            fmt(report.specificity),
        ]
    )
    return buf.getvalue()


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
