"""Binary detection metrics with falls as the positive class."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UndefinedAUCError

METRIC_COLUMNS = ("specificity", "recall", "precision", "fp_rate", "f1", "auc", "accuracy")


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    specificity: float
    recall: float
    precision: float
    fp_rate: float
    f1: float
    accuracy: float
    auc: float = float("nan")
    degenerate: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion-matrix metrics at ``score >= threshold``.

    Ratios with an empty denominator are reported as 0 and named in
    ``degenerate``. AUC is filled in when both classes are present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if scores.size == 0:
        raise DataError("no scores")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")

    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))

    flags: list[str] = []
    recall = _ratio(tp, tp + fn, "recall", flags)
    precision = _ratio(tp, tp + fp, "precision", flags)
    specificity = _ratio(tn, tn + fp, "specificity", flags)
    fp_rate = _ratio(fp, fp + tn, "fp_rate", flags)
    if precision + recall == 0:
        flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    report = MetricsReport(tp, fp, tn, fn, specificity, recall, precision, fp_rate, f1,
                           accuracy=(tp + tn) / labels.size, degenerate=flags)
    if pos.any() and (~pos).any():
        report.auc = roc_auc(scores, labels)
    else:
        flags.append("auc")
    return report


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [values.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of the area under the ROC curve (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative label")
    r_pos = average_ranks(scores)[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
