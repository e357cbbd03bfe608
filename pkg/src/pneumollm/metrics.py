"""Threshold metrics and ROC AUC for binary scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AUCUndefinedError(ValueError):
    """Only one class is present; ``report`` still holds the threshold metrics."""

    def __init__(self, msg: str, report: MetricsReport):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    accuracy: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def avg(self) -> float:
        return (self.sensitivity + self.specificity + self.accuracy + self.auc) / 4.0

    def row(self) -> dict:
        return {"sens": self.sensitivity, "spec": self.specificity, "acc": self.accuracy,
                "auc": self.auc, "avg": self.avg}


def _ratio(a: int, b: int) -> float:
    return a / b if b else float("nan")


def auc_trapezoid(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration over distinct thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # one ROC vertex per distinct score, so tied scores become a diagonal segment
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_pairwise(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counting half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion-matrix metrics at ``score >= threshold`` plus ROC AUC."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores vs {len(y)} labels")
    if len(y) == 0:
        raise ValueError("no samples")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    sens, spec = _ratio(tp, tp + fn), _ratio(tn, tn + fp)
    acc = (tp + tn) / len(y)
    if tp + fn == 0 or tn + fp == 0:
        report = MetricsReport(sens, spec, acc, float("nan"), tp, fp, tn, fn)
        raise AUCUndefinedError("AUC undefined: only one class present", report)
    return MetricsReport(sens, spec, acc, auc_trapezoid(s, y), tp, fp, tn, fn)


def mean_report(reports: list[MetricsReport]) -> dict:
    """Average each metric across folds (AVG is the mean of per-fold AVGs)."""
    keys = ("sens", "spec", "acc", "auc", "avg")
    rows = [r.row() for r in reports]
    return {k: float(np.mean([row[k] for row in rows])) for k in keys}
