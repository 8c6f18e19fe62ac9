"""Classification metrics: sensitivity, specificity, balanced accuracy, ROC AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "MetricsReport",
    "confusion_rates",
    "balanced_accuracy",
    "roc_auc",
    "roc_auc_pairs",
    "evaluate_scores",
]


@dataclass
class MetricsReport:
    balanced_accuracy: float
    sensitivity: float
    specificity: float
    roc_auc: float
    n_pos: int
    n_neg: int
    threshold: float

    def as_row(self) -> dict:
        return asdict(self)


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    return y


def confusion_rates(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Return ``(TP / (TP + FN), TN / (TN + FP))``; a score at the threshold counts as positive."""
    y = _binary_labels(labels)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    sensitivity = float(np.sum(pred & y) / np.sum(y))
    specificity = float(np.sum(~pred & ~y) / np.sum(~y))
    return sensitivity, specificity


def balanced_accuracy(sensitivity: float, specificity: float) -> float:
    for v in (sensitivity, specificity):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"rates must lie in [0, 1], got {v}")
    return (sensitivity + specificity) / 2.0


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted one half."""
    y = _binary_labels(labels)
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_pairs(scores, labels) -> float:
    """Brute-force AUC over every positive/negative pair (reference implementation)."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def evaluate_scores(scores, labels, threshold: float = 0.5) -> MetricsReport:
    y = _binary_labels(labels)
    sens, spec = confusion_rates(scores, y, threshold)
    return MetricsReport(
        balanced_accuracy=balanced_accuracy(sens, spec),
        sensitivity=sens,
        specificity=spec,
        roc_auc=roc_auc(scores, y),
        n_pos=int(y.sum()),
        n_neg=int((~y).sum()),
        threshold=float(threshold),
    )
