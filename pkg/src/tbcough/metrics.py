"""ROC/AUC, equal-error-rate thresholds and thresholded classification metrics.

TB is the positive class; a score >= threshold is a TB decision.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise MetricError("both classes are required")
    return scores, labels


def auc(scores, labels) -> float:
    """Area under the ROC curve; tied scores count half (trapezoidal rule)."""
    scores, labels = _check(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _operating_points(scores: np.ndarray, labels: np.ndarray):
    """Thresholds from high to low with FPR and FNR at each.

    Candidates are the midpoints between distinct sorted scores plus one
    threshold above the maximum and one below the minimum.
    """
    uniq = np.unique(scores)
    span = max(uniq[-1] - uniq[0], 1e-6)
    thresholds = np.concatenate([[uniq[-1] + span], (uniq[1:] + uniq[:-1])[::-1] / 2,
                                 [uniq[0] - span]])
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    return thresholds, fp / len(neg), 1.0 - tp / len(pos)


def roc_curve(scores, labels) -> np.ndarray:
    """Rows of (threshold, fpr, tpr), threshold descending."""
    scores, labels = _check(scores, labels)
    t, fpr, fnr = _operating_points(scores, labels)
    return np.column_stack([t, fpr, 1.0 - fnr])


def eer_threshold(scores, labels) -> tuple[float, float]:
    """(gamma, eer): where FPR = FNR, interpolating linearly between operating points.

    gamma is clipped to [0, 1].
    """
    scores, labels = _check(scores, labels)
    t, fpr, fnr = _operating_points(scores, labels)
    diff = fpr - fnr  # increases from -1 to +1 as the threshold drops
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        gamma, eer = t[k], fpr[k]
    else:
        lam = -diff[k - 1] / (diff[k] - diff[k - 1])
        gamma = t[k - 1] + lam * (t[k] - t[k - 1])
        eer = fpr[k - 1] + lam * (fpr[k] - fpr[k - 1])
    return float(np.clip(gamma, 0.0, 1.0)), float(eer)


@dataclass
class Metrics:
    sensitivity: float
    specificity: float
    accuracy: float
    auc: float
    tp: int
    fn: int
    tn: int
    fp: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, threshold: float) -> Metrics:
    scores, labels = _check(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    return Metrics(
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        accuracy=(tp + tn) / len(labels),
        auc=auc(scores, labels),
        tp=tp, fn=fn, tn=tn, fp=fp,
        threshold=float(threshold),
    )
