"""ROC curves, AUC and thresholded classification scores."""

from __future__ import annotations

from typing import Optional

import numpy as np


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) sweeping the distinct scores from high to low.

    Tied scores enter as one group, so each threshold adds a single point.
    The curve starts at (0, 0) with threshold +inf and ends at (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if np.any(np.isnan(s)):
        raise ValueError("NaN score")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fp / n0]
    tpr = np.r_[0.0, tp / n1]
    return fpr, tpr, np.r_[np.inf, s[last]]


def trapezoid_area(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(scores, labels) -> tuple[Optional[list], Optional[float]]:
    """ROC point list and trapezoidal AUC; (None, None) when a class is absent."""
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        return None, None
    fpr, tpr, _ = roc_curve(scores, labels)
    return [[float(a), float(b)] for a, b in zip(fpr, tpr)], trapezoid_area(fpr, tpr)


def auc_score(scores, labels) -> Optional[float]:
    return roc_auc(scores, labels)[1]


def classification_scores(predicted, labels) -> dict:
    """Precision, recall and F1 of boolean predictions (None when undefined)."""
    p = np.asarray(predicted).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(p & y))
    n_pred, n_pos = int(p.sum()), int(y.sum())
    precision = tp / n_pred if n_pred else None
    recall = tp / n_pos if n_pos else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None if precision is None or recall is None else 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {"tp": tp, "predicted": n_pred, "positives": n_pos,
            "precision": precision, "recall": recall, "f1": f1}
