"""
Slide-level evaluation metrics.

Accuracy and ROC AUC come from scikit-learn; undefined cases (a single class,
a constant input) raise MetricError instead of returning a value.
"""
from typing import Sequence

import numpy as np
from sklearn.metrics import accuracy_score, roc_auc_score

from path_rwkv.utils.errors import MetricError


def accuracy(pred_labels: Sequence[int], labels: Sequence[int]) -> float:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    if labels.size == 0 or pred_labels.shape != labels.shape:
        raise MetricError(f"accuracy needs equal non-empty inputs, got {pred_labels.shape} and {labels.shape}")
    return float(accuracy_score(labels, pred_labels))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Binary ROC AUC; tied scores count 1/2.

    Raises:
        MetricError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise MetricError("AUC is undefined when only one class is present")
    return float(roc_auc_score(labels, scores))


def macro_auc(probs: np.ndarray, labels: Sequence[int]) -> float:
    """
    Macro one-vs-rest AUC over the classes present in `labels`.

    Args:
        probs: [n, K] class probabilities
        labels: [n] class indices
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] == 2:
        return auc(probs[:, 1], labels == 1)
    present = np.unique(labels)
    if present.size < 2:
        raise MetricError("AUC is undefined when only one class is present")
    if present.size == probs.shape[1]:
        try:
            return float(roc_auc_score(labels, probs, multi_class="ovr", average="macro",
                                       labels=np.arange(probs.shape[1])))
        except ValueError as e:
            raise MetricError(f"AUC failed: {e}") from e
    # classes missing from the labels have no one-vs-rest curve
    return float(np.mean([auc(probs[:, k], labels == k) for k in present]))


def pearson(preds: Sequence[float], targets: Sequence[float]) -> float:
    """
    Pearson product-moment correlation (two-pass).

    Raises:
        MetricError: Fewer than 2 values or a constant input
    """
    x = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise MetricError(f"pearson needs two equal vectors of length >= 2, got {x.shape} and {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("Correlation is undefined for a constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
