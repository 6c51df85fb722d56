"""Classification metrics: accuracy, macro F1, macro one-vs-rest AUC.

AUC uses midranks, which equals the trapezoidal area under the ROC curve
with tied scores sharing rank mass: (concordant + 0.5 * ties) / pairs.
"""

from __future__ import annotations

import numpy as np


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot score an empty label set")
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1; 0/0 cases count as 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for k in range(n_classes):
        tp = np.sum((y_pred == k) & (y_true == k))
        fp = np.sum((y_pred == k) & (y_true != k))
        fn = np.sum((y_pred != k) & (y_true == k))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(is_positive, scores) -> float | None:
    """Mann-Whitney AUC with midrank tie handling.

    Returns None when either class is absent (undefined ranking).
    """
    is_positive = np.asarray(is_positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(is_positive.sum())
    n_neg = is_positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    rank_sum = ranks[is_positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(y_true, probs) -> float:
    """One-vs-rest AUC averaged over classes present in `y_true`.

    Classes with no positives or no negatives are skipped; if every class
    is degenerate the chance level 0.5 is returned.
    """
    y_true = np.asarray(y_true)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != y_true.size:
        raise ValueError("probs must be (n_samples, n_classes)")
    per_class = []
    for k in range(probs.shape[1]):
        auc = binary_auc(y_true == k, probs[:, k])
        if auc is not None:
            per_class.append(auc)
    return float(np.mean(per_class)) if per_class else 0.5


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation of fold-level scores."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
