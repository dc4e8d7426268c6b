"""Confusion matrices, balanced accuracy and normal-approximation intervals."""
from __future__ import annotations

import math
import warnings

import numpy as np

from ..errors import ContractViolation


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Integer counts, rows = true class, columns = predicted class."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ContractViolation(f"confusion_matrix: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or p.min() < 0):
        raise ContractViolation("confusion_matrix: labels must be non-negative")
    c = n_classes if n_classes is not None else int(max(t.max(initial=-1), p.max(initial=-1))) + 1
    return np.bincount(t * c + p, minlength=c * c).reshape(c, c)


def balanced_accuracy(cm) -> float:
    """Mean per-class recall over the classes that have at least one true sample."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractViolation(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ContractViolation("confusion matrix has negative counts")
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ContractViolation("confusion matrix is empty")
    recall = np.diag(cm)[present] / support[present]
    return float(recall.mean())


def balanced_accuracy_score(y_true, y_pred, n_classes: int | None = None) -> float:
    return balanced_accuracy(confusion_matrix(y_true, y_pred, n_classes))


def mean_ci95(values) -> tuple[float, float]:
    """(mean, 1.96 * sample sd / sqrt(n)); a single value gets half-width 0."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ContractViolation("mean_ci95 needs at least one value")
    m = float(v.mean())
    if v.size == 1:
        warnings.warn("confidence interval of a single value reported as 0", stacklevel=2)
        return m, 0.0
    return m, float(1.96 * v.std(ddof=1) / math.sqrt(v.size))
