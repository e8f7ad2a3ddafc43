"""Classification metrics: balanced accuracy, confusion matrix, ITR."""

import math
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import balanced_accuracy_score, confusion_matrix

from silentwear.emgio import N_CLASSES
from silentwear.errors import DomainError, EmptyInput, MissingClass, ShapeMismatch

_CHANCE_TOL = 1e-12


def _as_labels(preds, labels):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ShapeMismatch(f"{preds.size} predictions for {labels.size} labels")
    return preds, labels


def balanced_accuracy(
    preds: Sequence[int], labels: Sequence[int], n_classes: int = N_CLASSES
) -> float:
    """Unweighted mean of per-class recall.

    Every class ``0..n_classes-1`` must occur in ``labels``.
    """
    preds, labels = _as_labels(preds, labels)
    if labels.size == 0:
        raise EmptyInput("balanced accuracy of an empty set")
    missing = sorted(set(range(n_classes)) - set(labels.tolist()))
    if missing:
        raise MissingClass(f"classes {missing} absent from labels")
    return float(balanced_accuracy_score(labels, preds))


def lenient_balanced_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Balanced accuracy over the classes present; 0.0 for an empty set."""
    preds, labels = _as_labels(preds, labels)
    if labels.size == 0:
        return 0.0
    return float(balanced_accuracy_score(labels, preds))


def confusion(
    preds: Sequence[int], labels: Sequence[int], n_classes: int = N_CLASSES
) -> np.ndarray:
    """``(n_classes, n_classes)`` counts, rows are true labels."""
    preds, labels = _as_labels(preds, labels)
    return confusion_matrix(labels, preds, labels=list(range(n_classes))).astype(np.int64)


def itr(n_classes: int, t_seconds: float, p: float) -> float:
    """Information transfer rate in bits per minute.

    ``60/T * (log2 C + P log2 P + (1-P) log2((1-P)/(C-1)))``, with the
    ``P = 1`` limit taken. Chance-level accuracy gives exactly 0.
    """
    if n_classes < 2:
        raise DomainError(f"need at least 2 classes, got {n_classes}")
    if not t_seconds > 0:
        raise DomainError(f"decision period must be positive, got {t_seconds}")
    chance = 1.0 / n_classes
    if p < chance - _CHANCE_TOL or p > 1.0 + _CHANCE_TOL or math.isnan(p):
        raise DomainError(f"accuracy {p} outside [1/{n_classes}, 1]")
    if abs(p - chance) <= _CHANCE_TOL:
        return 0.0
    p = min(p, 1.0)
    bits = math.log2(n_classes)
    if p > 0:
        bits += p * math.log2(p)
    if p < 1:
        bits += (1 - p) * math.log2((1 - p) / (n_classes - 1))
    return 60.0 / t_seconds * bits


def fold_itr(
    accuracy: float, window_ms: int, n_classes: int = N_CLASSES
) -> Optional[float]:
    """ITR for one fold; ``None`` when the accuracy is below chance."""
    if accuracy < 1.0 / n_classes - _CHANCE_TOL:
        return None
    return itr(n_classes, window_ms / 1000.0, accuracy)
