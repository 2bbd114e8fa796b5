"""Macro and weighted F1 over the three stress classes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError

N_CLASSES = 3


@dataclass
class F1Result:
    macro: float
    weighted: float
    per_class: np.ndarray
    confusion: np.ndarray  # rows = true class, columns = predicted class


def confusion_matrix(predictions, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ContractViolationError(f"predictions {pred.shape} and labels {true.shape} must be equal-length vectors")
    if pred.size == 0:
        raise ContractViolationError("F1 of an empty prediction set")
    for name, arr in (("predictions", pred), ("labels", true)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ContractViolationError(f"{name} outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def f1_scores(predictions, labels, n_classes: int = N_CLASSES) -> F1Result:
    """Per-class F1 is 0 when its precision and recall are both undefined or zero.

    Macro averages over all ``n_classes`` classes; weighted uses true-class support.
    """
    cm = confusion_matrix(predictions, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # predicted + actual = 2tp + fp + fn
    per_class = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    support = cm.sum(axis=1)
    macro = float(per_class.mean())
    weighted = float((per_class * support).sum() / support.sum())
    return F1Result(macro, weighted, per_class, cm)
