from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def confusion_matrix(y_true, y_pred, labels: Sequence[int]) -> np.ndarray:
    index = {c: i for i, c in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[index[t], index[p]] += 1
    return cm


def accuracy(y_true, y_pred) -> float:
    y_true = list(y_true)
    if not y_true:
        return 0.0
    return sum(int(t == p) for t, p in zip(y_true, y_pred)) / len(y_true)


def macro_f1(y_true, y_pred, labels: Optional[Sequence[int]] = None) -> float:
    """Unweighted mean of per-class F1.

    By default the classes are those present in either ``y_true`` or
    ``y_pred``. A class with no true and no predicted samples scores 0.
    """
    y_true, y_pred = list(y_true), list(y_pred)
    if labels is None:
        labels = sorted(set(y_true) | set(y_pred))
    if not labels:
        return 0.0
    cm = confusion_matrix(y_true, y_pred, labels)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())
