"""Progression label conventions shared by the generator, heads and metrics.

Labels live in {-1, 0, +1} = worsened / no change / improved.  Classifier
outputs use the fixed class order (-1, 0, +1) -> (0, 1, 2).  Argmax ties
resolve to the lowest class index.
"""

from __future__ import annotations

import numpy as np

from dipro.errors import LabelError

WORSENED, NO_CHANGE, IMPROVED = -1, 0, 1
PROGRESSION_LABELS = (WORSENED, NO_CHANGE, IMPROVED)
CLASS_NAMES = ("worsened", "no_change", "improved")
N_PROGRESSION_CLASSES = 3

TASKS = ("progression", "mortality", "los")
TASK_CLASSES = {"progression": 3, "mortality": 2, "los": 4}
LOS_BINS_DAYS = ("[2,3)", "[3,4)", "[4,6)", ">=6")


def _check(y) -> np.ndarray:
    arr = np.asarray(y)
    if arr.size and not np.isin(arr, PROGRESSION_LABELS).all():
        raise LabelError(f"progression labels must lie in {{-1, 0, 1}}, got {np.unique(arr)}")
    return arr


def label_to_class(y):
    """Map a label (or array of labels) in {-1,0,1} to class index 0/1/2."""
    arr = _check(y)
    out = arr.astype(np.int64) + 1
    return int(out) if out.ndim == 0 else out


def class_to_label(c):
    arr = np.asarray(c)
    if arr.size and not np.isin(arr, (0, 1, 2)).all():
        raise LabelError(f"class indices must lie in {{0, 1, 2}}, got {np.unique(arr)}")
    out = arr.astype(np.int64) - 1
    return int(out) if out.ndim == 0 else out


def argmax_lowest(scores) -> np.ndarray:
    """Argmax over the last axis with lowest-index tie-break (numpy's rule)."""
    return np.argmax(np.asarray(scores), axis=-1)
