"""Classification metrics and the region-to-disease label rule.

Everything here is a pure function of numpy arrays.  Conventions:

* argmax ties go to the lowest class index,
* precision/recall/F1 of a class with an empty denominator are 0,
* macro averages run over the classes present in the truth labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from dipro.errors import ContractError, UndefinedMetricError
from dipro.labels import argmax_lowest


@dataclass
class PredictionRecord:
    true_class: int
    scores: np.ndarray
    task: str = "progression"
    region: int | None = None
    disease: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if abs(self.scores.sum() - 1.0) > 1e-9:
            raise ContractError(f"scores must sum to 1, got {self.scores.sum()!r}")

    @property
    def predicted_class(self) -> int:
        return int(argmax_lowest(self.scores))


def _as_labels(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    if truth.size == 0:
        raise ContractError("metric needs at least one record")
    if truth.shape != pred.shape:
        raise ContractError(f"{truth.size} truth labels but {pred.size} predictions")
    return truth, pred


def accuracy(truth, pred) -> float:
    truth, pred = _as_labels(truth, pred)
    return float(np.mean(truth == pred))


def per_class_prf1(truth, pred, classes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    truth, pred = _as_labels(truth, pred)
    classes = np.asarray(classes)
    tp = np.array([np.sum((pred == c) & (truth == c)) for c in classes], dtype=np.float64)
    n_pred = np.array([np.sum(pred == c) for c in classes], dtype=np.float64)
    n_true = np.array([np.sum(truth == c) for c in classes], dtype=np.float64)
    precision = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    recall = np.divide(tp, n_true, out=np.zeros_like(tp), where=n_true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_prf1(truth, pred) -> tuple[float, float, float]:
    """Unweighted mean of per-class precision, recall and F1."""
    truth, pred = _as_labels(truth, pred)
    p, r, f = per_class_prf1(truth, pred, np.unique(truth))
    return float(p.mean()), float(r.mean()), float(f.mean())


def macro_f1(truth, pred) -> float:
    return macro_prf1(truth, pred)[2]


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("binary labels must be 0/1")
    return scores, labels.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney probability that a positive outscores a negative (ties 1/2).

    Multiclass input (``scores`` of shape (n, C) with integer labels) is
    scored one-vs-rest and macro-averaged over classes present in ``labels``
    that also have negatives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        labels = np.asarray(labels).reshape(-1)
        vals = [auroc(scores[:, c], labels == c) for c in np.unique(labels)]
        if len(vals) < 2:
            raise UndefinedMetricError("AUROC needs at least two classes in the labels")
        return float(np.mean(vals))
    scores, pos = _binary(scores, labels)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_n - R_{n-1}) * P_n.

    Tied scores enter together as one threshold.  Multiclass input is
    macro-averaged one-vs-rest like :func:`auroc`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        labels = np.asarray(labels).reshape(-1)
        return float(np.mean([auprc(scores[:, c], labels == c) for c in np.unique(labels)]))
    scores, pos = _binary(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC is undefined without positive labels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], pos[order]
    tp = np.cumsum(y)
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def cohens_kappa(truth, pred) -> float:
    """(p_o - p_e) / (1 - p_e); defined as 0 when chance agreement is 1."""
    truth, pred = _as_labels(truth, pred)
    classes = np.union1d(truth, pred)
    p_o = float(np.mean(truth == pred))
    p_e = float(sum(np.mean(truth == c) * np.mean(pred == c) for c in classes))
    if p_e >= 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


ABSENT = None


def disease_label_from_regions(region_labels, rule: str = "worsening") -> int | None:
    """Collapse per-region labels (``None``/NaN = absent) to one disease label.

    ``rule="worsening"``: any -1 gives -1, else any +1 gives +1, else 0.
    ``rule="majority"``: most frequent present label; ties resolve in the
    order -1, +1, 0.  Returns ``None`` when no region is annotated.
    """
    present = [int(v) for v in region_labels if v is not None and not (isinstance(v, float) and np.isnan(v))]
    if not present:
        return ABSENT
    if any(v not in (-1, 0, 1) for v in present):
        raise ContractError(f"region labels must lie in {{-1, 0, 1}}, got {present}")
    if rule == "worsening":
        if -1 in present:
            return -1
        return 1 if 1 in present else 0
    if rule == "majority":
        counts = {v: present.count(v) for v in (-1, 1, 0)}
        return max((-1, 1, 0), key=lambda v: (counts[v], -(-1, 1, 0).index(v)))
    raise ContractError(f"unknown aggregation rule {rule!r}")


def disease_labels(labels: np.ndarray, mask: np.ndarray, rule: str = "worsening") -> tuple[np.ndarray, np.ndarray]:
    """Aggregate (..., R, K) region labels to (..., K) disease labels and presence."""
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    lead = labels.shape[:-2]
    K = labels.shape[-1]
    flat_l = labels.reshape(-1, labels.shape[-2], K)
    flat_m = mask.reshape(flat_l.shape)
    out = np.zeros((flat_l.shape[0], K), dtype=np.int64)
    present = np.zeros((flat_l.shape[0], K), dtype=bool)
    for n in range(flat_l.shape[0]):
        for k in range(K):
            v = disease_label_from_regions(
                [int(x) if m else None for x, m in zip(flat_l[n, :, k], flat_m[n, :, k])], rule
            )
            if v is not None:
                out[n, k], present[n, k] = v, True
    return out.reshape(lead + (K,)), present.reshape(lead + (K,))


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
