"""Progression-aware enhancement: reversed pairs, disease heads, negated labels."""

from __future__ import annotations

import numpy as np

from dipro import autodiff as ad
from dipro.autodiff import Tensor
from dipro.disentangle import Disentangler
from dipro.errors import LabelError
from dipro.labels import N_PROGRESSION_CLASSES, label_to_class
from dipro.nn import Module, glorot, zeros


def reverse_disentangle(module: Disentangler, f_early, f_late) -> tuple[Tensor, Tensor]:
    """Static/dynamic features of the pair fed in reverse order (same weights)."""
    return module(f_late, f_early)


def negate_label(y):
    """Reverse a progression direction: -1 <-> +1, 0 fixed."""
    arr = np.asarray(y)
    if not np.isin(arr, (-1, 0, 1)).all():
        raise LabelError(f"progression label {y!r} not in {{-1, 0, 1}}")
    out = -arr
    return int(out) if out.ndim == 0 else out


class ProgressionHeads(Module):
    """K independent classifiers (hidden width d, GELU, 3 logits) over d-vectors.

    Stored as stacked weights: head k owns column block k of ``w1``/``b1``
    and slice k of ``w2``/``b2``, so heads share no parameters.
    """

    def __init__(self, K: int, d: int, rng, dropout: float = 0.0, dropout_rng=None):
        self.K, self.d = K, d
        self.w1 = glorot(rng, d, d, shape=(d, K * d))
        self.b1 = zeros(K * d)
        self.w2 = glorot(rng, d, N_PROGRESSION_CLASSES, shape=(K, d, N_PROGRESSION_CLASSES))
        self.b2 = zeros(K, 1, N_PROGRESSION_CLASSES)
        self.dropout = dropout
        self.dropout_rng = dropout_rng

    def __call__(self, x) -> Tensor:
        """Logits for all heads: (..., d) -> (..., K, 3)."""
        x = ad.as_tensor(x)
        lead = x.shape[:-1]
        n = int(np.prod(lead)) if lead else 1
        h = ad.gelu(ad.matmul(x.reshape(n, self.d), self.w1) + self.b1)
        h = ad.dropout(h, self.dropout, self.dropout_rng, self.training)
        h = ad.transpose(h.reshape(n, self.K, self.d), (1, 0, 2))
        logits = ad.matmul(h, self.w2) + self.b2
        return ad.transpose(logits, (1, 0, 2)).reshape(lead + (self.K, N_PROGRESSION_CLASSES))


def progression_logits(heads: ProgressionHeads, D, k: int) -> Tensor:
    """Three logits (worsened, no change, improved) from head ``k``."""
    if not 0 <= int(k) < heads.K:
        raise LabelError(f"disease index {k} outside [0, {heads.K})")
    return heads(D)[..., int(k), :]


def _batched(arr, ndim: int) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[None] if arr.ndim == ndim else arr


def slot_weights(mask: np.ndarray) -> np.ndarray:
    """Per-slot weights averaging over present slots within each episode,
    then over episodes.  ``mask`` is (B, ...)."""
    mask = np.asarray(mask, dtype=bool)
    B = mask.shape[0]
    counts = mask.reshape(B, -1).sum(axis=1).astype(np.float64)
    per_episode = np.divide(1.0, counts, out=np.zeros(B), where=counts > 0)
    return mask * (per_episode / B).reshape((B,) + (1,) * (mask.ndim - 1))


def loss_pae(
    heads: ProgressionHeads,
    D: Tensor,
    D_rev: Tensor,
    S: Tensor,
    S_rev: Tensor,
    labels,
    mask=None,
    lambda_static: float = 1.0,
) -> Tensor:
    """Cross-entropy on both directions plus the static reversal penalty.

    Shapes: ``D``/``S`` (B, T-1, R, d) (batch axis optional), ``labels`` and
    ``mask`` (B, T-1, R, K).  Per episode the CE pair is averaged over
    present slots and the static penalty ``sum_r ||S - S_rev||^2`` over
    intervals; both are then averaged over episodes.
    """
    D, D_rev, S, S_rev = (ad.as_tensor(t) for t in (D, D_rev, S, S_rev))
    if D.ndim == 3:
        D, D_rev, S, S_rev = (t.reshape((1,) + t.shape) for t in (D, D_rev, S, S_rev))
    labels = _batched(labels, 3)
    mask = np.ones(labels.shape, dtype=bool) if mask is None else _batched(mask, 3).astype(bool)
    B, n_int = S.shape[0], S.shape[1]
    static_term = ad.tsum(ad.square(S - S_rev)) * (1.0 / (B * n_int))
    total = static_term * float(lambda_static)
    if mask.any():
        w = slot_weights(mask)
        safe = np.where(mask, labels, 0)
        ce = ad.cross_entropy(heads(D), label_to_class(safe), w)
        ce_rev = ad.cross_entropy(heads(D_rev), label_to_class(negate_label(safe)), w)
        total = ce + ce_rev + total
    return total
