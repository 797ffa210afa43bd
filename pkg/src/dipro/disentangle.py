"""Region encoding and static/dynamic splitting of consecutive snapshot pairs."""

from __future__ import annotations

import numpy as np

from dipro import autodiff as ad
from dipro.autodiff import Tensor
from dipro.errors import ContractError, DimensionError
from dipro.nn import MLP, Module


class RegionEncoder(MLP):
    """Shared two-layer perceptron mapping a raw region vector to a feature F."""

    def __init__(self, d_in: int, d: int, rng, dropout: float = 0.0, dropout_rng=None):
        super().__init__(d_in, d, d, rng, dropout, dropout_rng)


def encode_region(encoder: RegionEncoder, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.shape[-1] != encoder.d_in:
        raise DimensionError(f"region input has length {x.shape[-1]}, encoder expects {encoder.d_in}")
    return encoder(x)


def concat_pair(first, second) -> Tensor:
    """Channel-wise concatenation ``[first || second]`` along the last axis."""
    first, second = ad.as_tensor(first), ad.as_tensor(second)
    if first.shape != second.shape:
        raise DimensionError(f"pair members have shapes {first.shape} and {second.shape}")
    return ad.concat([first, second], axis=-1)


def consecutive_pairs(features: Tensor) -> tuple[Tensor, Tensor]:
    """Split (..., T, R, d) features into earlier/later members of each pair."""
    if features.ndim < 3 or features.shape[-3] < 2:
        raise ContractError(f"need at least two snapshots, got features of shape {features.shape}")
    return features[..., :-1, :, :], features[..., 1:, :, :]


class Disentangler(Module):
    """Separate static and dynamic projection heads over a concatenated pair."""

    def __init__(self, d: int, rng, dropout: float = 0.0, dropout_rng=None):
        self.d = d
        self.f_s = MLP(2 * d, 2 * d, d, rng, dropout, dropout_rng)
        self.f_d = MLP(2 * d, 2 * d, d, rng, dropout, dropout_rng)

    def __call__(self, f_early, f_late) -> tuple[Tensor, Tensor]:
        pair = concat_pair(f_early, f_late)
        if pair.shape[-1] != 2 * self.d:
            raise DimensionError(f"features of width {pair.shape[-1] // 2} given to a width-{self.d} disentangler")
        return self.f_s(pair), self.f_d(pair)


def disentangle(module: Disentangler, f_early, f_late) -> tuple[Tensor, Tensor]:
    return module(f_early, f_late)


def loss_orth(static: Tensor, dynamic: Tensor) -> Tensor:
    """Mean squared cosine similarity between matching static/dynamic rows.

    Inputs are (..., d); every leading position is one (episode, interval,
    region) pair.  With equal pair counts per episode this equals the batch
    mean of per-episode means.
    """
    static, dynamic = ad.as_tensor(static), ad.as_tensor(dynamic)
    if static.ndim == 0 or static.size == 0:
        raise ContractError("loss_orth needs at least one pair")
    sim = ad.cosine_similarity(static, dynamic)
    return ad.mean(ad.square(sim))


def loss_temp(static: Tensor) -> Tensor:
    """Consecutive-interval static drift, normalised by (T-2)*R per episode.

    ``static`` is (..., T-1, R, d).  With fewer than two intervals (T = 2)
    the loss is exactly zero.
    """
    static = ad.as_tensor(static)
    if static.ndim < 3:
        raise DimensionError(f"loss_temp expects (..., T-1, R, d), got {static.shape}")
    n_int, R = static.shape[-3], static.shape[-2]
    if n_int < 2:
        return Tensor(0.0)
    diff = static[..., 1:, :, :] - static[..., :-1, :, :]
    episodes = int(np.prod(static.shape[:-3])) if static.ndim > 3 else 1
    return ad.tsum(ad.square(diff)) * (1.0 / (episodes * (n_int - 1) * R))
