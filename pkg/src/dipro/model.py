"""The full network, its ablation variants, and episode batching.

Episodes in one :class:`Batch` share the snapshot count ``T`` and the EHR
length ``L`` so every tensor stacks without padding.  A training
micro-batch is a list of such groups whose losses are combined in
proportion to their sizes.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dipro import autodiff as ad
from dipro.autodiff import Tensor
from dipro.cohort import Episode
from dipro.config import ExperimentConfig
from dipro.disentangle import Disentangler, RegionEncoder, consecutive_pairs
from dipro.errors import ContractError, DimensionError
from dipro.fusion import (
    EHREncoder,
    FusionState,
    GlobalFusion,
    LocalEHRAttention,
    LocalFusion,
    Predictor,
    StaticFusion,
    TimeEmbedding,
    interval_masks,
    interval_time_features,
    local_ehr_attend,
)
from dipro.labels import TASK_CLASSES
from dipro.nn import MLP, EncoderLayer, Module
from dipro.reversal import ProgressionHeads


@dataclass
class Batch:
    episodes: list
    region_features: np.ndarray  # (B, T, R, d_in)
    snapshot_times: np.ndarray  # (B, T)
    ehr_series: np.ndarray  # (B, L, N)
    ehr_times: np.ndarray  # (B, L)
    demographics: np.ndarray  # (B, P)
    progression_labels: np.ndarray  # (B, T-1, R, K)
    label_mask: np.ndarray  # (B, T-1, R, K)
    mortality: np.ndarray  # (B,)
    los: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return len(self.episodes)

    @property
    def T(self) -> int:
        return self.snapshot_times.shape[1]

    def targets(self, task: str) -> np.ndarray:
        if task == "mortality":
            return self.mortality
        if task == "los":
            return self.los
        return self.progression_labels

    @classmethod
    def stack(cls, episodes: Sequence[Episode]) -> "Batch":
        eps = list(episodes)
        if not eps:
            raise ContractError("cannot build an empty batch")
        shapes = {(e.T, e.M) for e in eps}
        if len(shapes) != 1:
            raise DimensionError(f"batch mixes (T, M) shapes {sorted(shapes)}")
        return cls(
            episodes=eps,
            region_features=np.stack([e.region_features for e in eps]),
            snapshot_times=np.stack([e.snapshot_times for e in eps]),
            ehr_series=np.stack([e.ehr_series for e in eps]),
            ehr_times=np.stack([e.ehr_times for e in eps]),
            demographics=np.stack([e.demographics for e in eps]),
            progression_labels=np.stack([e.progression_labels for e in eps]),
            label_mask=np.stack([e.label_mask for e in eps]).astype(bool),
            mortality=np.array([e.mortality_label for e in eps], dtype=np.int64),
            los=np.array([e.los_class for e in eps], dtype=np.int64),
        )


def group_by_shape(episodes: Sequence[Episode]) -> list[Batch]:
    """Split episodes into same-(T, L) batches, keeping first-seen order."""
    groups: dict[tuple, list] = defaultdict(list)
    for ep in episodes:
        groups[(ep.T, len(ep.ehr_times))].append(ep)
    return [Batch.stack(g) for g in groups.values()]


def make_batches(
    episodes: Sequence[Episode], batch_size: int, rng: np.random.Generator | None = None
) -> list[list[Batch]]:
    """Micro-batches of ``batch_size`` episodes (shuffled when ``rng`` is given)."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(episodes)) if rng is None else rng.permutation(len(episodes))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [group_by_shape([episodes[j] for j in chunk]) for chunk in chunks]


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, C) or (B, T-1, R, K, 3) for progression
    S: Tensor | None = None  # (B, T-1, R, d)
    D: Tensor | None = None
    S_rev: Tensor | None = None
    D_rev: Tensor | None = None
    fusion: FusionState | None = None
    fallback_intervals: int = 0


class SimpleFusion(Module):
    """Concatenate all token rows and apply one multi-head self-attention block."""

    def __init__(self, d: int, heads: int, rng, dropout: float = 0.0, dropout_rng=None):
        self.layer = EncoderLayer(d, heads, 2 * d, rng, dropout, dropout_rng)

    def __call__(self, tokens: list) -> Tensor:
        return self.layer(ad.concat(tokens, axis=-2))


class DiPro(Module):
    """Region encoder, static/dynamic split, reversal, fusion and task head.

    The ablation in ``config`` decides which parts are built:

    * ``A1`` swaps the fusion stack for concatenation + self-attention,
    * ``A2`` drops the reversed-pair branch,
    * ``A3`` does both,
    * ``A4`` also replaces the static/dynamic split with one pair MLP.

    ``B1``-``B3`` keep the full network; they only zero loss weights.
    """

    def __init__(self, config: ExperimentConfig, seed: int = 0):
        self.config = config
        self.task = config.task
        self.trained = False
        d, heads = config.d, config.heads
        rng = np.random.default_rng([int(seed), 1])
        drop_rng = np.random.default_rng([int(seed), 2])
        p = config.dropout_rate
        self.encoder = RegionEncoder(config.d_in, d, rng, p, drop_rng)
        if config.uses_std:
            self.disentangler = Disentangler(d, rng, p, drop_rng)
        else:
            self.pair_mlp = MLP(2 * d, 2 * d, d, rng, p, drop_rng)
        self.ehr_encoder = EHREncoder(config.N, d, heads, rng, p, drop_rng)
        self.static_fusion = StaticFusion(config.P, d, rng, p, drop_rng)
        if config.uses_mmf:
            self.time_embedding = TimeEmbedding(d, rng, p, drop_rng)
            self.local_attention = LocalEHRAttention(d, rng)
            self.local_fusion = LocalFusion(d, rng)
            self.global_fusion = GlobalFusion(d, heads, rng, p, drop_rng)
            self.predictor = Predictor(d, self.task, rng, p, drop_rng)
        else:
            self.simple_fusion = SimpleFusion(d, heads, rng, p, drop_rng)
            if self.task != "progression":
                self.head = MLP(d, d, TASK_CLASSES[self.task], rng, p, drop_rng)
        if self.task == "progression" or config.uses_pae:
            self.heads = ProgressionHeads(config.K, d, rng, p, drop_rng)

    def _pair_features(self, F: Tensor) -> tuple[Tensor | None, Tensor, Tensor | None, Tensor | None]:
        early, late = consecutive_pairs(F)
        if not self.config.uses_std:
            return None, self.pair_mlp(ad.concat([early, late], axis=-1)), None, None
        S, D = self.disentangler(early, late)
        S_rev = D_rev = None
        if self.config.uses_pae:
            S_rev, D_rev = self.disentangler(late, early)
        return S, D, S_rev, D_rev

    def __call__(self, batch: Batch) -> ForwardOutput:
        cfg = self.config
        X = batch.region_features
        if X.shape[-1] != cfg.d_in or X.shape[-2] != cfg.R:
            raise DimensionError(f"region features {X.shape} do not match R={cfg.R}, d_in={cfg.d_in}")
        B, T = batch.size, batch.T
        I, R, d = T - 1, cfg.R, cfg.d
        F = self.encoder(X)
        S, D, S_rev, D_rev = self._pair_features(F)
        E_global = self.ehr_encoder(batch.ehr_series, batch.ehr_times)
        L = E_global.shape[1]
        dem_row = self.static_fusion.dem(batch.demographics).reshape(B, 1, d)
        if not cfg.uses_mmf:
            rows = [D.reshape(B, I * R, d)]
            if S is not None:
                rows.append(S.reshape(B, I * R, d))
            out = self.simple_fusion(rows + [E_global, dem_row])
            if self.task == "progression":
                logits = self.heads(out[:, : I * R, :]).reshape(B, I, R, cfg.K, 3)
            else:
                logits = self.head(ad.mean(out, axis=1))
            return ForwardOutput(logits, S, D, S_rev, D_rev)

        raw = interval_time_features(batch.ehr_times, batch.snapshot_times)
        T_emb = self.time_embedding(raw)
        masks, fallback = interval_masks(batch.ehr_times, batch.snapshot_times, cfg.mask_normalize)
        E_local, local_w = local_ehr_attend(self.local_attention, E_global, T_emb, masks)
        D_fuse, _ = self.local_fusion(D, E_local)
        D_global = D_fuse.reshape(B, I * R, d)
        H_global, _ = self.global_fusion(E_global, D_global)
        H_static = ad.concat([S.reshape(B, I * R, d), dem_row], axis=1)
        logits, static_w = self.predictor(D_global, H_global, H_static, self.task, getattr(self, "heads", None))
        if self.task == "progression":
            logits = logits.reshape(B, I, R, cfg.K, 3)
        state = FusionState(
            E_global=E_global, E_local=E_local, D_fuse=D_fuse, D_global=D_global, H_global=H_global,
            H_static=H_static, local_weights=local_w.data, static_weights=static_w.data,
            fallback_intervals=int(fallback.sum()),
        )
        return ForwardOutput(logits, S, D, S_rev, D_rev, state, int(fallback.sum()))


def build_model(config: ExperimentConfig, seed: int = 0) -> DiPro:
    return DiPro(config, seed)
