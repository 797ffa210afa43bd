"""Multiscale fusion of region features with irregular EHR series.

Tensor layout used throughout (batch axis B first):

* EHR rows ``(B, L, .)`` with ``L = M + 1`` hourly timestamps,
* intervals ``(B, I, .)`` with ``I = T - 1`` consecutive snapshot pairs,
* dynamic/static rows flattened interval-major to ``(B, I*R, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dipro import autodiff as ad
from dipro.autodiff import Tensor
from dipro.errors import ContractError, DimensionError
from dipro.labels import TASK_CLASSES
from dipro.nn import MLP, CrossAttention, EncoderLayer, LayerNorm, Linear, Module, attention
from dipro.reversal import ProgressionHeads


@dataclass
class FusionState:
    E_global: Tensor  # (B, L, d)
    E_local: Tensor  # (B, I, L, d)
    D_fuse: Tensor  # (B, I, R, d)
    D_global: Tensor  # (B, I*R, d)
    H_global: Tensor  # (B, L, d)
    H_static: Tensor  # (B, I*R + 1, d)
    local_weights: np.ndarray | None = None  # (B, I, L, L)
    static_weights: np.ndarray | None = None  # (B, I*R + L, I*R + 1)
    fallback_intervals: int = 0


# --- global EHR encoder ----------------------------------------------------
def sinusoidal_encoding(times, d: int) -> np.ndarray:
    """Absolute-hour sin/cos signal: (..., L) -> (..., L, d)."""
    times = np.asarray(times, dtype=np.float64)[..., None]
    i = np.arange(d)
    freq = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = times * freq
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def _check_increasing(times: np.ndarray, what: str) -> None:
    if np.any(np.diff(times, axis=-1) <= 0):
        raise ContractError(f"{what} must be strictly increasing")


class EHREncoder(Module):
    """Per-step linear embedding + positional signal + one encoder layer."""

    def __init__(self, N: int, d: int, heads: int, rng, dropout: float = 0.0, dropout_rng=None):
        self.N, self.d = N, d
        self.embed = Linear(N, d, rng)
        self.layer = EncoderLayer(d, heads, 2 * d, rng, dropout, dropout_rng)

    def __call__(self, series, times) -> Tensor:
        series = ad.as_tensor(series)
        times = np.asarray(times, dtype=np.float64)
        if series.shape[-1] != self.N:
            raise DimensionError(f"EHR series has {series.shape[-1]} variables, encoder expects {self.N}")
        if series.shape[-2] < 2:
            raise ContractError("EHR series needs at least two timestamps (M >= 1)")
        if times.shape != series.shape[:-1]:
            raise DimensionError(f"timestamps {times.shape} do not match series {series.shape}")
        _check_increasing(times, "EHR timestamps")
        x = self.embed(series) + sinusoidal_encoding(times, self.d)
        return self.layer(x)


def encode_ehr_global(encoder: EHREncoder, series, timestamps) -> Tensor:
    return encoder(series, timestamps)


# --- interval-relative time embeddings and masks ---------------------------
def time_features(t_j, t_i: float, t_next: float) -> np.ndarray:
    """Raw triple [t_j - t_i, t_next - t_j, sigmoid((t_j - t_i)(t_next - t_j))]."""
    if not t_i < t_next:
        raise ContractError(f"interval start {t_i} must precede end {t_next}")
    t_j = np.asarray(t_j, dtype=np.float64)
    a, b = t_j - t_i, t_next - t_j
    return np.stack([a, b, ad._sigmoid(np.atleast_1d(a * b)).reshape(a.shape)], axis=-1)


def interval_time_features(ehr_times, snapshot_times) -> np.ndarray:
    """(B, L), (B, T) -> raw triples (B, T-1, L, 3) for every interval."""
    ehr_times = np.asarray(ehr_times, dtype=np.float64)
    snaps = np.asarray(snapshot_times, dtype=np.float64)
    _check_increasing(snaps, "snapshot times")
    t_i = snaps[:, :-1, None]
    t_n = snaps[:, 1:, None]
    t_j = ehr_times[:, None, :]
    a, b = t_j - t_i, t_n - t_j
    return np.stack([a, b, ad._sigmoid(a * b)], axis=-1)


class TimeEmbedding(MLP):
    """f_TE: raw 3-feature interval position -> d."""

    def __init__(self, d: int, rng, dropout: float = 0.0, dropout_rng=None):
        super().__init__(3, d, d, rng, dropout, dropout_rng)


def time_embed(f_te: TimeEmbedding, t_j, t_i: float, t_next: float) -> Tensor:
    return f_te(time_features(t_j, t_i, t_next))


def build_attn_mask(timestamps, t_i: float, t_next: float, normalize: bool = False) -> np.ndarray:
    """Additive center-focused bias over EHR timestamps for one interval.

    Inside the closed interval the bias is ``-|t_j - midpoint|`` (divided by
    the half-width when ``normalize``); outside it is ``-inf``.  If no
    timestamp falls inside, the one nearest the midpoint (earliest on ties)
    is unmasked with bias 0.
    """
    mask, _ = _mask_with_fallback(timestamps, t_i, t_next, normalize)
    return mask


def _mask_with_fallback(timestamps, t_i, t_next, normalize) -> tuple[np.ndarray, bool]:
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        raise ContractError("cannot build an attention mask over zero timestamps")
    if not t_i < t_next:
        raise ContractError(f"interval start {t_i} must precede end {t_next}")
    center = 0.5 * (t_i + t_next)
    inside = (ts >= t_i) & (ts <= t_next)
    dist = np.abs(ts - center)
    if normalize:
        dist = dist / (0.5 * (t_next - t_i))
    mask = np.where(inside, -dist, -np.inf)
    if inside.any():
        return mask, False
    mask[int(np.argmin(np.abs(ts - center)))] = 0.0
    return mask, True


def interval_masks(ehr_times, snapshot_times, normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Masks (B, T-1, L) for every interval, plus a (B, T-1) fallback flag."""
    ehr_times = np.asarray(ehr_times, dtype=np.float64)
    snaps = np.asarray(snapshot_times, dtype=np.float64)
    B, T = snaps.shape
    masks = np.empty((B, T - 1, ehr_times.shape[-1]))
    used = np.zeros((B, T - 1), dtype=bool)
    for b in range(B):
        for i in range(T - 1):
            masks[b, i], used[b, i] = _mask_with_fallback(ehr_times[b], snaps[b, i], snaps[b, i + 1], normalize)
    return masks, used


def _lift(x, ndim: int):
    """Add a leading batch axis (and interval axis) to unbatched inputs."""
    x = ad.as_tensor(x)
    while x.ndim < ndim:
        x = x.reshape((1,) + x.shape)
    return x


# --- local fusion -----------------------------------------------------------
class LocalEHRAttention(CrossAttention):
    """Time-embedding queries over global EHR keys/values (W_Q, W_K, W_V)."""


def local_ehr_attend(attn: LocalEHRAttention, E_global, T_i, mask) -> tuple[Tensor, Tensor]:
    """Interval-focused EHR summary, one row per EHR timestamp.

    ``E_global`` (B, L, d), ``T_i`` (B, I, L, d), ``mask`` (B, I, L); the
    unbatched forms (L, d), (L, d), (L,) are also accepted.  Returns
    ``(E_local, weights)`` with weights (B, I, L, L).
    """
    single = ad.as_tensor(T_i).ndim == 2
    E_global = _lift(E_global, 3)
    T_i = _lift(T_i, 4)
    mask = np.asarray(mask, dtype=np.float64)
    while mask.ndim < 3:
        mask = mask[None]
    B, I, L, d = T_i.shape
    if E_global.shape[0] != B or E_global.shape[1] != L or mask.shape != (B, I, L):
        raise DimensionError(
            f"local attention shapes disagree: E_global {E_global.shape}, T_i {T_i.shape}, mask {mask.shape}"
        )
    q = ad.matmul(T_i, attn.w_q).reshape(B, I * L, d)
    k = ad.matmul(E_global, attn.w_k)
    v = ad.matmul(E_global, attn.w_v)
    logits = (ad.matmul(q, ad.swap_last(k)) * (1.0 / np.sqrt(d))).reshape(B, I, L, L)
    weights = ad.softmax_lastdim(logits + mask[:, :, None, :])
    if weights.flags is not None:
        raise ContractError("an interval has no unmasked EHR timestamp; build masks with the fallback")
    E_local = ad.matmul(weights.reshape(B, I * L, L), v).reshape(B, I, L, d)
    if single:
        return E_local.reshape(L, d), weights.reshape(L, L)
    return E_local, weights


class LocalFusion(Module):
    """Dynamic CXR rows attend over [P_E E_local ; P_D D_local]."""

    def __init__(self, d: int, rng):
        self.p_e = Linear(d, d, rng, bias=False)
        self.p_d = Linear(d, d, rng, bias=False)
        self.attn = CrossAttention(d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, D_local, E_local) -> tuple[Tensor, Tensor]:
        single = ad.as_tensor(D_local).ndim == 2
        D_local = _lift(D_local, 4)
        E_local = _lift(E_local, 4)
        if D_local.shape[:2] != E_local.shape[:2] or D_local.shape[-1] != E_local.shape[-1]:
            raise DimensionError(f"local fusion: D_local {D_local.shape} vs E_local {E_local.shape}")
        kv = ad.concat([self.p_e(E_local), self.p_d(D_local)], axis=-2)
        out, w = self.attn(D_local, kv)
        fused = self.norm(out + D_local)
        if single:
            return fused.reshape(fused.shape[-2:]), w.reshape(w.shape[-2:])
        return fused, w


def local_fuse(module: LocalFusion, D_local, E_local) -> Tensor:
    return module(D_local, E_local)[0]


# --- global and static fusion ------------------------------------------------
class GlobalFusion(Module):
    """Global EHR rows attend over all fused dynamic rows, then self-attention."""

    def __init__(self, d: int, heads: int, rng, dropout: float = 0.0, dropout_rng=None):
        self.attn = CrossAttention(d, rng)
        self.norm = LayerNorm(d)
        self.refine = EncoderLayer(d, heads, 2 * d, rng, dropout, dropout_rng)

    def __call__(self, E_global, D_global) -> tuple[Tensor, Tensor]:
        E_global, D_global = ad.as_tensor(E_global), ad.as_tensor(D_global)
        if D_global.ndim < 2 or D_global.shape[-2] == 0:
            raise ContractError("global fusion needs at least one dynamic row (T >= 2)")
        out, w = self.attn(E_global, D_global)
        return self.refine(self.norm(out + E_global)), w


def global_fuse(module: GlobalFusion, E_global, D_global) -> Tensor:
    return module(E_global, D_global)[0]


class StaticFusion(Module):
    """Appends an embedded demographics row to the static CXR rows."""

    def __init__(self, P: int, d: int, rng, dropout: float = 0.0, dropout_rng=None):
        self.P = P
        self.dem = MLP(P, d, d, rng, dropout, dropout_rng)

    def __call__(self, S_rows, demographics) -> Tensor:
        S_rows = ad.as_tensor(S_rows)
        dem = ad.as_tensor(demographics)
        if dem.shape[-1] != self.P:
            raise DimensionError(f"demographics have {dem.shape[-1]} attributes, expected {self.P}")
        row = self.dem(dem)
        row = row.reshape(row.shape[:-1] + (1, row.shape[-1]))
        return ad.concat([S_rows, row], axis=-2)


def static_fuse(module: StaticFusion, S_list, demographics) -> Tensor:
    return module(S_list, demographics)


class Predictor(Module):
    """Cross-attention of dynamic/global rows over static rows, then a task head."""

    def __init__(self, d: int, task: str, rng, dropout: float = 0.0, dropout_rng=None):
        if task not in TASK_CLASSES:
            raise ContractError(f"unknown task {task!r}")
        self.task = task
        self.attn = CrossAttention(d, rng)
        self.norm = LayerNorm(d)
        self.head = None if task == "progression" else MLP(d, d, TASK_CLASSES[task], rng, dropout, dropout_rng)

    def __call__(self, D_global, H_global, H_static, task: str, heads: ProgressionHeads | None = None):
        """Return ``(logits, attention_over_static_rows)``.

        Progression logits are (B, I*R, K, 3), taken from the fused rows that
        correspond to ``D_global``; other tasks pool all rows to (B, C).
        """
        if task != self.task:
            raise ContractError(f"unknown task {task!r} for a {self.task} predictor")
        D_global, H_global = ad.as_tensor(D_global), ad.as_tensor(H_global)
        query = ad.concat([D_global, H_global], axis=-2)
        out, w = self.attn(query, H_static)
        out = self.norm(out + query)
        if task == "progression":
            if heads is None:
                raise ContractError("progression prediction needs the disease heads")
            n_dyn = D_global.shape[-2]
            return heads(out[..., :n_dyn, :]), w
        return self.head(ad.mean(out, axis=-2)), w


def predict(module: Predictor, D_global, H_global, H_static, task: str, heads=None) -> Tensor:
    return module(D_global, H_global, H_static, task, heads)[0]


def region_attention_mass(static_weights: np.ndarray, R: int) -> np.ndarray:
    """Mean attention landing on each region's static rows, per episode.

    ``static_weights`` is (B, Lq, I*R + 1) with rows ordered interval-major;
    the last key row (demographics) is excluded.  Returns (B, R).
    """
    w = np.asarray(static_weights).mean(axis=-2)[..., :-1]
    B = w.shape[0]
    return w.reshape(B, -1, R).sum(axis=1)
