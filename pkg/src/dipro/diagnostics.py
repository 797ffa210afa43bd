"""Post-training checks on the learned static/dynamic features.

These read the generator's hidden factors (``Episode.hidden_static`` and
``Episode.hidden_dynamic``), so they only work on synthetic cohorts whose
oracle sidecar is attached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dipro import autodiff as ad
from dipro.cohort import Episode
from dipro.errors import ContractError
from dipro.fusion import region_attention_mass
from dipro.labels import class_to_label
from dipro.model import DiPro, group_by_shape
from dipro.reversal import negate_label


@dataclass
class PairFeatures:
    """Flattened per-(episode, interval, region) features and targets."""

    S: np.ndarray  # (n, d)
    D: np.ndarray
    S_rev: np.ndarray | None
    D_rev: np.ndarray | None
    labels: np.ndarray  # (n, K)
    mask: np.ndarray  # (n, K)
    pred: np.ndarray | None  # (n, K) label predicted from D by the disease heads
    pred_rev: np.ndarray | None
    hidden_static: np.ndarray | None  # (n, d_s)
    hidden_dynamic: np.ndarray | None  # (n, K)


def collect_pair_features(model: DiPro, episodes: Sequence[Episode]) -> PairFeatures:
    if not model.config.uses_std:
        raise ContractError("this model has no static/dynamic split")
    parts: dict[str, list] = {k: [] for k in PairFeatures.__dataclass_fields__}
    model.eval()
    with ad.no_grad():
        for g in group_by_shape(episodes):
            out = model(g)
            d = out.S.shape[-1]
            parts["S"].append(out.S.data.reshape(-1, d))
            parts["D"].append(out.D.data.reshape(-1, d))
            K = g.progression_labels.shape[-1]
            parts["labels"].append(g.progression_labels.reshape(-1, K))
            parts["mask"].append(g.label_mask.reshape(-1, K))
            if out.D_rev is not None:
                parts["S_rev"].append(out.S_rev.data.reshape(-1, d))
                parts["D_rev"].append(out.D_rev.data.reshape(-1, d))
            if hasattr(model, "heads"):
                fwd = np.argmax(model.heads(out.D).data, axis=-1).reshape(-1, K)
                parts["pred"].append(class_to_label(fwd))
                if out.D_rev is not None:
                    rev = np.argmax(model.heads(out.D_rev).data, axis=-1).reshape(-1, K)
                    parts["pred_rev"].append(class_to_label(rev))
            T = g.T
            for ep in g.episodes:
                if ep.hidden_static is not None:
                    parts["hidden_static"].append(np.repeat(ep.hidden_static[None], T - 1, axis=0).reshape(-1, ep.hidden_static.shape[-1]))
                if ep.hidden_dynamic is not None:
                    parts["hidden_dynamic"].append(ep.hidden_dynamic.reshape(-1, ep.hidden_dynamic.shape[-1]))
    model.train()
    return PairFeatures(**{k: np.concatenate(v) if v else None for k, v in parts.items()})


def reversal_flip_rate(pf: PairFeatures) -> float:
    """Share of annotated nonzero-label slots whose reversed-pair prediction
    is the negation of a nonzero forward prediction."""
    if pf.pred is None or pf.pred_rev is None:
        raise ContractError("reversal flip rate needs the reversed-pair branch")
    sel = pf.mask & (pf.labels != 0)
    if not sel.any():
        raise ContractError("no nonzero labels to evaluate")
    fwd, rev = pf.pred[sel], pf.pred_rev[sel]
    return float(np.mean((fwd != 0) & (rev == negate_label(fwd))))


def static_reversal_ratio(pf: PairFeatures) -> float:
    """mean ||S - S_rev||^2 divided by mean ||S||^2."""
    if pf.S_rev is None:
        raise ContractError("static reversal ratio needs the reversed-pair branch")
    return float(np.mean(np.sum((pf.S - pf.S_rev) ** 2, axis=1)) / np.mean(np.sum(pf.S ** 2, axis=1)))


def mean_abs_cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-8) -> float:
    num = np.sum(a * b, axis=1)
    den = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), eps)
    return float(np.mean(np.abs(num / den)))


def fit_probe(X: np.ndarray, Y: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Ridge regression weights (with intercept) from features to targets."""
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = ridge * np.eye(Xa.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(Xa.T @ Xa + reg, Xa.T @ Y)


def probe_error(W: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    """Relative squared error: residual energy over target variance."""
    pred = np.hstack([X, np.ones((X.shape[0], 1))]) @ W
    return float(np.sum((pred - Y) ** 2) / np.sum((Y - Y.mean(axis=0)) ** 2))


def probe_comparison(train: PairFeatures, test: PairFeatures) -> dict[str, float]:
    """Test errors of linear probes S/D -> hidden static factor and drift."""
    if train.hidden_static is None or test.hidden_static is None:
        raise ContractError("probing needs the generator's hidden factors (attach the oracle sidecar)")
    out = {}
    for feat in ("S", "D"):
        for target, name in (("hidden_static", "static"), ("hidden_dynamic", "dynamic")):
            W = fit_probe(getattr(train, feat), getattr(train, target))
            out[f"{feat}->{name}"] = probe_error(W, getattr(test, feat), getattr(test, target))
    return out


def region_attention(model: DiPro, episodes: Sequence[Episode]) -> np.ndarray:
    """Average prediction-attention mass per region, normalised to sum to 1."""
    if not model.config.uses_mmf:
        raise ContractError("region attention export needs the fusion predictor")
    if not getattr(model, "trained", False):
        raise ContractError("region attention export needs a trained or loaded model")
    R = model.config.R
    total = np.zeros(R)
    n = 0
    model.eval()
    with ad.no_grad():
        for g in group_by_shape(episodes):
            out = model(g)
            mass = region_attention_mass(out.fusion.static_weights, R)
            total += mass.sum(axis=0)
            n += mass.shape[0]
    model.train()
    if n == 0:
        raise ContractError("no episodes to export attention for")
    mean = total / n
    return mean / mean.sum()
