"""Synthetic ICU episodes with known static and dynamic ground truth.

Each region of each patient carries a static latent (constant over time) and
a per-interval drift along one axis per disease.  The drift sign is the
progression label.  Region features are a fixed linear mix of the static
latent and the accumulated drift; hourly EHR rows mix the region-pooled
dynamic state (linearly interpolated between snapshots) with short acute
events that only the EHR sees.  Mixing matrices and outcome calibration are
drawn once per cohort from ``CohortConfig.seed``; everything else is drawn
from the per-episode seed.
"""

from __future__ import annotations

import dataclasses
import functools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dipro.errors import ContractError, ParseError
from dipro.labels import PROGRESSION_LABELS

# Snapshot counts per stay (T = 2, 3, 4, 5) in the general ICU cohort.
SNAPSHOT_COUNTS = (1975, 661, 82, 2)
T_PROBS = tuple(c / sum(SNAPSHOT_COUNTS) for c in SNAPSHOT_COUNTS)

# (worsened, no change, improved) frequencies for the seven thoracic findings:
# atelectasis, enlarged cardiac silhouette, consolidation, pulmonary edema,
# lung opacity, pleural effusion, pneumonia.
TABLE_LABEL_PRIORS = (
    (0.314, 0.533, 0.153),
    (0.078, 0.875, 0.046),
    (0.327, 0.531, 0.142),
    (0.333, 0.348, 0.319),
    (0.312, 0.496, 0.192),
    (0.289, 0.580, 0.131),
    (0.501, 0.372, 0.127),
)
LOS_PRIORS = (0.292, 0.236, 0.253, 0.220)
MORTALITY_PREVALENCE = 0.171

_CALIBRATION_DRAWS = 4000


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 200
    R: int = 6
    K: int = 7
    d_in: int = 16
    N: int = 38
    P: int = 7
    d_static: int = 4
    t_probs: tuple = T_PROBS
    ehr_hours: int = 48
    min_snapshot_gap: float = 0.5
    static_scale: float = 2.0
    region_spread: float = 1.5
    dynamic_scale: float = 1.0
    feature_noise: float = 0.05
    ehr_noise: float = 0.1
    label_priors: str = "table"
    annotation_rate: float = 1.0
    acute_rate: float = 2.0
    mortality_prevalence: float = MORTALITY_PREVALENCE
    mortality_dynamic_weight: float = 1.5
    mortality_static_weight: float = 0.0
    mortality_acute_weight: float = 1.0
    mortality_regions: tuple | None = None
    los_priors: tuple = LOS_PRIORS
    los_static_weight: float = 1.0
    los_dynamic_weight: float = 1.0
    los_acute_weight: float = 1.0
    los_noise: float = 0.3
    missing_ehr_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_patients", "R", "K", "d_in", "N", "P", "d_static", "ehr_hours"):
            if getattr(self, name) < 1:
                raise ContractError(f"cohort {name} must be >= 1")
        if len(self.t_probs) != 4 or abs(sum(self.t_probs) - 1.0) > 1e-9 or min(self.t_probs) < 0:
            raise ContractError("t_probs must be 4 probabilities for T = 2..5 summing to 1")
        # Published class shares are rounded, so accept sums within 1% and renormalise.
        if len(self.los_priors) != 4 or abs(sum(self.los_priors) - 1.0) > 1e-2 or min(self.los_priors) < 0:
            raise ContractError("los_priors must be 4 probabilities summing to 1")
        if not 0.0 <= self.missing_ehr_rate <= 1.0:
            raise ContractError("missing_ehr_rate must lie in [0, 1]")
        if not 0.0 < self.annotation_rate <= 1.0:
            raise ContractError("annotation_rate must lie in (0, 1]")
        if not 0.0 < self.mortality_prevalence < 1.0:
            raise ContractError("mortality_prevalence must lie in (0, 1)")
        if self.label_priors not in ("table", "uniform"):
            raise ContractError("label_priors must be 'table' or 'uniform'")
        if self.mortality_regions is not None:
            object.__setattr__(self, "mortality_regions", tuple(int(r) for r in self.mortality_regions))
            if not all(0 <= r < self.R for r in self.mortality_regions) or not self.mortality_regions:
                raise ContractError("mortality_regions must be non-empty region indices")
        object.__setattr__(self, "t_probs", tuple(float(p) for p in self.t_probs))
        priors = tuple(float(p) for p in self.los_priors)
        total = sum(priors)
        if abs(total - 1.0) > 1e-12:  # leave already-normalised priors untouched so round trips are exact
            priors = tuple(p / total for p in priors)
        object.__setattr__(self, "los_priors", priors)

    def noise_free(self) -> "CohortConfig":
        return dataclasses.replace(self, feature_noise=0.0, ehr_noise=0.0)

    def label_prior_matrix(self) -> np.ndarray:
        """(K, 3) probabilities of labels (-1, 0, +1) per disease."""
        if self.label_priors == "uniform":
            return np.full((self.K, 3), 1.0 / 3.0)
        rows = np.array([TABLE_LABEL_PRIORS[k % len(TABLE_LABEL_PRIORS)] for k in range(self.K)])
        return rows / rows.sum(axis=1, keepdims=True)


@dataclass
class Episode:
    patient_id: str
    snapshot_times: np.ndarray
    region_features: np.ndarray
    ehr_times: np.ndarray
    ehr_series: np.ndarray
    demographics: np.ndarray
    progression_labels: np.ndarray
    mortality_label: int
    los_class: int
    label_mask: np.ndarray | None = None
    hidden_static: np.ndarray | None = field(default=None, repr=False)
    hidden_dynamic: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.label_mask is None:
            self.label_mask = np.ones(self.progression_labels.shape, dtype=bool)

    @property
    def T(self) -> int:
        return len(self.snapshot_times)

    @property
    def M(self) -> int:
        return len(self.ehr_times) - 1

    @property
    def R(self) -> int:
        return self.region_features.shape[1]

    def validate(self) -> None:
        t = np.asarray(self.snapshot_times)
        if len(t) < 2 or np.any(np.diff(t) <= 0):
            raise ContractError(f"{self.patient_id}: need >= 2 strictly increasing snapshot times")
        if np.any(np.diff(self.ehr_times) <= 0):
            raise ContractError(f"{self.patient_id}: EHR timestamps must be strictly increasing")
        if self.region_features.shape[0] != len(t):
            raise ContractError(f"{self.patient_id}: region_features has {self.region_features.shape[0]} snapshots")
        if self.ehr_series.shape[0] != len(self.ehr_times):
            raise ContractError(f"{self.patient_id}: EHR rows and timestamps disagree")
        if self.progression_labels.shape[:2] != (len(t) - 1, self.R):
            raise ContractError(f"{self.patient_id}: progression_labels shape {self.progression_labels.shape}")
        if not np.isin(self.progression_labels, PROGRESSION_LABELS).all():
            raise ContractError(f"{self.patient_id}: progression labels outside {{-1,0,1}}")


@dataclass(frozen=True)
class _Mixing:
    static_templates: np.ndarray  # (R, d_s)
    A: np.ndarray  # (d_in, d_s)
    B: np.ndarray  # (d_in, K)
    C: np.ndarray  # (N, K)
    C_static: np.ndarray  # (N, d_s)
    c_acute: np.ndarray  # (N,)
    dem: np.ndarray  # (P, d_s)
    mort_w: np.ndarray  # (K,)
    los_static_w: np.ndarray  # (d_s,)
    los_dyn_w: np.ndarray  # (K,)
    mort_bias: float
    los_thresholds: np.ndarray  # (3,)


def _draw_latents(cfg: CohortConfig, mix_templates: np.ndarray, rng: np.random.Generator) -> dict:
    T = int(rng.choice(4, p=cfg.t_probs)) + 2
    M = cfg.ehr_hours
    while True:
        times = np.sort(rng.uniform(0.0, float(M), size=T))
        if np.all(np.diff(times) >= cfg.min_snapshot_gap):
            break
    static = mix_templates + rng.normal(size=(cfg.R, cfg.d_static))
    priors = cfg.label_prior_matrix()
    u = rng.random(size=(T - 1, cfg.R, cfg.K))
    cum = np.cumsum(priors, axis=1)
    labels = np.where(u < cum[:, 0], -1, np.where(u < cum[:, 1], 0, 1)).astype(np.int64)
    magnitude = rng.uniform(0.5, 1.5, size=labels.shape)
    drift = cfg.dynamic_scale * labels * magnitude
    n_events = rng.poisson(cfg.acute_rate * (M + 1) / 49.0)
    starts = rng.integers(0, M + 1, size=n_events)
    durations = rng.integers(1, 4, size=n_events)
    amplitudes = rng.uniform(1.0, 2.0, size=n_events)
    acute = np.zeros(M + 1)
    for s, dur, amp in zip(starts, durations, amplitudes):
        acute[s:s + dur] += amp
    return {
        "T": T,
        "times": times,
        "static": static,
        "labels": labels,
        "drift": drift,
        "acute": acute,
        "severity_noise": rng.normal(),
        "mortality_u": rng.random(),
    }


def _scores(cfg: CohortConfig, mix_w: dict, lat: dict) -> tuple[float, float]:
    """(mortality logit without bias, LOS severity) for one latent draw."""
    regions = list(cfg.mortality_regions) if cfg.mortality_regions is not None else slice(None)
    mean_drift = lat["drift"][:, regions].mean(axis=(0, 1))
    mean_static = lat["static"][regions].mean(axis=0)
    burden = lat["acute"].mean()
    mort = (
        cfg.mortality_dynamic_weight * float(mix_w["mort_w"] @ mean_drift)
        + cfg.mortality_static_weight * float(mean_static.sum())
        + cfg.mortality_acute_weight * burden
    )
    all_drift = lat["drift"].mean(axis=(0, 1))
    sev = (
        cfg.los_static_weight * float(mix_w["los_static_w"] @ (lat["static"].mean(axis=0)))
        + cfg.los_dynamic_weight * float(mix_w["los_dyn_w"] @ all_drift)
        + cfg.los_acute_weight * burden
        + cfg.los_noise * lat["severity_noise"]
    )
    return mort, sev


@functools.lru_cache(maxsize=32)
def _mixing(cfg: CohortConfig) -> _Mixing:
    rng = np.random.default_rng([cfg.seed, 7919])
    templates = cfg.region_spread * rng.normal(size=(cfg.R, cfg.d_static))
    A = rng.normal(size=(cfg.d_in, cfg.d_static)) / np.sqrt(cfg.d_static)
    B = rng.normal(size=(cfg.d_in, cfg.K)) / np.sqrt(cfg.K)
    C = rng.normal(size=(cfg.N, cfg.K)) / np.sqrt(cfg.K)
    C_static = 0.3 * rng.normal(size=(cfg.N, cfg.d_static)) / np.sqrt(cfg.d_static)
    c_acute = rng.normal(size=cfg.N)
    dem = rng.normal(size=(cfg.P, cfg.d_static)) / np.sqrt(cfg.d_static)
    # Worsening (negative drift) raises risk.
    mort_w = -rng.uniform(0.5, 1.5, size=cfg.K)
    los_static_w = rng.normal(size=cfg.d_static) / np.sqrt(cfg.d_static)
    los_dyn_w = -rng.uniform(0.5, 1.5, size=cfg.K)
    weights = {"mort_w": mort_w, "los_static_w": los_static_w, "los_dyn_w": los_dyn_w}

    cal_rng = np.random.default_rng([cfg.seed, 104729])
    draws = [_scores(cfg, weights, _draw_latents(cfg, templates, cal_rng)) for _ in range(_CALIBRATION_DRAWS)]
    mort = np.array([m for m, _ in draws])
    sev = np.array([s for _, s in draws])
    lo, hi = -50.0, 50.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(mort + mid)))) < cfg.mortality_prevalence:
            lo = mid
        else:
            hi = mid
    thresholds = np.quantile(sev, np.cumsum(cfg.los_priors)[:3])
    return _Mixing(
        static_templates=templates, A=A, B=B, C=C, C_static=C_static, c_acute=c_acute, dem=dem,
        mort_w=mort_w, los_static_w=los_static_w, los_dyn_w=los_dyn_w,
        mort_bias=0.5 * (lo + hi), los_thresholds=thresholds,
    )


def generate_episode(config: CohortConfig, seed: int) -> Episode:
    """Draw one episode; pure in (config, seed)."""
    mix = _mixing(config)
    rng = np.random.default_rng([config.seed, int(seed)])
    lat = _draw_latents(config, mix.static_templates, rng)
    T, R, K = lat["T"], config.R, config.K
    drift = lat["drift"]
    state = np.concatenate([np.zeros((1, R, K)), np.cumsum(drift, axis=0)], axis=0)  # (T, R, K)
    static_part = config.static_scale * lat["static"] @ mix.A.T  # (R, d_in)
    features = static_part[None] + state @ mix.B.T
    features = features + config.feature_noise * rng.normal(size=features.shape)

    ehr_times = np.arange(config.ehr_hours + 1, dtype=np.float64)
    pooled = state.mean(axis=1)  # (T, K)
    interp = np.stack([np.interp(ehr_times, lat["times"], pooled[:, k]) for k in range(K)], axis=1)
    ehr = interp @ mix.C.T + lat["static"].mean(axis=0) @ mix.C_static.T + np.outer(lat["acute"], mix.c_acute)
    ehr = ehr + config.ehr_noise * rng.normal(size=ehr.shape)

    dem = lat["static"].mean(axis=0) @ mix.dem.T + 0.5 * rng.normal(size=config.P)
    weights = {"mort_w": mix.mort_w, "los_static_w": mix.los_static_w, "los_dyn_w": mix.los_dyn_w}
    mort_score, severity = _scores(config, weights, lat)
    p_death = 1.0 / (1.0 + np.exp(-(mort_score + mix.mort_bias)))
    mortality = int(lat["mortality_u"] < p_death)
    los_class = int(np.searchsorted(mix.los_thresholds, severity, side="right"))

    mask = np.ones(lat["labels"].shape, dtype=bool)
    if config.annotation_rate < 1.0:
        mask = rng.random(size=mask.shape) < config.annotation_rate

    ep = Episode(
        patient_id=f"syn{config.seed:04d}-{int(seed):06d}",
        snapshot_times=lat["times"],
        region_features=features,
        ehr_times=ehr_times,
        ehr_series=ehr,
        demographics=dem,
        progression_labels=lat["labels"],
        mortality_label=mortality,
        los_class=los_class,
        label_mask=mask,
        hidden_static=lat["static"],
        hidden_dynamic=drift,
    )
    if config.missing_ehr_rate > 0:
        ep = inject_missing_ehr(ep, config.missing_ehr_rate, seed=int(seed))
    return ep


def generate_cohort(config: CohortConfig) -> list[Episode]:
    return [generate_episode(config, i) for i in range(config.n_patients)]


def inject_missing_ehr(episode: Episode, rate: float, seed: int) -> Episode:
    """Drop each EHR row with probability ``rate``; first and last rows stay."""
    n = len(episode.ehr_times)
    if n < 2:
        raise ContractError(f"{episode.patient_id}: need at least 2 EHR rows to inject missingness")
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"missing rate {rate} outside [0, 1]")
    if rate == 0.0:
        return episode
    rng = np.random.default_rng([int(seed), 15485863])
    keep = rng.random(n) >= rate
    keep[0] = keep[-1] = True
    return dataclasses.replace(
        episode,
        ehr_times=episode.ehr_times[keep].copy(),
        ehr_series=episode.ehr_series[keep].copy(),
    )


def split_cohort(
    episodes: Sequence[Episode], seed: int, fractions: tuple = (0.7, 0.1, 0.2)
) -> tuple[list[Episode], list[Episode], list[Episode]]:
    """Patient-level train/validation/test split."""
    order = np.random.default_rng([int(seed), 2718]).permutation(len(episodes))
    n_train = int(round(fractions[0] * len(episodes)))
    n_val = int(round(fractions[1] * len(episodes)))
    pick = lambda idx: [episodes[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


# --- serialization ---------------------------------------------------------
_VISIBLE = (
    "patient_id", "snapshot_times", "region_features", "ehr_times", "ehr_series", "demographics",
    "progression_labels", "label_mask", "mortality_label", "los_class",
)
_ARRAY_DTYPES = {
    "snapshot_times": np.float64, "region_features": np.float64, "ehr_times": np.float64,
    "ehr_series": np.float64, "demographics": np.float64, "progression_labels": np.int64,
    "label_mask": bool,
}


def oracle_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".oracle" + (path.suffix or ".jsonl"))


def _encode(value):
    return value.tolist() if isinstance(value, np.ndarray) else value


def write_cohort(episodes: Iterable[Episode], path) -> Path:
    """Write model-visible fields to ``path``; hidden factors go to the sidecar."""
    path = Path(path)
    side = oracle_path(path)
    with path.open("w") as fh, side.open("w") as fo:
        for ep in episodes:
            fh.write(json.dumps({k: _encode(getattr(ep, k)) for k in _VISIBLE}) + "\n")
            if ep.hidden_static is not None:
                fo.write(json.dumps({
                    "patient_id": ep.patient_id,
                    "hidden_static": _encode(ep.hidden_static),
                    "hidden_dynamic": _encode(ep.hidden_dynamic),
                }) + "\n")
    return side


def _iter_records(path: Path):
    offset = 0
    with path.open("rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            start = offset
            offset += len(raw)
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise ParseError(f"{path}: line {lineno} (byte offset {start}): malformed record: {exc}") from None
            if not isinstance(rec, dict):
                raise ParseError(f"{path}: line {lineno} (byte offset {start}): expected an object")
            yield lineno, start, rec


def read_cohort(path) -> list[Episode]:
    path = Path(path)
    out = []
    for lineno, start, rec in _iter_records(path):
        missing = [k for k in _VISIBLE if k not in rec]
        if missing:
            raise ParseError(f"{path}: line {lineno} (byte offset {start}): missing fields {missing}")
        try:
            kwargs = {k: (np.asarray(rec[k], dtype=_ARRAY_DTYPES[k]) if k in _ARRAY_DTYPES else rec[k])
                      for k in _VISIBLE}
            if kwargs["region_features"].ndim != 3 or kwargs["ehr_series"].ndim != 2:
                raise ValueError("array rank mismatch")
            ep = Episode(**kwargs)
            ep.validate()
        except (ValueError, TypeError) as exc:
            raise ParseError(f"{path}: line {lineno} (byte offset {start}): {exc}") from None
        out.append(ep)
    return out


def read_oracle(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    path = Path(path)
    side = path if path.name.endswith(".oracle" + (path.suffix or ".jsonl")) else oracle_path(path)
    return {
        rec["patient_id"]: (np.asarray(rec["hidden_static"]), np.asarray(rec["hidden_dynamic"]))
        for _, _, rec in _iter_records(side)
    }


def attach_oracle(episodes: Iterable[Episode], oracle: dict) -> list[Episode]:
    out = []
    for ep in episodes:
        s, d = oracle[ep.patient_id]
        out.append(dataclasses.replace(ep, hidden_static=s, hidden_dynamic=d))
    return out
