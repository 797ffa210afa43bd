"""Experiment configuration, task presets and the TOML config format.

A config file has up to five sections; every key is optional and unknown
sections or keys are rejected::

    [experiment]  task, ablation, seeds, selection_metric, progression_level
    [model]       d, heads, dropout_rate, mask_normalize
    [loss]        pred, orth, temp, pae, static
    [train]       learning_rate, weight_decay, lr_min, batch_size,
                  accumulation_steps, max_epochs, patience, missing_ehr_rate
    [cohort]      any CohortConfig field

Loss weights left unset take the task preset.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dipro.cohort import CohortConfig
from dipro.errors import ContractError, ParseError
from dipro.labels import TASKS

ABLATIONS = ("full", "A1", "A2", "A3", "A4", "B1", "B2", "B3")
SELECTION_METRICS = ("macro_f1", "accuracy", "auprc")
DEFAULT_SELECTION = {"progression": "macro_f1", "los": "accuracy", "mortality": "auprc"}

# (pred, orth, temp, pae) selected per task; progression has no temporal term.
TASK_LOSS_WEIGHTS = {
    "mortality": (6.0, 0.1, 1.0, 0.1),
    "los": (10.0, 0.001, 0.1, 0.1),
    "progression": (2.0, 1.0, None, 2.0),
}

# Tuning grid used for the full-size experiments.
FULL_SEARCH_SPACE = {
    "learning_rate": (8e-6, 5e-6, 1e-5, 5e-5),
    "dropout_rate": (0.1, 0.2, 0.3),
    "d": (64, 128, 256),
    "lambda_temp": (0.01, 0.001, 0.1, 1.0),
    "lambda_pred": (2.0, 6.0, 10.0),
    "lambda_pae": (0.01, 0.1, 2.0),
    "lambda_orth": (0.001, 0.01, 0.1, 10.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "progression"
    ablation: str = "full"
    d: int = 32
    heads: int = 4
    dropout_rate: float = 0.1
    mask_normalize: bool = False
    lambda_pred: float | None = None
    lambda_orth: float | None = None
    lambda_temp: float | None = None
    lambda_pae: float | None = None
    lambda_static: float = 1.0
    learning_rate: float = 2e-3
    weight_decay: float = 1e-2
    lr_min: float = 0.0
    batch_size: int = 8
    accumulation_steps: int = 4
    max_epochs: int = 100
    patience: int = 10
    selection_metric: str | None = None
    seeds: tuple = (0, 1, 2)
    missing_ehr_rate: float = 0.0
    progression_level: str = "region"
    cohort: CohortConfig = field(default_factory=CohortConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.ablation not in ABLATIONS:
            raise ContractError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        preset = TASK_LOSS_WEIGHTS[self.task]
        for name, value in zip(("lambda_pred", "lambda_orth", "lambda_temp", "lambda_pae"), preset):
            if getattr(self, name) is None:
                object.__setattr__(self, name, 0.0 if value is None else float(value))
        for name in ("lambda_pred", "lambda_orth", "lambda_temp", "lambda_pae", "lambda_static"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.selection_metric is None:
            object.__setattr__(self, "selection_metric", DEFAULT_SELECTION[self.task])
        if self.selection_metric not in SELECTION_METRICS:
            raise ContractError(f"selection_metric must be one of {SELECTION_METRICS}")
        if self.d < 1 or self.d % self.heads:
            raise ContractError(f"d={self.d} must be positive and divisible by heads={self.heads}")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ContractError("need 1 <= patience <= max_epochs")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ContractError("batch_size and accumulation_steps must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")
        if not 0.0 <= self.missing_ehr_rate <= 1.0:
            raise ContractError("missing_ehr_rate must lie in [0, 1]")
        if self.learning_rate < 0 or self.lr_min < 0:
            raise ContractError("learning rates must be non-negative")
        if self.progression_level not in ("region", "disease"):
            raise ContractError("progression_level must be 'region' or 'disease'")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ContractError("at least one seed is required")

    # dimensions come from the cohort
    @property
    def d_in(self) -> int:
        return self.cohort.d_in

    @property
    def R(self) -> int:
        return self.cohort.R

    @property
    def K(self) -> int:
        return self.cohort.K

    @property
    def N(self) -> int:
        return self.cohort.N

    @property
    def P(self) -> int:
        return self.cohort.P

    @property
    def uses_std(self) -> bool:
        return self.ablation != "A4"

    @property
    def uses_pae(self) -> bool:
        return self.ablation not in ("A2", "A3", "A4")

    @property
    def uses_mmf(self) -> bool:
        return self.ablation not in ("A1", "A3", "A4")

    def loss_weights(self) -> dict[str, float]:
        """Loss weights after the ablation has zeroed removed terms."""
        w = {
            "pred": self.lambda_pred,
            "orth": self.lambda_orth,
            "temp": self.lambda_temp,
            "pae": self.lambda_pae,
        }
        if self.ablation == "B1" or not self.uses_std:
            w["orth"] = 0.0
        if self.ablation == "B3" or not self.uses_std:
            w["temp"] = 0.0
        if self.ablation == "B2" or not self.uses_pae:
            w["pae"] = 0.0
        return w

    def replace(self, **changes) -> "ExperimentConfig":
        cohort_changes = changes.pop("cohort", None)
        cfg = dataclasses.replace(self, **changes)
        if isinstance(cohort_changes, dict):
            cfg = dataclasses.replace(cfg, cohort=dataclasses.replace(cfg.cohort, **cohort_changes))
        elif cohort_changes is not None:
            cfg = dataclasses.replace(cfg, cohort=cohort_changes)
        return cfg

    @classmethod
    def for_task(cls, task: str, **overrides) -> "ExperimentConfig":
        return cls(task=task, **overrides)

    def to_dict(self) -> dict:
        out = {}
        for section, keys in _SECTIONS.items():
            out[section] = {k: _plain(getattr(self, attr)) for k, attr in keys.items()}
        out["cohort"] = {f.name: _plain(getattr(self.cohort, f.name))
                         for f in dataclasses.fields(CohortConfig)
                         if getattr(self.cohort, f.name) is not None}
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "experiment": {"task": "task", "ablation": "ablation", "seeds": "seeds",
                   "selection_metric": "selection_metric", "progression_level": "progression_level"},
    "model": {"d": "d", "heads": "heads", "dropout_rate": "dropout_rate", "mask_normalize": "mask_normalize"},
    "loss": {"pred": "lambda_pred", "orth": "lambda_orth", "temp": "lambda_temp",
             "pae": "lambda_pae", "static": "lambda_static"},
    "train": {"learning_rate": "learning_rate", "weight_decay": "weight_decay", "lr_min": "lr_min",
              "batch_size": "batch_size", "accumulation_steps": "accumulation_steps",
              "max_epochs": "max_epochs", "patience": "patience", "missing_ehr_rate": "missing_ehr_rate"},
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def from_dict(doc: dict) -> ExperimentConfig:
    unknown = sorted(set(doc) - set(_SECTIONS) - {"cohort"})
    if unknown:
        raise ContractError(f"unknown config section(s): {unknown}")
    kwargs = {}
    for section, keys in _SECTIONS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ContractError(f"[{section}] must be a table")
        bad = sorted(set(body) - set(keys))
        if bad:
            raise ContractError(f"unknown key(s) in [{section}]: {bad}")
        for k, v in body.items():
            kwargs[keys[k]] = tuple(v) if isinstance(v, list) else v
    cohort_doc = doc.get("cohort", {})
    names = {f.name for f in dataclasses.fields(CohortConfig)}
    bad = sorted(set(cohort_doc) - names)
    if bad:
        raise ContractError(f"unknown key(s) in [cohort]: {bad}")
    cohort = CohortConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cohort_doc.items()})
    try:
        return ExperimentConfig(cohort=cohort, **kwargs)
    except TypeError as exc:
        raise ContractError(str(exc)) from None


def load_config(path, task: str | None = None) -> ExperimentConfig:
    """Load a TOML config file or a built-in preset name (see :data:`PRESETS`).

    ``task`` overrides the file's task before loss-weight presets resolve.
    """
    if str(path) in PRESETS:
        return PRESETS[str(path)](task or "progression")
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ContractError(f"config file {path} not found (presets: {sorted(PRESETS)})") from None
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if task is not None:
        doc.setdefault("experiment", {})["task"] = task
    return from_dict(doc)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()))


def micro_config(task: str = "progression", seed: int = 0) -> ExperimentConfig:
    """Tiny model for finite-difference checks: d=8, R=3, K=2, T=3, M=6."""
    cohort = CohortConfig(
        n_patients=4, R=3, K=2, d_in=4, N=3, P=2, d_static=1, t_probs=(0.0, 1.0, 0.0, 0.0),
        ehr_hours=6, label_priors="uniform", seed=seed,
    )
    return ExperimentConfig(task=task, d=8, heads=2, dropout_rate=0.0, lambda_temp=0.5,
                            lambda_static=0.5, seeds=(seed,), cohort=cohort)


def desk_config(task: str = "progression") -> ExperimentConfig:
    cohort = CohortConfig(n_patients=300, ehr_hours=24, label_priors="uniform")
    return ExperimentConfig(task=task, d=16, max_epochs=30, patience=8, batch_size=8,
                            accumulation_steps=1, learning_rate=1e-2, cohort=cohort)


def smoke_config(task: str = "progression") -> ExperimentConfig:
    cohort = CohortConfig(n_patients=24, R=3, K=2, d_in=8, N=6, P=3, d_static=2, ehr_hours=8,
                          label_priors="uniform")
    return ExperimentConfig(task=task, d=8, heads=2, max_epochs=3, patience=2, batch_size=4,
                            accumulation_steps=2, seeds=(0,), cohort=cohort)


PRESETS = {
    "micro": micro_config,
    "desk": desk_config,
    "smoke": smoke_config,
}
