"""Composite-loss optimisation, evaluation, ablations, sweeps and robustness runs."""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dipro import autodiff as ad
from dipro import metrics as M
from dipro.autodiff import Tensor
from dipro.cohort import Episode, inject_missing_ehr, split_cohort
from dipro.config import ABLATIONS, ExperimentConfig
from dipro.disentangle import loss_orth, loss_temp
from dipro.errors import ContractError, NumericError, UndefinedMetricError
from dipro.labels import label_to_class
from dipro.model import Batch, DiPro, ForwardOutput, group_by_shape, make_batches
from dipro.reversal import loss_pae, slot_weights

LOSS_TERMS = ("pred", "orth", "temp", "pae")


# --- loss ---------------------------------------------------------------------
def prediction_loss(out: ForwardOutput, batch: Batch, task: str) -> Tensor:
    if task == "progression":
        w = slot_weights(batch.label_mask)
        safe = np.where(batch.label_mask, batch.progression_labels, 0)
        return ad.cross_entropy(out.logits, label_to_class(safe), w)
    return ad.cross_entropy(out.logits, batch.targets(task))


def loss_terms(model: DiPro, out: ForwardOutput, batch: Batch) -> dict[str, Tensor]:
    """Unweighted loss terms available for this model's architecture."""
    cfg = model.config
    terms = {"pred": prediction_loss(out, batch, cfg.task)}
    if out.S is not None:
        terms["orth"] = loss_orth(out.S, out.D)
        terms["temp"] = loss_temp(out.S)
    if out.D_rev is not None:
        terms["pae"] = loss_pae(
            model.heads, out.D, out.D_rev, out.S, out.S_rev,
            batch.progression_labels, batch.label_mask, cfg.lambda_static,
        )
    return terms


def total_loss(model: DiPro, out: ForwardOutput, batch: Batch) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the prediction, orthogonality, temporal and reversal terms.

    Terms whose weight is zero (by choice or by ablation) are left out of
    the graph; their values are still reported.  A NaN in any term raises
    :class:`NumericError` naming it.
    """
    weights = model.config.loss_weights()
    terms = loss_terms(model, out, batch)
    values = {}
    total = None
    for name in LOSS_TERMS:
        if name not in terms:
            values[name] = 0.0
            continue
        value = float(terms[name].data)
        if not math.isfinite(value):
            raise NumericError(f"loss term {name!r} is not finite ({value})")
        values[name] = value
        if weights[name] > 0:
            part = terms[name] * weights[name]
            total = part if total is None else total + part
    if total is None:
        total = terms["pred"] * 0.0
    values["total"] = float(total.data)
    return total, values


def microbatch_loss(model: DiPro, groups: Sequence[Batch]) -> tuple[Tensor, dict[str, float], int]:
    """Episode-weighted mean of the per-group losses, plus the fallback count."""
    n = sum(g.size for g in groups)
    total = None
    logged = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
    fallbacks = 0
    for g in groups:
        out = model(g)
        fallbacks += out.fallback_intervals
        loss, values = total_loss(model, out, g)
        share = g.size / n
        part = loss * share
        total = part if total is None else total + part
        for k, v in values.items():
            logged[k] += share * v
    return total, logged, fallbacks


# --- optimiser and schedule ---------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay (decay applied before the Adam step)."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(epoch_index: float, max_epochs: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr_max`` (index 0) towards ``lr_min`` (index max_epochs)."""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch_index / max_epochs))


def _accumulate(grads: dict[int, np.ndarray], params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            continue
        if id(p) in grads:
            grads[id(p)] += p.grad
        else:
            grads[id(p)] = p.grad.copy()
        p.grad = None


# --- evaluation ---------------------------------------------------------------------
def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _safe(fn: Callable, *args) -> float:
    try:
        return float(fn(*args))
    except UndefinedMetricError:
        return float("nan")


def _score_classes(truth: np.ndarray, probs: np.ndarray) -> dict[str, float]:
    pred = np.argmax(probs, axis=-1)
    p, r, f = M.macro_prf1(truth, pred)
    out = {"macro_precision": p, "macro_recall": r, "macro_f1": f,
           "accuracy": M.accuracy(truth, pred), "kappa": M.cohens_kappa(truth, pred)}
    if probs.shape[-1] == 2:
        out["auroc"] = _safe(M.auroc, probs[:, 1], truth)
        out["auprc"] = _safe(M.auprc, probs[:, 1], truth)
    else:
        out["auroc"] = _safe(M.auroc, probs, truth)
        out["auprc"] = _safe(M.auprc, probs, truth)
    return out


@dataclass
class Predictions:
    task: str
    probs: list = field(default_factory=list)  # per group, (B, ..., C)
    batches: list = field(default_factory=list)
    static_weights: list = field(default_factory=list)
    fallback_intervals: int = 0


def predict_episodes(model: DiPro, episodes: Sequence[Episode], batch_size: int = 64) -> Predictions:
    model.eval()
    preds = Predictions(model.task)
    with ad.no_grad():
        for i in range(0, len(episodes), batch_size):
            for g in group_by_shape(episodes[i:i + batch_size]):
                out = model(g)
                preds.probs.append(_softmax(out.logits.data))
                preds.batches.append(g)
                preds.fallback_intervals += out.fallback_intervals
                if out.fusion is not None:
                    preds.static_weights.append(out.fusion.static_weights)
    model.train()
    return preds


def score_predictions(preds: Predictions, level: str = "region") -> dict[str, float]:
    """Task metrics.  Progression metrics are computed per disease and averaged."""
    if preds.task != "progression":
        probs = np.concatenate(preds.probs)
        truth = np.concatenate([b.targets(preds.task) for b in preds.batches])
        return _score_classes(truth, probs)
    K = preds.probs[0].shape[-2]
    truth_k: list[list] = [[] for _ in range(K)]
    prob_k: list[list] = [[] for _ in range(K)]
    for probs, b in zip(preds.probs, preds.batches):
        labels, mask = b.progression_labels, b.label_mask
        if level == "disease":
            labels, mask = M.disease_labels(labels, mask)
            probs = probs.mean(axis=-3)
        for k in range(K):
            sel = mask[..., k]
            truth_k[k].append(label_to_class(labels[..., k][sel]))
            prob_k[k].append(probs[..., k, :][sel])
    per_disease = []
    for k in range(K):
        t = np.concatenate(truth_k[k])
        if t.size:
            per_disease.append(_score_classes(t, np.concatenate(prob_k[k])))
    if not per_disease:
        raise ContractError("no annotated progression labels to score")
    return {key: float(np.nanmean([d[key] for d in per_disease])) if not all(
        np.isnan(d[key]) for d in per_disease) else float("nan") for key in per_disease[0]}


def evaluate(model: DiPro, episodes: Sequence[Episode], level: str | None = None) -> dict[str, float]:
    if not episodes:
        raise ContractError("cannot evaluate on zero episodes")
    level = model.config.progression_level if level is None else level
    return score_predictions(predict_episodes(model, episodes), level)


# --- training -----------------------------------------------------------------------
@dataclass
class TrainResult:
    model: DiPro
    best_state: dict
    history: list
    best_epoch: int
    best_metric: float
    stopped_epoch: int
    status: str = "completed"  # completed | early_stopped | diverged
    message: str = ""

    def load_best(self) -> DiPro:
        self.model.load_state_dict(self.best_state)
        return self.model


class Trainer:
    """Holds the model, optimiser and shuffling state for one training run."""

    def __init__(self, config: ExperimentConfig, seed: int = 0, model: DiPro | None = None):
        self.config = config
        self.seed = int(seed)
        self.model = DiPro(config, seed) if model is None else model
        self.params = self.model.parameters()
        self.opt = AdamW(self.params, config.weight_decay)
        self.shuffle_rng = np.random.default_rng([self.seed, 3])

    def lr_at(self, epoch: int) -> float:
        cfg = self.config
        return cosine_lr(epoch - 1, cfg.max_epochs, cfg.learning_rate, cfg.lr_min)

    def run_epoch(self, episodes: Sequence[Episode], epoch: int) -> dict[str, float]:
        """One pass with gradient accumulation; returns episode-averaged loss terms."""
        cfg = self.config
        lr = self.lr_at(epoch)
        self.model.train()
        micro = make_batches(episodes, cfg.batch_size, self.shuffle_rng)
        k = cfg.accumulation_steps
        windows = [micro[i:i + k] for i in range(0, len(micro), k)]
        logged = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
        fallbacks = 0
        n_total = len(episodes)
        for window in windows:
            grads: dict[int, np.ndarray] = {}
            for groups in window:
                loss, values, fb = microbatch_loss(self.model, groups)
                fallbacks += fb
                ad.backward(loss * (1.0 / len(window)))
                _accumulate(grads, self.params)
                n = sum(g.size for g in groups)
                for key, v in values.items():
                    logged[key] += v * n / n_total
            for p in self.params:
                p.grad = grads.get(id(p))
            self.opt.step(lr)
            self.opt.zero_grad()
            if not all(np.isfinite(p.data).all() for p in self.params):
                raise NumericError("parameters became non-finite after an optimiser step")
        logged["lr"] = lr
        logged["fallback_intervals"] = fallbacks
        return logged


def selection_value(metrics: dict[str, float], name: str) -> float:
    return float(metrics.get(name, float("nan")))


def train(
    config: ExperimentConfig,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode],
    seed: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train with early stopping on the validation selection metric.

    The returned ``best_state`` is the parameter snapshot from the epoch with
    the strictly highest validation metric.  A non-finite loss stops
    training and the model is restored to that snapshot.
    """
    if not train_episodes or not val_episodes:
        raise ContractError("training needs non-empty train and validation splits")
    trainer = Trainer(config, seed)
    model = trainer.model
    best_state = model.state_dict()
    best_metric, best_epoch, stale = -math.inf, 0, 0
    history: list[dict] = []
    status, message, epoch = "completed", "", 0
    for epoch in range(1, config.max_epochs + 1):
        try:
            record = trainer.run_epoch(train_episodes, epoch)
        except NumericError as exc:
            status, message = "diverged", str(exc)
            model.load_state_dict(best_state)
            history.append({"epoch": epoch, "status": "diverged", "message": message})
            break
        val = evaluate(model, val_episodes)
        score = selection_value(val, config.selection_metric)
        improved = score > best_metric
        if improved:
            best_metric, best_epoch, stale = score, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
        entry = {"epoch": epoch, **{f"loss_{k}": record[k] for k in LOSS_TERMS + ("total",)},
                 "lr": record["lr"], "fallback_intervals": record["fallback_intervals"],
                 **{f"val_{k}": v for k, v in val.items()}, "improved": improved}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if stale >= config.patience:
            status = "early_stopped"
            break
    model.load_state_dict(best_state)
    model.trained = True
    return TrainResult(model, best_state, history, best_epoch, best_metric, epoch, status, message)


def fit(config: ExperimentConfig, episodes: Sequence[Episode], seed: int = 0,
        missing_rate: float | None = None) -> tuple[TrainResult, dict[str, float]]:
    """Split, optionally drop EHR rows from the training split, train, and test."""
    train_eps, val_eps, test_eps = split_cohort(episodes, seed)
    rate = config.missing_ehr_rate if missing_rate is None else missing_rate
    if rate > 0:
        train_eps = [inject_missing_ehr(ep, rate, seed=_episode_seed(seed, i)) for i, ep in enumerate(train_eps)]
    result = train(config, train_eps, val_eps, seed)
    return result, evaluate(result.model, test_eps)


def _episode_seed(seed: int, index: int) -> int:
    return int(seed) * 1_000_003 + int(index)


# --- ablations, sweeps and robustness -------------------------------------------
def run_ablation(variant: str, config: ExperimentConfig, episodes: Sequence[Episode],
                 seeds: Sequence[int] | None = None) -> dict:
    """Train one variant per seed; report per-seed test metrics and mean/std."""
    if variant not in ABLATIONS:
        raise ContractError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")
    cfg = config.replace(ablation=variant)
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    per_seed = {}
    n_params = DiPro(cfg, 0).num_parameters()
    for s in seeds:
        _, test = fit(cfg, episodes, s)
        per_seed[int(s)] = test
    keys = next(iter(per_seed.values())).keys()
    summary = {k: M.summarize([per_seed[s][k] for s in per_seed]) for k in keys}
    return {"variant": variant, "n_parameters": n_params, "per_seed": per_seed, "summary": summary}


GRID_FIELDS = {
    "learning_rate": "learning_rate",
    "lr": "learning_rate",
    "dropout": "dropout_rate",
    "dropout_rate": "dropout_rate",
    "hidden": "d",
    "d": "d",
    "lambda_pred": "lambda_pred",
    "lambda_orth": "lambda_orth",
    "lambda_temp": "lambda_temp",
    "lambda_pae": "lambda_pae",
    "lambda_static": "lambda_static",
}


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    if not grid:
        raise ContractError("grid search needs a non-empty grid")
    unknown = sorted(set(grid) - set(GRID_FIELDS))
    if unknown:
        raise ContractError(f"unknown grid axes {unknown}; allowed: {sorted(GRID_FIELDS)}")
    names = sorted(grid)
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]


def _score_point(config: ExperimentConfig, train_episodes, val_episodes, seed: int, point: dict) -> float:
    cfg = config.replace(**{GRID_FIELDS[k]: v for k, v in point.items()})
    return train(cfg, train_episodes, val_episodes, seed).best_metric


def grid_search(config: ExperimentConfig, grid: dict[str, Sequence], train_episodes, val_episodes,
                seed: int = 0, runner: Callable | None = None) -> tuple[ExperimentConfig, list[dict]]:
    """Exhaustive sweep; best validation metric wins, ties go to the
    lexicographically smallest setting (axes in sorted name order).

    ``runner(fn, items)`` may map ``fn`` over ``items`` in parallel; ``fn``
    is picklable.
    """
    points = expand_grid(grid)
    run = functools.partial(_score_point, config, list(train_episodes), list(val_episodes), seed)
    scores = list(map(run, points)) if runner is None else list(runner(run, points))
    board = [{"setting": p, "score": s} for p, s in zip(points, scores)]
    board.sort(key=lambda row: (-_finite_or(row["score"], -math.inf),
                                tuple(row["setting"][k] for k in sorted(row["setting"]))))
    best = board[0]["setting"]
    return config.replace(**{GRID_FIELDS[k]: v for k, v in best.items()}), board


def _finite_or(x: float, default: float) -> float:
    return x if isinstance(x, (int, float)) and math.isfinite(x) else default


def robustness_run(config: ExperimentConfig, episodes: Sequence[Episode], rate: float, seed: int) -> dict:
    """Train with EHR rows dropped from the training split at ``rate``."""
    result, test = fit(config, episodes, seed, missing_rate=rate)
    metric = config.selection_metric
    curve = [h[f"val_{metric}"] for h in result.history if f"val_{metric}" in h]
    return {
        "rate": float(rate),
        "seed": int(seed),
        "metric": metric,
        "mean_val": float(np.mean(curve)) if curve else float("nan"),
        "best_val": float(result.best_metric),
        "test": float(test.get(metric, float("nan"))),
        "fallback_intervals": int(sum(h.get("fallback_intervals", 0) for h in result.history)),
        "epochs": result.stopped_epoch,
        "status": result.status,
        "nan_free": result.status != "diverged"
        and all(math.isfinite(h.get("loss_total", math.nan)) for h in result.history),
    }


def _robustness_job(config: ExperimentConfig, episodes, job: tuple) -> dict:
    rate, seed = job
    return robustness_run(config, episodes, rate, seed)


def robustness(config: ExperimentConfig, episodes: Sequence[Episode], rates: Sequence[float],
               seeds: Sequence[int] | None = None, runner: Callable | None = None) -> list[dict]:
    """One training run per (seed, rate); rows come back in that order."""
    seeds = config.seeds if seeds is None else tuple(seeds)
    jobs = [(float(r), int(s)) for s in seeds for r in rates]
    run = functools.partial(_robustness_job, config, list(episodes))
    return list(map(run, jobs)) if runner is None else list(runner(run, jobs))
