"""Command-line entry point: ``dipro <verb> [options]``.

Verbs: synth, train, eval, gradcheck, ablate, sweep, robustness, attn-export.
Exit codes: 0 success, 1 contract/parse/usage error, 2 numeric failure.
Every run writes ``manifest.json`` into its output directory before any
result file.  ``DIPRO_MAX_WORKERS`` caps the worker processes used by
``ablate``, ``sweep`` and ``robustness`` (default 1).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import math
import os
import platform
import subprocess
import sys
from pathlib import Path

import numpy as np

from dipro import __version__
from dipro import autodiff as ad
from dipro import diagnostics as dg
from dipro import metrics as M
from dipro.checkpoint import load_model, save_checkpoint
from dipro.cohort import generate_cohort, read_cohort, read_oracle, attach_oracle, oracle_path, split_cohort, write_cohort
from dipro.config import ABLATIONS, FULL_SEARCH_SPACE, ExperimentConfig, dump_config, load_config, micro_config
from dipro.errors import ContractError, DiProError, NumericError
from dipro.labels import TASKS
from dipro.model import DiPro, group_by_shape
from dipro.training import evaluate, fit, grid_search, robustness, run_ablation, total_loss

MAX_WORKERS_ENV = "DIPRO_MAX_WORKERS"
GRADCHECK_TOLERANCE = 1e-4


class UsageError(DiProError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --- run bookkeeping -----------------------------------------------------------------
def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory plus its manifest."""

    def __init__(self, out: str, verb: str, argv: list[str], config: ExperimentConfig | None, seed):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "verb": verb,
            "argv": argv,
            "package_version": __version__,
            "git_describe": git_describe(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": seed,
            "config_hash": config.hash() if config is not None else None,
            "config": config.to_dict() if config is not None else None,
            "inputs": {},
            "outputs": [],
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
        }
        self._write()

    def input(self, name: str, path) -> None:
        self.manifest["inputs"][name] = {"path": str(path), "sha256": _sha256(path)}
        self._write()

    def path(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.dir / name

    def finish(self, status: str = "ok", **extra) -> None:
        self.manifest.update(status=status, finished_at=_now(), **extra)
        self._write()

    def _write(self) -> None:
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def max_workers() -> int:
    raw = os.environ.get(MAX_WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ContractError(f"{MAX_WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def _runner():
    n = max_workers()
    if n == 1:
        return None

    def run(fn, items):
        with concurrent.futures.ProcessPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))

    return run


def _write_tsv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, delimiter="\t", extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def metric_rows(task: str, per_seed: dict[int, dict[str, float]]) -> list[dict]:
    """Flat (task, metric, seed, value) rows plus aggregate mean/std rows."""
    rows = []
    for seed, metrics in per_seed.items():
        for name, value in metrics.items():
            rows.append({"task": task, "metric": name, "seed": seed, "value": value})
    for name in next(iter(per_seed.values())):
        mean, std = M.summarize([per_seed[s][name] for s in per_seed])
        rows.append({"task": task, "metric": name, "seed": "mean", "value": mean})
        rows.append({"task": task, "metric": name, "seed": "std", "value": std})
    return rows


# --- config and cohort resolution ------------------------------------------------
def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config or "desk", getattr(args, "task", None))
    if getattr(args, "ablation", None):
        cfg = cfg.replace(ablation=args.ablation)
    if getattr(args, "seed", None) is not None and args.verb != "synth":
        cfg = cfg.replace(seeds=(args.seed,))
    return cfg


def load_episodes(args, cfg: ExperimentConfig, run: Run | None = None):
    if getattr(args, "cohort", None):
        path = Path(args.cohort)
        episodes = read_cohort(path)
        if run is not None:
            run.input("cohort", path)
        side = oracle_path(path)
        if side.exists():
            episodes = attach_oracle(episodes, read_oracle(side))
        return episodes
    return generate_cohort(cfg.cohort)


# --- verbs ---------------------------------------------------------------------
def cmd_synth(args, argv) -> int:
    cfg = resolve_config(args)
    cohort_cfg = cfg.cohort if args.seed is None else dataclasses.replace(cfg.cohort, seed=args.seed)
    cfg = cfg.replace(cohort=cohort_cfg)
    run = Run(args.out, "synth", argv, cfg, cohort_cfg.seed)
    episodes = generate_cohort(cohort_cfg)
    path = run.path("cohort.jsonl")
    write_cohort(episodes, path)
    run.manifest["outputs"].append(oracle_path(path).name)
    run.finish(n_episodes=len(episodes))
    print(f"wrote {len(episodes)} episodes to {path}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = resolve_config(args)
    seed = cfg.seeds[0]
    run = Run(args.out, "train", argv, cfg, seed)
    episodes = load_episodes(args, cfg, run)
    dump_config(cfg, run.path("config.toml"))
    result, test = fit(cfg, episodes, seed)
    _write_jsonl(run.path("history.jsonl"), result.history)
    save_checkpoint(run.path("checkpoint.bin"), cfg, result.best_state, seed,
                    meta={"best_epoch": result.best_epoch, "best_val": result.best_metric,
                          "stopped_epoch": result.stopped_epoch, "status": result.status})
    _write_tsv(run.path("metrics.tsv"), metric_rows(cfg.task, {seed: test}))
    run.finish("diverged" if result.status == "diverged" else "ok", best_epoch=result.best_epoch)
    print(f"{cfg.task} {cfg.ablation}: best epoch {result.best_epoch}, "
          f"val {cfg.selection_metric}={result.best_metric:.4f}, test {cfg.selection_metric}={test[cfg.selection_metric]:.4f}")
    if result.status == "diverged":
        print(f"training diverged: {result.message}", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args, argv) -> int:
    if not args.checkpoint:
        raise ContractError("eval needs --checkpoint")
    model, header = load_model(args.checkpoint)
    cfg = model.config
    run = Run(args.out, "eval", argv, cfg, header.get("seed"))
    run.input("checkpoint", args.checkpoint)
    episodes = load_episodes(args, cfg, run)
    if not args.cohort:
        episodes = split_cohort(episodes, header.get("seed", 0))[2]
    metrics = evaluate(model, episodes)
    _write_tsv(run.path("metrics.tsv"), metric_rows(cfg.task, {header.get("seed", 0): metrics}))
    run.finish()
    for k, v in metrics.items():
        print(f"{k}\t{v:.6f}")
    return 0


def gradcheck_trial(task: str, seed: int, max_coords: int | None = 16) -> float:
    """Max relative gradient error of the composite loss on one micro setting."""
    rng = np.random.default_rng([seed, 99])
    lam = rng.uniform(0.1, 2.0, size=5)
    cfg = micro_config(task, seed).replace(
        lambda_pred=lam[0], lambda_orth=lam[1], lambda_temp=lam[2], lambda_pae=lam[3], lambda_static=lam[4],
    )
    episodes = generate_cohort(cfg.cohort)
    batch = group_by_shape(episodes)[0]
    model = DiPro(cfg, seed).eval()
    params = model.parameters()
    skip = None
    if max_coords is not None:
        skip = {}
        for p in params:
            keep = np.zeros(p.size, dtype=bool)
            keep[rng.choice(p.size, size=min(max_coords, p.size), replace=False)] = True
            skip[id(p)] = ~keep.reshape(p.shape)
    return ad.grad_check(lambda: total_loss(model, model(batch), batch)[0], params, skip=skip)


def cmd_gradcheck(args, argv) -> int:
    base = 0 if args.seed is None else args.seed
    run = Run(args.out, "gradcheck", argv, micro_config(), base) if args.out else None
    rows = []
    for i in range(args.trials):
        task = args.task or TASKS[i % len(TASKS)]
        err = gradcheck_trial(task, base + i, None if args.max_coords <= 0 else args.max_coords)
        rows.append({"trial": i, "task": task, "seed": base + i, "max_rel_error": err})
        print(f"trial {i} ({task}, seed {base + i}): max relative error {err:.3e}")
    worst = max(r["max_rel_error"] for r in rows)
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOLERANCE:g})")
    if run is not None:
        _write_tsv(run.path("gradcheck.tsv"), rows)
        run.finish("ok" if ok else "failed", max_rel_error=worst)
    return 0 if ok else 2


ABLATION_METRICS = ("macro_f1", "accuracy", "auroc", "auprc")


def cmd_ablate(args, argv) -> int:
    cfg = resolve_config(args)
    variants = list(ABLATIONS) if args.all else [args.ablation or "full"]
    run = Run(args.out, "ablate", argv, cfg, list(cfg.seeds))
    episodes = load_episodes(args, cfg, run)
    runner = _runner()
    if runner is None:
        records = [run_ablation(v, cfg, episodes) for v in variants]
    else:
        import functools
        records = runner(functools.partial(_ablation_job, cfg, episodes), variants)
    rows = []
    for rec in records:
        row = {"variant": rec["variant"], "n_parameters": rec["n_parameters"]}
        for m in ABLATION_METRICS:
            row[f"{m}_mean"], row[f"{m}_std"] = rec["summary"][m]
        rows.append(row)
    _write_tsv(run.path("ablation.tsv"), rows)
    flat = []
    for rec in records:
        for r in metric_rows(cfg.task, rec["per_seed"]):
            flat.append({"variant": rec["variant"], **r})
    _write_tsv(run.path("ablation_metrics.tsv"), flat)
    run.finish()
    for row in rows:
        print(f"{row['variant']}\t{row['macro_f1_mean']:.4f} ± {row['macro_f1_std']:.4f}")
    return 0


def _ablation_job(cfg, episodes, variant):
    return run_ablation(variant, cfg, episodes)


def _load_grid(path: str | None) -> dict:
    if path is None:
        return {"learning_rate": [1e-2, 3e-3], "dropout": [0.1, 0.2]}
    if path == "full":
        return {k: list(v) for k, v in FULL_SEARCH_SPACE.items()}
    from dipro.config import tomllib

    doc = tomllib.loads(Path(path).read_text())
    if set(doc) != {"grid"}:
        raise ContractError("a grid file must contain exactly one [grid] table")
    return doc["grid"]


def cmd_sweep(args, argv) -> int:
    cfg = resolve_config(args)
    seed = cfg.seeds[0]
    run = Run(args.out, "sweep", argv, cfg, seed)
    grid = _load_grid(args.grid)
    if args.grid not in (None, "full"):
        run.input("grid", args.grid)
    run.manifest["grid"] = grid
    episodes = load_episodes(args, cfg, run)
    train_eps, val_eps, _ = split_cohort(episodes, seed)
    best, board = grid_search(cfg, grid, train_eps, val_eps, seed, _runner())
    _write_tsv(run.path("leaderboard.tsv"),
               [{"rank": i + 1, **row["setting"], "score": row["score"]} for i, row in enumerate(board)])
    dump_config(best, run.path("best_config.toml"))
    run.finish(best=board[0]["setting"])
    print(f"best {board[0]['setting']} with validation {cfg.selection_metric}={board[0]['score']:.4f}")
    return 0


def _parse_rates(text: str) -> list[float]:
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ContractError(f"--rates must be comma-separated numbers, got {text!r}") from None
    if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
        raise ContractError("--rates must hold values in [0, 1]")
    return rates


def robustness_table(rows: list[dict]) -> list[dict]:
    """Rate x metric summary: mean/std over seeds of the test and mean-validation metric."""
    out = []
    for rate in sorted({r["rate"] for r in rows}, reverse=True):
        sel = [r for r in rows if r["rate"] == rate]
        t_mean, t_std = M.summarize([r["test"] for r in sel])
        v_mean, v_std = M.summarize([r["mean_val"] for r in sel])
        out.append({"missing_rate": rate, "metric": sel[0]["metric"], "test_mean": t_mean, "test_std": t_std,
                    "mean_val_mean": v_mean, "mean_val_std": v_std,
                    "fallback_intervals": sum(r["fallback_intervals"] for r in sel)})
    return out


def cmd_robustness(args, argv) -> int:
    cfg = resolve_config(args)
    rates = _parse_rates(args.rates)
    run = Run(args.out, "robustness", argv, cfg, list(cfg.seeds))
    run.manifest["rates"] = rates
    episodes = load_episodes(args, cfg, run)
    rows = robustness(cfg, episodes, rates, runner=_runner())
    _write_tsv(run.path("robustness_runs.tsv"), rows)
    table = robustness_table(rows)
    _write_tsv(run.path("robustness.tsv"), table)
    nan_free = all(r["nan_free"] for r in rows)
    run.finish("ok" if nan_free else "diverged")
    for row in table:
        print(f"{row['missing_rate']:.2f}\t{row['metric']}\t{row['test_mean']:.4f} ± {row['test_std']:.4f}")
    return 0 if nan_free else 2


def cmd_attn_export(args, argv) -> int:
    if not args.checkpoint:
        raise ContractError("attn-export needs --checkpoint")
    model, header = load_model(args.checkpoint)
    cfg = model.config
    run = Run(args.out, "attn-export", argv, cfg, header.get("seed"))
    run.input("checkpoint", args.checkpoint)
    episodes = load_episodes(args, cfg, run)
    weights = dg.region_attention(model, episodes)
    rows = [{"task": cfg.task, "region": r, "weight": float(w)} for r, w in enumerate(weights)]
    _write_tsv(run.path("region_attention.tsv"), rows)
    run.finish()
    for row in rows:
        print(f"{row['task']}\tregion {row['region']}\t{row['weight']:.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "attn-export": cmd_attn_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dipro", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="TOML config file or preset name (micro, desk, smoke); default desk")
        p.add_argument("--out", required=out_required, help="output directory for this run")
        p.add_argument("--seed", type=int, help="override the seed (cohort seed for synth, run seed otherwise)")
        p.add_argument("--task", choices=TASKS, help="override the prediction task")

    p = sub.add_parser("synth", help="generate a synthetic cohort plus its oracle sidecar")
    common(p)

    for verb, text in (("train", "train one model and save the best checkpoint"),
                       ("ablate", "train ablation variants over the configured seeds"),
                       ("sweep", "grid search on the validation split"),
                       ("robustness", "train with EHR rows dropped at several rates")):
        p = sub.add_parser(verb, help=text)
        common(p)
        p.add_argument("--ablation", choices=ABLATIONS, help="model variant (default from config)")
        p.add_argument("--cohort", help="cohort file written by synth (default: generate from config)")
        if verb == "ablate":
            p.add_argument("--all", action="store_true", help="run all eight variants")
        if verb == "sweep":
            p.add_argument("--grid", help="TOML file with a [grid] table, or 'full' for the built-in full grid")
        if verb == "robustness":
            p.add_argument("--rates", default="0,0.25,0.5,0.75", help="comma-separated EHR missing rates")

    for verb, text in (("eval", "evaluate a saved checkpoint"),
                       ("attn-export", "export per-region prediction attention")):
        p = sub.add_parser(verb, help=text)
        p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
        p.add_argument("--cohort", help="cohort file (default: regenerate and use the test split)")
        p.add_argument("--out", required=True, help="output directory for this run")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full composite loss")
    p.add_argument("--config", default="micro", help="only the micro preset is supported")
    p.add_argument("--out", help="optional output directory")
    p.add_argument("--seed", type=int, help="first trial seed (default 0)")
    p.add_argument("--task", choices=TASKS, help="fix the task (default: cycle through all tasks)")
    p.add_argument("--trials", type=int, default=5, help="number of random micro settings (default 5)")
    p.add_argument("--max-coords", type=int, default=16,
                   help="coordinates sampled per parameter tensor; 0 checks every coordinate")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.verb == "gradcheck" and args.config != "micro":
            raise ContractError("gradcheck only supports --config micro")
        return COMMANDS[args.verb](args, argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="")
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except DiProError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
