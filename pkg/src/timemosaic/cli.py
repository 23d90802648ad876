"""Command-line entry point.

Subcommands: train, eval, zero-shot, grid, analyze, stats, bench.
Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import analysis as an
from . import harness
from .config import ConfigError, ExperimentConfig, SearchSpace, parse_config
from .significance import StatError, wilcoxon_signed_rank

USAGE_ERROR = 1
RUNTIME_ERROR = 2

_CONFIG_FLAGS = [
    ("--dataset", str), ("--lookback", int), ("--horizon", int),
    ("--granularities", str), ("--segment-len", int), ("--channel-mode", str),
    ("--norm", str), ("--pe", str), ("--d-model", int), ("--d-ff", int),
    ("--layers", int), ("--heads", int), ("--prompt-len", int),
    ("--budget-weight", float), ("--lambda", float), ("--budget-targets", str),
    ("--temperature", float), ("--epochs", int), ("--batch-size", int),
    ("--lr", float), ("--patience", int), ("--loss", str), ("--seed", int),
    ("--output", str), ("--data-root", str),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    for flag, typ in _CONFIG_FLAGS:
        p.add_argument(flag, type=typ, default=None, dest=flag[2:].replace("-", "_"))


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    keys = [f[0][2:].replace("-", "_") for f in _CONFIG_FLAGS]
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return parse_config(args.config, overrides)


def _parse_floats(text: str) -> list[float]:
    return [float(p) for p in text.replace(",", " ").split()]


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    record = harness.run_experiment(cfg, log=lambda r: print(json.dumps(r)))
    print(json.dumps({k: record[k] for k in
                      ("config_hash", "mse", "mae", "usage_ratios", "wall_time", "seed")}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    prep = harness.prepare_data(cfg)
    model = harness.build_from_config(cfg, prep.n_channels)
    from .training import evaluate
    metrics = evaluate(model, prep.test, marks=prep.test_marks, batch_size=cfg.batch_size)
    print(json.dumps(metrics))
    return 0


def cmd_zero_shot(args) -> int:
    cfg = _config_from_args(args)
    from .training import evaluate, train
    prep = harness.prepare_data(cfg)
    model = harness.build_from_config(cfg, prep.n_channels)
    train(model, prep.train, prep.val,
          train_marks=prep.train_marks, val_marks=prep.val_marks,
          epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
          budget_weight=cfg.budget_weight, loss_kind=cfg.loss,
          patience=cfg.patience, seed=cfg.seed)
    source = evaluate(model, prep.test, marks=prep.test_marks, batch_size=cfg.batch_size)
    target_cfg = parse_config(None, {"dataset": args.target, "lookback": cfg.lookback,
                                     "horizon": cfg.horizon, "data_root": cfg.data_root})
    metrics = harness.zero_shot_eval(model, target_cfg)
    out = {"source": cfg.dataset, "source_mse": source["mse"],
           "source_mae": source["mae"], **metrics}
    print(json.dumps(out))
    return 0


def cmd_grid(args) -> int:
    cfg = _config_from_args(args)
    results = harness.grid_search(
        cfg, SearchSpace(), budget=args.budget, csv_path=args.csv,
        log=lambda r: print(f"{r['config_hash']} selection={r['selection_metric']:.6f}"),
    )
    best = results[0]
    print(json.dumps({"winner": best["config_hash"],
                      "selection_metric": best["selection_metric"],
                      "config": best["config"], "runs": len(results)}))
    return 0


def cmd_analyze(args) -> int:
    from .data import load_csv, make_synthetic
    series = make_synthetic(seed=0) if args.csv_path == "synthetic" else load_csv(args.csv_path)
    rows = []
    for p in args.patch_len:
        rep = an.analyze_structure(series.values, p, args.clusters, seed=args.seed)
        rows.append(rep)
        print(json.dumps(rep.summary()))
    if args.out:
        with open(f"{args.out}_clusters.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patch_len", "n_clusters", "silhouette", "zipf_deviation", "n_patches"])
            for rep in rows:
                s = rep.summary()
                w.writerow([s["patch_len"], s["n_clusters"], s["silhouette"],
                            s["zipf_deviation"], s["n_patches"]])
        rep = rows[0]
        n_per_chan = len(rep.labels) // series.n_channels
        seqs = rep.labels.reshape(series.n_channels, n_per_chan)
        pmat, counts = an.transition_matrix(list(seqs), rep.n_clusters)
        top_k = min(args.top_k, rep.n_clusters)
        idx, sub = an.top_k_submatrix(pmat, counts.sum(axis=1), top_k)
        with open(f"{args.out}_transitions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cluster"] + [str(i) for i in idx])
            for i, row in zip(idx, sub):
                w.writerow([i] + [f"{v:.6f}" for v in row])
    return 0


def cmd_stats(args) -> int:
    a = _parse_floats(args.a)
    b = _parse_floats(args.b)
    res = wilcoxon_signed_rank(a, b, alternative=args.alternative)
    print(json.dumps({"p_value": res.p_value, "w_plus": res.w_plus,
                      "w_minus": res.w_minus, "n": res.n_used, "exact": res.exact,
                      "alternative": res.alternative}))
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    prep = harness.prepare_data(cfg)
    model = harness.build_from_config(cfg, prep.n_channels)
    x = prep.test[0][: args.bench_batch]
    marks = prep.test_marks[: args.bench_batch]
    lat = harness.measure_latency(model, x, marks, reps=args.reps)
    print(json.dumps({"param_count": model.parameter_counts(), **lat}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timemosaic",
                                     description="Adaptive-granularity time series forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and report test metrics")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate an untrained (freshly built) model")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("zero-shot", help="train on one dataset, evaluate on another")
    _add_config_flags(p)
    p.add_argument("--target", required=True, help="target dataset preset or CSV")
    p.set_defaults(fn=cmd_zero_shot)

    p = sub.add_parser("grid", help="deterministic grid search")
    _add_config_flags(p)
    p.add_argument("--budget", type=int, default=None, help="max configurations to run")
    p.add_argument("--csv", default=None, help="write all runs to this CSV")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("analyze", help="patch clustering structure analysis")
    p.add_argument("csv_path", help="series CSV path, or 'synthetic'")
    p.add_argument("--patch-len", type=int, nargs="+", default=[16])
    p.add_argument("--clusters", type=int, default=100)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="prefix for output CSVs")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("stats", help="paired Wilcoxon signed-rank test")
    p.add_argument("--a", required=True, help="comma/space-separated values")
    p.add_argument("--b", required=True, help="comma/space-separated values")
    p.add_argument("--alternative", default="less",
                   choices=["less", "greater", "two-sided"])
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("bench", help="parameter counts and forecast latency")
    _add_config_flags(p)
    p.add_argument("--bench-batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, StatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
