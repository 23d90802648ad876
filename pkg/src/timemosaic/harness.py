"""Experiment runner: single runs, zero-shot transfer, grid search,
parameter counting and latency measurement."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import data as dt
from .config import ExperimentConfig, SearchSpace, resolve_dataset_path
from .model import ModelConfig, TimeMosaicModel, build_model
from .patching import ConfigurationError
from .training import evaluate, train


@dataclass
class PreparedData:
    """Normalized, windowed splits ready for the model."""

    train: tuple  # (X, Y)
    val: tuple
    test: tuple
    train_marks: np.ndarray
    val_marks: np.ndarray
    test_marks: np.ndarray
    stats: dt.NormStats
    n_channels: int


def load_dataset(cfg: ExperimentConfig) -> dt.RawSeries:
    if cfg.dataset == "synthetic":
        return dt.make_synthetic(seed=cfg.seed)
    path = resolve_dataset_path(cfg.dataset, cfg.data_root)
    return dt.load_csv(path)


def prepare_data(cfg: ExperimentConfig, series: dt.RawSeries | None = None) -> PreparedData:
    """Split chronologically, normalize with train statistics, window each split."""
    if series is None:
        series = load_dataset(cfg)
    spec = dt.DATASET_PRESETS.get(cfg.dataset, dt.SplitSpec(ratios=(0.7, 0.1, 0.2)))
    splits = dt.split_dataset(series, spec, cfg.lookback, cfg.horizon)
    (train_s, val_s, test_s), stats = dt.fit_apply_zscore(splits.train, splits.val, splits.test)

    def windows(s):
        w = dt.sliding_windows(s, cfg.lookback, cfg.horizon)
        return dt.stack_windows(w)

    xtr, ytr, mtr, _ = windows(train_s)
    xva, yva, mva, _ = windows(val_s)
    xte, yte, mte, _ = windows(test_s)
    return PreparedData(
        train=(xtr, ytr), val=(xva, yva), test=(xte, yte),
        train_marks=mtr, val_marks=mva, test_marks=mte,
        stats=stats, n_channels=series.n_channels,
    )


def build_from_config(cfg: ExperimentConfig, n_channels: int) -> TimeMosaicModel:
    mc = ModelConfig(
        lookback=cfg.lookback,
        horizon=cfg.horizon,
        n_channels=n_channels,
        granularities=cfg.granularities,
        d_model=cfg.d_model,
        d_ff=cfg.d_ff,
        n_layers=cfg.layers,
        n_heads=cfg.heads,
        prompt_len=cfg.prompt_len,
        segment_len=cfg.segment_len,
        pe_mode=cfg.pe,
        channel_mode=cfg.channel_mode,
        temperature=cfg.temperature,
        instance_norm=(cfg.norm == "revin"),
    )
    return build_model(mc, seed=cfg.seed)


def run_experiment(cfg: ExperimentConfig, log=None) -> dict:
    """Train per the config, evaluate on test, return (and emit) a result record."""
    t0 = time.perf_counter()
    prep = prepare_data(cfg)
    model = build_from_config(cfg, prep.n_channels)
    result = train(
        model, prep.train, prep.val,
        train_marks=prep.train_marks, val_marks=prep.val_marks,
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        budget_weight=cfg.budget_weight, budget_targets=cfg.budget_targets,
        loss_kind=cfg.loss, patience=cfg.patience, seed=cfg.seed, log=log,
    )
    test = evaluate(model, prep.test, marks=prep.test_marks, batch_size=cfg.batch_size)
    val = evaluate(model, prep.val, marks=prep.val_marks, batch_size=cfg.batch_size)
    usage = hard_usage(model, prep.test[0], prep.test_marks, cfg.batch_size)
    record = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "mse": test["mse"],
        "mae": test["mae"],
        "val_mse": val["mse"],
        "val_mae": val["mae"],
        "usage_ratios": usage.tolist(),
        "param_count": model.parameter_counts(),
        "wall_time": time.perf_counter() - t0,
        "seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
    }
    if cfg.output:
        with open(cfg.output, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    return record


def hard_usage(model: TimeMosaicModel, x: np.ndarray, marks=None, batch_size: int = 32) -> np.ndarray:
    """Empirical hard granularity-selection shares over a dataset."""
    k = model.config.gset.K
    counts = np.zeros(k)
    for idx in dt.batch_iter(len(x), batch_size):
        mb = marks[idx] if marks is not None else None
        res = model.forward(x[idx], mb, training=False)
        counts += np.bincount(res.decision.hard_index.ravel(), minlength=k)
    return counts / counts.sum()


def zero_shot_eval(model: TimeMosaicModel, target_cfg: ExperimentConfig) -> dict:
    """Evaluate a trained model on another dataset without any update.

    Target data is normalized with the target's own train statistics. The
    model's channel count and horizon must be compatible.
    """
    prep = prepare_data(target_cfg)
    mc = model.config
    if target_cfg.horizon != mc.horizon or target_cfg.lookback != mc.lookback:
        raise ConfigurationError(
            f"target L/H ({target_cfg.lookback},{target_cfg.horizon}) != model "
            f"({mc.lookback},{mc.horizon})"
        )
    if prep.n_channels != mc.n_channels and mc.channel_mode != "ci":
        raise ConfigurationError(
            f"channel mode {mc.channel_mode!r} is tied to {mc.n_channels} channels; "
            f"target has {prep.n_channels}"
        )
    metrics = evaluate(model, prep.test, marks=prep.test_marks,
                       batch_size=target_cfg.batch_size)
    metrics["dataset"] = target_cfg.dataset
    return metrics


def grid_search(
    base: ExperimentConfig,
    space: SearchSpace | None = None,
    budget: int | None = None,
    csv_path: str | None = None,
    log=None,
) -> list[dict]:
    """Run the (budget-limited) grid in deterministic lexicographic order.

    Each run uses the base config with the grid axes substituted and the
    auxiliary budget weight fixed by the space. Returns all result records
    ranked by validation (mse + mae) / 2, best first.
    """
    space = space or SearchSpace()
    if budget is not None and budget > space.size:
        raise ValueError(f"budget {budget} exceeds grid size {space.size}")
    results = []
    for i, axes in enumerate(space.enumerate()):
        if budget is not None and i >= budget:
            break
        cfg = replace(base, **axes)
        record = run_experiment(cfg)
        record["selection_metric"] = (record["val_mse"] + record["val_mae"]) / 2
        results.append(record)
        if log is not None:
            log(record)
    results.sort(key=lambda r: r["selection_metric"])
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "config_hash", "lookback", "horizon", "d_model",
                        "layers", "epochs", "lr", "val_mse", "val_mae",
                        "selection_metric", "mse", "mae"])
            for rank, r in enumerate(results):
                c = r["config"]
                w.writerow([rank, r["config_hash"], c["lookback"], c["horizon"],
                            c["d_model"], c["layers"], c["epochs"], c["lr"],
                            r["val_mse"], r["val_mae"], r["selection_metric"],
                            r["mse"], r["mae"]])
    return results


def measure_latency(model: TimeMosaicModel, x: np.ndarray, marks=None, reps: int = 5) -> dict:
    """Wall-clock forecast latency over a batch; 1 warmup run excluded."""
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    model.forward(x, marks, training=False)  # warmup
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        model.forward(x, marks, training=False)
        times.append(time.perf_counter() - t0)
    return {
        "mean_s": float(np.mean(times)),
        "p50_s": float(np.median(times)),
        "runs": times,
        "batch": int(len(x)),
    }
