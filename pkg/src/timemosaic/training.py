"""Optimisation loop: Adam, joint forecast + granularity-budget objective,
early stopping on validation loss, batch-size-invariant evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import patching as pt
from .autodiff import Tensor
from .data import batch_iter
from .model import TimeMosaicModel
from .patching import ConfigurationError


class TrainingError(RuntimeError):
    """Raised when optimisation cannot proceed (e.g. non-finite loss)."""


def forecast_loss(pred: Tensor, target: np.ndarray, kind: str = "mse") -> Tensor:
    """Mean element-wise error over every (b, t, c) entry."""
    t = Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != t.shape:
        raise ConfigurationError(f"prediction {pred.shape} vs target {t.shape}")
    diff = pred - t
    if kind == "mse":
        return ad.mean(ad.square(diff))
    if kind == "mae":
        return ad.mean(ad.sqrt(ad.square(diff) + Tensor(np.float64(1e-24))))
    raise ConfigurationError(f"unknown loss kind {kind!r}")


def total_loss(
    pred: Tensor,
    target: np.ndarray,
    soft_usage: Tensor,
    budget_weight: float,
    budget_targets=None,
    loss_kind: str = "mse",
) -> tuple[Tensor, Tensor, Tensor]:
    """forecast + lambda * budget; returns (total, forecast, budget)."""
    fc = forecast_loss(pred, target, loss_kind)
    k = soft_usage.shape[-1]
    if budget_targets is None:
        budget_targets = np.full(k, 1.0 / k)
    bd = pt.budget_loss(soft_usage, budget_targets)
    return fc + ad.scale(bd, budget_weight), fc, bd


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState) -> None:
    """One bias-corrected Adam update in place; clears gradients."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool
    wall_time: float


def _snapshot(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for k, v in params.items():
        v.data[...] = snap[k]


def train(
    model: TimeMosaicModel,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray] | None = None,
    train_marks: np.ndarray | None = None,
    val_marks: np.ndarray | None = None,
    epochs: int = 10,
    batch_size: int = 32,
    lr: float = 1e-4,
    budget_weight: float = 0.01,
    budget_targets=None,
    loss_kind: str = "mse",
    patience: int = 3,
    seed: int = 0,
    history_path: str | None = None,
    log=None,
) -> TrainResult:
    """Minibatch Adam with shuffling, early stopping and best-weight restore.

    train_set / val_set are (X, Y) window arrays of shapes (n, L, C) and
    (n, H, C). Validation (when given) drives early stopping: training stops
    after `patience` epochs without improvement and the parameters are reset
    to the best epoch's snapshot.
    """
    x_tr, y_tr = train_set
    if len(x_tr) == 0:
        raise TrainingError("empty training set")
    params = model.parameters()
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    noise_rng = np.random.default_rng(seed + 1)

    history = []
    best_val = np.inf
    best_epoch = -1
    best_snap = _snapshot(params)
    bad_epochs = 0
    stopped = False
    t0 = time.perf_counter()

    for epoch in range(epochs):
        epoch_losses = []
        last_usage = None
        for idx in batch_iter(len(x_tr), batch_size, rng=rng, shuffle=True, drop_last=False):
            xb, yb = x_tr[idx], y_tr[idx]
            mb = train_marks[idx] if train_marks is not None else None
            with ad.Tape(rng_seed=int(noise_rng.integers(2**31))):
                res = model.forward(xb, mb, training=True, rng=noise_rng)
                loss, fc, bd = total_loss(
                    res.prediction, yb, res.soft_usage,
                    budget_weight, budget_targets, loss_kind,
                )
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}: total={loss.data!r} "
                        f"forecast={fc.data!r} budget={bd.data!r}"
                    )
                ad.backward(loss)
            adam_step(params, state)
            epoch_losses.append(float(loss.data))
            last_usage = res.soft_usage.data.tolist()

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "usage_ratios": last_usage,
            "lr": lr,
        }
        if val_set is not None:
            val = evaluate(model, val_set, marks=val_marks, batch_size=batch_size)
            record["val_loss"] = val["mse"] if loss_kind == "mse" else val["mae"]
            if record["val_loss"] < best_val - 1e-12:
                best_val = record["val_loss"]
                best_epoch = epoch
                best_snap = _snapshot(params)
                bad_epochs = 0
            else:
                bad_epochs += 1
        history.append(record)
        if log is not None:
            log(record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if val_set is not None and bad_epochs >= patience:
            stopped = True
            break

    if val_set is not None and best_epoch >= 0:
        _restore(params, best_snap)
    return TrainResult(
        history=history,
        best_epoch=best_epoch if val_set is not None else len(history) - 1,
        best_val_loss=float(best_val) if val_set is not None else float("nan"),
        stopped_early=stopped,
        wall_time=time.perf_counter() - t0,
    )


def evaluate(
    model: TimeMosaicModel,
    data: tuple[np.ndarray, np.ndarray],
    marks: np.ndarray | None = None,
    batch_size: int = 32,
) -> dict:
    """Deterministic full-dataset MSE/MAE; results independent of batch_size.

    Every window contributes equally (no batch dropped), so accumulating
    per-window sums makes the metrics bitwise-stable only up to float
    association -- we therefore accumulate exact per-window errors and
    reduce once at the end.
    """
    x, y = data
    if len(x) == 0:
        raise ConfigurationError("evaluate: empty dataset")
    sq = np.empty(len(x), dtype=np.float64)
    ab = np.empty(len(x), dtype=np.float64)
    for idx in batch_iter(len(x), batch_size, rng=None, shuffle=False, drop_last=False):
        mb = marks[idx] if marks is not None else None
        res = model.forward(x[idx], mb, training=False)
        err = res.prediction.data - y[idx]
        sq[idx] = np.mean(err ** 2, axis=(1, 2))
        ab[idx] = np.mean(np.abs(err), axis=(1, 2))
    return {
        "mse": float(np.mean(sq)),
        "mae": float(np.mean(ab)),
        "n_windows": int(len(x)),
    }
