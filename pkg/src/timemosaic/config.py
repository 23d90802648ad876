"""Experiment configuration: plain-text key = value files plus flag overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from itertools import product

from .data import DATASET_PRESETS

DATA_ROOT_ENV = "TIMEMOSAIC_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = ""              # preset name, CSV path, or "synthetic"
    lookback: int = 96             # L
    horizon: int = 96              # H
    granularities: tuple = (8, 16, 32)
    segment_len: int | None = None
    channel_mode: str = "ci+"
    norm: str = "zscore"           # zscore | revin
    pe: str = "sinusoidal"         # sinusoidal | learnable | none
    d_model: int = 128
    d_ff: int = 512
    layers: int = 2
    heads: int = 8
    prompt_len: int = 8
    budget_weight: float = 0.01    # λ
    budget_targets: tuple | None = None
    temperature: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    patience: int = 3
    loss: str = "mse"
    seed: int = 0
    output: str | None = None
    data_root: str | None = None

    def validate(self) -> "ExperimentConfig":
        if not self.dataset:
            raise ConfigError("missing required key: dataset")
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError(f"L and H must be >= 1, got L={self.lookback} H={self.horizon}")
        if self.budget_weight < 0:
            raise ConfigError(f"budget weight must be >= 0, got {self.budget_weight}")
        if self.norm not in ("zscore", "revin"):
            raise ConfigError(f"norm must be zscore or revin, got {self.norm!r}")
        if self.pe not in ("sinusoidal", "learnable", "none"):
            raise ConfigError(f"unknown positional encoding {self.pe!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("epochs/batch_size must be >= 1 and patience >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        ds = self.dataset
        if ds not in DATASET_PRESETS and ds != "synthetic" and not os.path.exists(
            resolve_dataset_path(ds, self.data_root)
        ):
            raise ConfigError(f"dataset {ds!r}: not a preset and file not found")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# every accepted key, with aliases for the budget weight
_ALIASES = {"lambda": "budget_weight", "λ": "budget_weight",
            "l": "lookback", "h": "horizon", "lookback": "lookback",
            "horizon": "horizon"}
_FIELDS = set(ExperimentConfig.__dataclass_fields__)

_INT_KEYS = {"lookback", "horizon", "d_model", "d_ff", "layers", "heads",
             "prompt_len", "epochs", "batch_size", "patience", "seed", "segment_len"}
_FLOAT_KEYS = {"budget_weight", "temperature", "lr"}
_TUPLE_KEYS = {"granularities", "budget_targets"}


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _TUPLE_KEYS:
            parts = raw.strip("[]() ").replace(",", " ").split()
            return tuple(float(p) if key == "budget_targets" else int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}") from None
    return raw


def canonical_key(key: str) -> str:
    k = key.strip().lower().replace("-", "_")
    return _ALIASES.get(k, k)


def parse_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a validated config from a key = value file plus flag overrides.

    Overrides win over file values. Unknown keys are an error listing them.
    """
    values: dict = {}
    unknown = []
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, raw = line.split("=", 1)
                key = canonical_key(key)
                if key not in _FIELDS:
                    unknown.append(f"{path}:{lineno}: {key}")
                    continue
                values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        key = canonical_key(key)
        if key not in _FIELDS:
            unknown.append(key)
            continue
        if raw is not None:
            values[key] = _coerce(key, raw)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    if values.get("data_root") is None:
        values["data_root"] = os.environ.get(DATA_ROOT_ENV)
    return ExperimentConfig(**values).validate()


def resolve_dataset_path(dataset: str, data_root: str | None) -> str:
    """Locate a CSV for a preset name (or pass a path through)."""
    if os.path.sep in dataset or dataset.endswith(".csv"):
        return dataset
    root = data_root or os.environ.get(DATA_ROOT_ENV, ".")
    for name in (dataset, dataset.upper(), dataset.capitalize(),
                 "ETTh1" if dataset == "etth1" else None,
                 "ETTh2" if dataset == "etth2" else None,
                 "ETTm1" if dataset == "ettm1" else None,
                 "ETTm2" if dataset == "ettm2" else None):
        if name is None:
            continue
        cand = os.path.join(root, f"{name}.csv")
        if os.path.exists(cand):
            return cand
    return os.path.join(root, f"{dataset}.csv")


@dataclass
class SearchSpace:
    """Grid axes of the hyperparameter search protocol; 2160 configurations."""

    seq_len: tuple = (96, 192, 320, 512)
    pred_len: tuple = (96, 192, 336, 720)
    d_model: tuple = (16, 128, 512)     # d_ff is always 4 * d_model
    layers: tuple = (1, 3, 5)
    epochs: tuple = (10, 50, 100)
    lr: tuple = (1e-5, 1e-4, 1e-3, 1e-2, 0.05)
    aux_weight: float = 0.001           # fixed in every run

    @property
    def size(self) -> int:
        return (len(self.seq_len) * len(self.pred_len) * len(self.d_model)
                * len(self.layers) * len(self.epochs) * len(self.lr))

    def enumerate(self):
        """Deterministic lexicographic order over (L, H, d_model, layers, epochs, lr)."""
        for combo in product(self.seq_len, self.pred_len, self.d_model,
                             self.layers, self.epochs, self.lr):
            yield {
                "lookback": combo[0],
                "horizon": combo[1],
                "d_model": combo[2],
                "d_ff": 4 * combo[2],
                "layers": combo[3],
                "epochs": combo[4],
                "lr": combo[5],
                "budget_weight": self.aux_weight,
            }
