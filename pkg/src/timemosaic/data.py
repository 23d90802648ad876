"""CSV loading, chronological splitting, normalization, windowing, batching.

Fairness conventions baked in: stats are fit on the train split only,
evaluation batching never drops the final short batch, and val/test splits
reach back by the lookback length for context while their targets stay
inside the nominal boundary.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

__all__ = [
    "RawSeries",
    "WindowSample",
    "NormStats",
    "SplitSpec",
    "DATASET_PRESETS",
    "load_csv",
    "split_dataset",
    "fit_apply_zscore",
    "invert_zscore",
    "revin_transform",
    "revin_invert",
    "sliding_windows",
    "make_synthetic",
    "stack_windows",
    "batch_iter",
    "time_features",
]

_DATE_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d")


class LoadError(ValueError):
    pass


@dataclass
class RawSeries:
    timestamps: list[datetime]
    values: np.ndarray  # (T, C) float64
    column_names: list[str]

    @property
    def length(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]


@dataclass
class WindowSample:
    x: np.ndarray  # (L, C)
    y: np.ndarray  # (H, C)
    x_marks: np.ndarray  # (L, F)
    y_marks: np.ndarray  # (H, F)


@dataclass
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)
    mode: str = "zscore"


@dataclass
class SplitSpec:
    """Either explicit per-split point counts or ratios summing to 1."""

    points: tuple[int, int, int] | None = None
    ratios: tuple[float, float, float] | None = None

    def resolve(self, total: int) -> tuple[int, int, int]:
        if self.points is not None:
            return self.points
        r = self.ratios
        if r is None or not np.isclose(sum(r), 1.0):
            raise ValueError(f"split ratios must sum to 1, got {r}")
        n_train = int(total * r[0])
        n_test = int(total * r[2])
        n_val = total - n_train - n_test
        return (n_train, n_val, n_test)


# ETT uses the community fixed borders (months of data); everything else
# defaults to 0.7/0.1/0.2 chronological ratios.
_ETT_HOURLY = SplitSpec(points=(12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24))
_ETT_MINUTE = SplitSpec(points=(12 * 30 * 24 * 4, 4 * 30 * 24 * 4, 4 * 30 * 24 * 4))
_RATIO = SplitSpec(ratios=(0.7, 0.1, 0.2))

DATASET_PRESETS: dict[str, SplitSpec] = {
    "etth1": _ETT_HOURLY,
    "etth2": _ETT_HOURLY,
    "ettm1": _ETT_MINUTE,
    "ettm2": _ETT_MINUTE,
    "weather": _RATIO,
    "traffic": _RATIO,
    "electricity": _RATIO,
    "exchange": _RATIO,
    "solar": _RATIO,
    "wind1": _RATIO,
    "wind2": _RATIO,
    "wind3": _RATIO,
    "wind4": _RATIO,
    "pems03": SplitSpec(ratios=(0.6, 0.2, 0.2)),
    "pems04": SplitSpec(ratios=(0.6, 0.2, 0.2)),
    "pems07": SplitSpec(ratios=(0.6, 0.2, 0.2)),
    "pems08": SplitSpec(ratios=(0.6, 0.2, 0.2)),
}


def _parse_date(text: str) -> datetime:
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(text)


def load_csv(path: str, date_column: str = "date") -> RawSeries:
    """Load a header-ed CSV whose first column holds timestamps.

    Rows containing NaN (or unparseable numerics treated as NaN) are dropped
    with a warning; a completely unparseable timestamp is a hard error.
    """
    timestamps: list[datetime] = []
    rows: list[list[float]] = []
    dropped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LoadError(f"{path}: empty file")
        if header[0].strip().lower() != date_column.lower():
            raise LoadError(f"{path}: first column is {header[0]!r}, expected {date_column!r}")
        columns = [c.strip() for c in header[1:]]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = _parse_date(row[0].strip())
            except ValueError:
                raise LoadError(f"{path}: row {lineno}, column 1: unparseable timestamp {row[0]!r}")
            vals = []
            bad = False
            for col_idx, cell in enumerate(row[1:], start=2):
                try:
                    v = float(cell)
                except ValueError:
                    raise LoadError(f"{path}: row {lineno}, column {col_idx}: unparseable value {cell!r}")
                if not np.isfinite(v):
                    bad = True
                vals.append(v)
            if bad:
                dropped += 1
                continue
            timestamps.append(ts)
            rows.append(vals)
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) containing NaN/Inf")
    if len(rows) < 2:
        raise LoadError(f"{path}: need at least 2 valid rows, got {len(rows)}")
    values = np.asarray(rows, dtype=np.float64)
    for i in range(1, len(timestamps)):
        if timestamps[i] <= timestamps[i - 1]:
            raise LoadError(f"{path}: timestamps not strictly increasing at row {i + 2}")
    return RawSeries(timestamps=timestamps, values=values, column_names=columns)


@dataclass
class Splits:
    train: RawSeries
    val: RawSeries
    test: RawSeries
    boundaries: tuple[int, int, int] = field(default=(0, 0, 0))

    def nominal_sizes(self, lookback: int) -> tuple[int, int, int]:
        """Per-split count T_split - L + 1, the community size convention."""
        return tuple(s.length - lookback + 1 for s in (self.train, self.val, self.test))


def _slice_series(series: RawSeries, start: int, stop: int) -> RawSeries:
    return RawSeries(
        timestamps=series.timestamps[start:stop],
        values=series.values[start:stop],
        column_names=series.column_names,
    )


def split_dataset(series: RawSeries, spec: SplitSpec, lookback: int, horizon: int) -> Splits:
    """Contiguous chronological split; val/test are extended backward by the
    lookback so their first window's target starts at the nominal boundary."""
    n_train, n_val, n_test = spec.resolve(series.length)
    if n_train + n_val + n_test > series.length:
        raise ValueError(
            f"split points ({n_train},{n_val},{n_test}) exceed series length {series.length}"
        )
    b1, b2 = n_train, n_train + n_val
    train = _slice_series(series, 0, b1)
    val = _slice_series(series, max(b1 - lookback, 0), b2)
    test = _slice_series(series, max(b2 - lookback, 0), b2 + n_test)
    for name, part in (("train", train), ("val", val), ("test", test)):
        if part.length < lookback + horizon:
            raise ValueError(
                f"{name} split of {part.length} points is shorter than L+H={lookback + horizon}"
            )
    return Splits(train=train, val=val, test=test, boundaries=(b1, b2, b2 + n_test))


def fit_apply_zscore(train: RawSeries, *others: RawSeries) -> tuple[list[RawSeries], NormStats]:
    """Fit per-channel mean/std (population) on train; apply to all splits."""
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    zero_var = std == 0
    if zero_var.any():
        warnings.warn(f"zscore: {int(zero_var.sum())} constant channel(s); std forced to 1")
        std = np.where(zero_var, 1.0, std)
    stats = NormStats(mean=mean, std=std, mode="zscore")
    normalized = [
        RawSeries(s.timestamps, (s.values - mean) / std, s.column_names)
        for s in (train, *others)
    ]
    return normalized, stats


def invert_zscore(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.std + stats.mean


def revin_transform(x: np.ndarray, eps: float = 1e-5, gamma=None, beta=None):
    """Per-window instance normalization over the lookback axis.

    x: (L, C) or (B, L, C). Returns (x_norm, stats) where stats are re-used
    by :func:`revin_invert`. Optional learnable per-channel affine.
    """
    mean = x.mean(axis=-2, keepdims=True)
    std = np.sqrt(x.var(axis=-2, keepdims=True) + eps)
    x_norm = (x - mean) / std
    if gamma is not None:
        x_norm = x_norm * gamma + (0.0 if beta is None else beta)
    return x_norm, {"mean": mean, "std": std, "gamma": gamma, "beta": beta}


def revin_invert(y_norm: np.ndarray, stats: dict) -> np.ndarray:
    y = y_norm
    if stats["gamma"] is not None:
        beta = stats["beta"] if stats["beta"] is not None else 0.0
        y = (y - beta) / stats["gamma"]
    return y * stats["std"] + stats["mean"]


def sliding_windows(
    series: RawSeries,
    lookback: int,
    horizon: int,
    stride: int = 1,
    strict: bool = True,
) -> list[WindowSample]:
    """All (x, y) windows in chronological order; y starts right after x."""
    T = series.length
    if T < lookback + horizon:
        if strict:
            raise ValueError(f"series of {T} points is shorter than L+H={lookback + horizon}")
        warnings.warn(f"series of {T} points yields no windows for L+H={lookback + horizon}")
        return []
    marks = time_features(series.timestamps)
    samples = []
    for start in range(0, T - lookback - horizon + 1, stride):
        mid = start + lookback
        end = mid + horizon
        samples.append(
            WindowSample(
                x=series.values[start:mid],
                y=series.values[mid:end],
                x_marks=marks[start:mid],
                y_marks=marks[mid:end],
            )
        )
    return samples


def make_synthetic(
    n_points: int = 2000,
    n_channels: int = 3,
    seed: int = 0,
    region_len: int = 32,
    volatile_share: float = 0.5,
    smooth_noise: float = 0.02,
    volatile_noise: float = 0.3,
) -> RawSeries:
    """Seeded toy series with alternating smooth and volatile regions.

    Smooth regions are slow sinusoids; volatile regions add high-frequency
    oscillation and heavier noise. Hourly timestamps from a fixed origin.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_points, dtype=np.float64)
    values = np.empty((n_points, n_channels))
    for c in range(n_channels):
        phase = rng.uniform(0, 2 * np.pi)
        base = np.sin(2 * np.pi * t / (96 + 16 * c) + phase)
        values[:, c] = base + smooth_noise * rng.normal(size=n_points)
    n_regions = n_points // region_len
    for r in range(n_regions):
        if rng.uniform() < volatile_share:
            sl = slice(r * region_len, (r + 1) * region_len)
            tt = t[sl]
            values[sl] += (0.8 * np.sin(2 * np.pi * tt / 4 + rng.uniform(0, 2 * np.pi))[:, None]
                           + volatile_noise * rng.normal(size=(region_len, n_channels)))
    origin = datetime(2020, 1, 1)
    stamps = [origin + timedelta(hours=int(i)) for i in range(n_points)]
    return RawSeries(
        timestamps=stamps,
        values=values,
        column_names=[f"ch{c}" for c in range(n_channels)],
    )


def stack_windows(windows) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack WindowSamples into (X, Y, X_marks, Y_marks) batch arrays."""
    if not windows:
        raise ValueError("stack_windows: no windows")
    return (
        np.stack([w.x for w in windows]),
        np.stack([w.y for w in windows]),
        np.stack([w.x_marks for w in windows]),
        np.stack([w.y_marks for w in windows]),
    )


def batch_iter(n: int, batch_size: int, rng=None, shuffle: bool = False, drop_last: bool = False):
    """Yield index arrays; with drop_last=False every index appears exactly once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n)
    if shuffle:
        if rng is None:
            rng = np.random.default_rng(0)
        order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        yield idx


def time_features(timestamps) -> np.ndarray:
    """[month, day-of-month, weekday, hour, minute], each scaled to [-0.5, 0.5]."""
    out = np.empty((len(timestamps), 5), dtype=np.float64)
    for i, ts in enumerate(timestamps):
        out[i, 0] = (ts.month - 1) / 11.0 - 0.5
        out[i, 1] = (ts.day - 1) / 30.0 - 0.5
        out[i, 2] = ts.weekday() / 6.0 - 0.5
        out[i, 3] = ts.hour / 23.0 - 0.5
        out[i, 4] = ts.minute / 59.0 - 0.5
    return out
