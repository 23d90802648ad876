"""Adaptive variable-granularity patch embedding.

The lookback is cut into R regions of length f_max. A shared two-layer MLP
scores the candidate patch sizes per region; a straight-through
Gumbel-Softmax picks one while keeping the whole pipeline differentiable.
Each region is unfolded at the chosen size, projected to the model width,
and repeat-padded so every region contributes the same N = f_max/f_min
aligned token slots. A budget loss keeps empirical granularity usage near
target ratios so the classifier cannot collapse onto one size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class GranularitySet:
    """Sorted candidate patch sizes; every size must divide the largest."""

    sizes: tuple[int, ...]
    d: int

    def __post_init__(self):
        sizes = tuple(self.sizes)
        if len(sizes) < 2:
            raise ConfigurationError(f"need at least 2 candidate sizes, got {sizes}")
        if list(sizes) != sorted(set(sizes)) or any(s < 1 for s in sizes):
            raise ConfigurationError(f"sizes must be distinct ascending positives, got {sizes}")
        f_max = sizes[-1]
        for s in sizes:
            if f_max % s != 0:
                raise ConfigurationError(f"size {s} does not divide f_max={f_max}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def f_min(self):
        return self.sizes[0]

    @property
    def f_max(self):
        return self.sizes[-1]

    @property
    def K(self):
        return len(self.sizes)

    @property
    def N(self):
        return self.f_max // self.f_min


@dataclass
class RegionDecision:
    logits: np.ndarray  # (..., K)
    soft_probs: Tensor  # (..., K) smooth selection probabilities
    hard_index: np.ndarray  # (...)
    temperature: float
    blend: Tensor = None  # branch-mixing weights: straight-through one-hot
    # in hard mode, soft_probs otherwise

    def __post_init__(self):
        if self.blend is None:
            self.blend = self.soft_probs


@dataclass
class ApeWeights:
    """Classifier MLP, one projection per candidate size, optional positional table."""

    classifier_w1: Tensor
    classifier_b1: Tensor
    classifier_w2: Tensor
    classifier_b2: Tensor
    projections: list[tuple[Tensor, Tensor]]  # (f_k x d weight, d bias) per size
    pos_table: Tensor | None = None  # (n_slots, d) for learnable pe
    gset: GranularitySet = field(default=None)

    def parameters(self) -> dict:
        params = {
            "ape.classifier.w1": self.classifier_w1,
            "ape.classifier.b1": self.classifier_b1,
            "ape.classifier.w2": self.classifier_w2,
            "ape.classifier.b2": self.classifier_b2,
        }
        for k, (w, b) in enumerate(self.projections):
            params[f"ape.proj{self.gset.sizes[k]}.w"] = w
            params[f"ape.proj{self.gset.sizes[k]}.b"] = b
        if self.pos_table is not None:
            params["ape.pos_table"] = self.pos_table
        return params


def init_ape_weights(
    gset: GranularitySet,
    n_slots: int,
    rng: np.random.Generator,
    hidden: int | None = None,
    pe_mode: str = "sinusoidal",
) -> ApeWeights:
    if hidden is None:
        hidden = max(4 * gset.K, 64)
    w = ApeWeights(
        classifier_w1=ad.uniform_init(rng, (gset.f_max, hidden), gset.f_max),
        classifier_b1=ad.uniform_init(rng, (hidden,), gset.f_max),
        classifier_w2=ad.uniform_init(rng, (hidden, gset.K), hidden),
        classifier_b2=ad.uniform_init(rng, (gset.K,), hidden),
        projections=[
            (ad.uniform_init(rng, (f, gset.d), f), ad.uniform_init(rng, (gset.d,), f))
            for f in gset.sizes
        ],
        pos_table=(
            ad.uniform_init(rng, (n_slots, gset.d), gset.d) if pe_mode == "learnable" else None
        ),
        gset=gset,
    )
    return w


def partition_regions(x: Tensor, f_max: int) -> Tensor:
    """Reshape (..., L) into (..., R, f_max) contiguous regions."""
    L = x.shape[-1]
    if L % f_max != 0:
        raise ConfigurationError(f"lookback L={L} is not divisible by f_max={f_max}")
    return ad.reshape(x, x.shape[:-1] + (L // f_max, f_max))


def gumbel_softmax(
    logits: Tensor,
    temperature: float,
    hard: bool,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> RegionDecision:
    """Gumbel-Softmax over the last axis.

    Training: soft = softmax((logits + g)/tau); hard mode returns the one-hot
    of argmax with the soft gradient (straight-through). Eval: noise off,
    pure argmax of the logits.
    """
    if temperature <= 0:
        raise DomainError(f"gumbel temperature must be > 0, got {temperature}")
    if not training:
        idx = np.argmax(logits.data, axis=-1)
        one_hot = _one_hot(idx, logits.shape[-1])
        return RegionDecision(
            logits=logits.data, soft_probs=Tensor(one_hot), hard_index=idx, temperature=temperature
        )
    if rng is None:
        raise ConfigurationError("training-mode gumbel_softmax needs an rng")
    u = rng.uniform(1e-12, 1.0 - 1e-12, size=logits.shape)
    g = -np.log(-np.log(u))
    soft = ad.softmax(ad.scale(logits + Tensor(g), 1.0 / temperature), axis=-1)
    idx = np.argmax(soft.data, axis=-1)
    if hard:
        one_hot = _one_hot(idx, logits.shape[-1])
        # straight-through: forward value is the one-hot, gradient is soft's
        st = soft + Tensor(one_hot - soft.data)
        return RegionDecision(
            logits=logits.data, soft_probs=soft, hard_index=idx, temperature=temperature, blend=st
        )
    return RegionDecision(logits=logits.data, soft_probs=soft, hard_index=idx, temperature=temperature)


def _one_hot(idx: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k, dtype=np.float64)[idx]


def classify_regions(regions: Tensor, weights: ApeWeights) -> Tensor:
    """Shared two-layer MLP: (..., R, f_max) -> logits (..., R, K)."""
    h = ad.relu(ad.matmul(regions, weights.classifier_w1) + weights.classifier_b1)
    return ad.matmul(h, weights.classifier_w2) + weights.classifier_b2


def unfold_project(region: Tensor, f_k: int, projection) -> Tensor:
    """Split (..., f_max) into N_r patches of f_k and project each to width d."""
    f_max = region.shape[-1]
    if f_max % f_k != 0:
        raise ConfigurationError(f"patch size {f_k} does not divide region length {f_max}")
    n_r = f_max // f_k
    patches = ad.reshape(region, region.shape[:-1] + (n_r, f_k))
    w, b = projection
    return ad.matmul(patches, w) + b


def repeat_pad(z_r: Tensor, n_slots: int) -> Tensor:
    """Duplicate each patch embedding consecutively up to n_slots rows.

    Token axis is the second-to-last. Duplication (not interpolation) keeps
    each aligned slot covered by the patch whose span contains it.
    """
    n_r = z_r.shape[-2]
    if n_slots % n_r != 0:
        raise AssertionError(f"RepeatPad: {n_r} patches do not divide {n_slots} slots")
    reps = n_slots // n_r
    if reps == 1:
        return z_r
    return ad.repeat_rows(z_r, reps, axis=-2)


def sinusoidal_encoding(n_positions: int, d: int) -> np.ndarray:
    pe = np.zeros((n_positions, d))
    position = np.arange(n_positions)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe[:, 0::2] = np.sin(position * div)
    pe[:, 1::2] = np.cos(position * div[: d // 2])
    return pe


def assemble_tokens(padded_regions: Tensor, pe_mode: str, weights: ApeWeights) -> Tensor:
    """(..., R, N, d) regions -> (..., R*N, d) tokens with positional encoding."""
    s = padded_regions.shape
    R, N, d = s[-3], s[-2], s[-1]
    tokens = ad.reshape(padded_regions, s[:-3] + (R * N, d))
    if pe_mode == "none":
        return tokens
    if pe_mode == "sinusoidal":
        return tokens + Tensor(sinusoidal_encoding(R * N, d))
    if pe_mode == "learnable":
        if weights.pos_table is None or weights.pos_table.shape[0] != R * N:
            raise ConfigurationError("learnable pe requires a positional table of R*N rows")
        return tokens + weights.pos_table
    raise ConfigurationError(f"unknown pe_mode {pe_mode!r}")


def embed_lookback(
    x_streams: Tensor,
    weights: ApeWeights,
    pe_mode: str = "sinusoidal",
    temperature: float = 1.0,
    training: bool = True,
    rng: np.random.Generator | None = None,
    hard: bool = True,
) -> tuple[Tensor, RegionDecision]:
    """Full adaptive embedding: (S, L) channel streams -> (S, R*N, d) tokens.

    Forward computes all K granularity branches per region and blends them
    with the straight-through one-hot, so the gradient reaches both the
    selected projection and the classifier. hard=False keeps the smooth
    softmax blend instead (useful for gradient verification).
    """
    gset = weights.gset
    regions = partition_regions(x_streams, gset.f_max)  # (S, R, f_max)
    logits = classify_regions(regions, weights)  # (S, R, K)
    decision = gumbel_softmax(logits, temperature, hard=hard, rng=rng, training=training)

    branches = []
    for k, f_k in enumerate(gset.sizes):
        z = unfold_project(regions, f_k, weights.projections[k])  # (S, R, N_r, d)
        z = repeat_pad(z, gset.N)  # (S, R, N, d)
        sel = ad.reshape(
            ad.slice_axis(decision.blend, -1, k, k + 1),
            decision.blend.shape[:-1] + (1, 1),
        )
        branches.append(ad.mul(z, ad.broadcast_to(sel, z.shape)))
    blended = branches[0]
    for z in branches[1:]:
        blended = blended + z
    tokens = assemble_tokens(blended, pe_mode, weights)
    return tokens, decision


def usage_ratios(decision: RegionDecision, soft: bool = True) -> Tensor:
    """Mean selection mass per granularity over every region/stream in the batch.

    soft=True averages the smooth selection probabilities so the budget
    loss stays differentiable; soft=False averages hard one-hots.
    """
    probs = decision.soft_probs
    if probs.size == 0:
        raise ValueError("usage_ratios: no decisions")
    if not soft:
        probs = Tensor(_one_hot(decision.hard_index, probs.shape[-1]))
    k = probs.shape[-1]
    flat = ad.reshape(probs, (probs.size // k, k))
    return ad.mean(flat, axis=0)


def budget_loss(ratios: Tensor, targets) -> Tensor:
    """Sum over the first K-1 granularities of (target - empirical)^2."""
    k = ratios.shape[-1]
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[0] not in (k, k - 1):
        raise ConfigurationError(f"expected {k - 1} (or {k}) targets, got {targets.shape[0]}")
    free = targets[: k - 1]
    if np.any(free < 0) or np.any(free > 1) or free.sum() > 1 + 1e-12:
        raise ConfigurationError(f"budget targets must lie in [0,1] and sum to <= 1, got {targets}")
    diff = Tensor(free) - ad.slice_axis(ratios, -1, 0, k - 1)
    return ad.tsum(ad.square(diff))


def slot_spans(gset: GranularitySet, region_count: int, hard_index: np.ndarray):
    """Source time interval [start, stop) for every aligned token slot.

    hard_index: (R,) selected granularity per region. Slot j of region r is
    covered by the patch whose span contains grid position j*f_min, so spans
    repeat for duplicated slots.
    """
    spans = []
    for r in range(region_count):
        f_k = gset.sizes[int(hard_index[r])]
        base = r * gset.f_max
        for j in range(gset.N):
            patch = (j * gset.f_min) // f_k
            spans.append((base + patch * f_k, base + (patch + 1) * f_k))
    return spans
