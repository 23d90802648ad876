"""Cross-channel context tokens.

All strategies express channel information as extra key/value-path tokens
prepended alongside the segment prompt; they never enter the decoded output.

Modes
-----
- ``ci``    : fully independent channels, no extra tokens.
- ``ci+``   : a learned per-channel identity token plus a few globally
              shared tokens (default), still no mixing of channel values.
- ``cd-g``  : one token summarising per-region means averaged across
              channels, shared by all streams of a batch element.
- ``cd-p``  : a token from mean-pooled calendar features, plus the same
              features injected additively into the patch tokens.
- ``cd-a``  : a token from the calendar features at the window start.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .patching import ConfigurationError, GranularitySet

CHANNEL_MODES = ("ci", "ci+", "cd-g", "cd-p", "cd-a")


@dataclass
class ChannelWeights:
    mode: str
    channel_tokens: Tensor | None = None  # (C, d) for ci+
    global_tokens: Tensor | None = None   # (n_global, d) for ci+
    w_region: Tensor | None = None        # (R, d) for cd-g
    b_region: Tensor | None = None
    w_marks: Tensor | None = None         # (F, d) for cd-p / cd-a
    b_marks: Tensor | None = None
    w_feat: Tensor | None = None          # (F, d) additive path for cd-p
    _names: dict = field(default_factory=dict)

    def parameters(self) -> dict:
        out = {}
        for name in ("channel_tokens", "global_tokens", "w_region", "b_region",
                     "w_marks", "b_marks", "w_feat"):
            t = getattr(self, name)
            if t is not None:
                out[f"channel.{name}"] = t
        return out


def init_channel_weights(
    mode: str,
    d: int,
    n_channels: int,
    n_regions: int,
    n_mark_features: int,
    rng: np.random.Generator,
    n_global: int = 1,
) -> ChannelWeights:
    if mode not in CHANNEL_MODES:
        raise ConfigurationError(f"unknown channel mode {mode!r}; choose from {CHANNEL_MODES}")
    w = ChannelWeights(mode=mode)
    if mode == "ci+":
        w.channel_tokens = ad.uniform_init(rng, (n_channels, d), d)
        if n_global > 0:
            w.global_tokens = ad.uniform_init(rng, (n_global, d), d)
    elif mode == "cd-g":
        w.w_region = ad.uniform_init(rng, (n_regions, d), n_regions)
        w.b_region = ad.uniform_init(rng, (d,), n_regions)
    elif mode in ("cd-p", "cd-a"):
        w.w_marks = ad.uniform_init(rng, (n_mark_features, d), n_mark_features)
        w.b_marks = ad.uniform_init(rng, (d,), n_mark_features)
        if mode == "cd-p":
            w.w_feat = ad.uniform_init(rng, (n_mark_features, d), n_mark_features)
    return w


def build_extra_tokens(
    weights: ChannelWeights,
    x: np.ndarray,
    marks: np.ndarray | None,
    gset: GranularitySet,
) -> Tensor | None:
    """Context tokens for every stream, shape (B*C, e, d), or None for ci.

    x: raw lookback batch (B, L, C); marks: calendar features (B, L, F)
    when the mode needs them. Streams are ordered channel-major within each
    batch element, matching the flattening used by the forecaster.
    """
    b, length, c = x.shape
    mode = weights.mode
    if mode == "ci":
        return None
    if mode == "ci+":
        d = weights.channel_tokens.shape[1]
        tokens = ad.broadcast_to(ad.reshape(weights.channel_tokens, (1, c, 1, d)), (b, c, 1, d))
        pieces = [tokens]
        if weights.global_tokens is not None:
            g = weights.global_tokens
            g = ad.broadcast_to(ad.reshape(g, (1, 1) + g.shape), (b, c) + g.shape)
            pieces.append(g)
        joined = ad.concat(pieces, axis=2)
        e = joined.shape[2]
        return ad.reshape(joined, (b * c, e, -1))
    if mode == "cd-g":
        # per-region mean over time, averaged across channels -> (B, R)
        if length % gset.f_max != 0:
            raise ConfigurationError(f"lookback L={length} not divisible by f_max={gset.f_max}")
        regions = x.reshape(b, length // gset.f_max, gset.f_max, c)
        summary = regions.mean(axis=(2, 3))  # (B, R)
        token = ad.matmul(Tensor(summary), weights.w_region) + weights.b_region  # (B, d)
        d = token.shape[-1]
        token = ad.broadcast_to(ad.reshape(token, (b, 1, 1, d)), (b, c, 1, d))
        return ad.reshape(token, (b * c, 1, d))
    if marks is None:
        raise ConfigurationError(f"channel mode {mode!r} requires calendar features")
    if mode == "cd-p":
        pooled = marks.mean(axis=1)  # (B, F)
    else:  # cd-a
        pooled = marks[:, 0, :]
    token = ad.matmul(Tensor(pooled), weights.w_marks) + weights.b_marks  # (B, d)
    d = token.shape[-1]
    token = ad.broadcast_to(ad.reshape(token, (b, 1, 1, d)), (b, c, 1, d))
    return ad.reshape(token, (b * c, 1, d))


def additive_mark_features(
    weights: ChannelWeights,
    marks: np.ndarray | None,
    gset: GranularitySet,
    n_channels: int,
) -> Tensor | None:
    """For cd-p: project calendar features at each aligned-slot start.

    Returns (B*C, R*N, d) to add onto the patch token sequence, or None
    when the mode has no additive path.
    """
    if weights.mode != "cd-p":
        return None
    if marks is None:
        raise ConfigurationError("channel mode 'cd-p' requires calendar features")
    b, length, _ = marks.shape
    starts = np.arange(0, length, gset.f_min)  # one slot per f_min step
    slot_marks = marks[:, starts, :]  # (B, R*N, F)
    z = ad.matmul(Tensor(slot_marks), weights.w_feat)  # (B, R*N, d)
    d = z.shape[-1]
    n_tok = z.shape[1]
    z = ad.broadcast_to(ad.reshape(z, (b, 1, n_tok, d)), (b, n_channels, n_tok, d))
    return ad.reshape(z, (b * n_channels, n_tok, d))
