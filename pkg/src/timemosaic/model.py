"""Full forecaster: adaptive patch embedding -> shared encoder -> segment heads.

Each channel of each batch element is processed as an independent stream
of shape (L,). Cross-channel and calendar context enters only through
extra key/value tokens chosen by the channel mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import channels as ch
from . import encoder as enc
from . import patching as pt
from .autodiff import Tensor
from .patching import ConfigurationError, GranularitySet, RegionDecision


@dataclass
class ModelConfig:
    lookback: int
    horizon: int
    n_channels: int
    granularities: tuple = (8, 16, 32)
    d_model: int = 128
    d_ff: int = 256
    n_layers: int = 2
    n_heads: int = 8
    prompt_len: int = 8
    segment_len: int | None = None  # default: ceil(H / 3)
    pe_mode: str = "sinusoidal"
    channel_mode: str = "ci+"
    n_global_prompts: int | None = None  # ci+ shared tokens; default: n_segments
    temperature: float = 1.0
    n_mark_features: int = 5
    instance_norm: bool = False  # per-window re-standardisation (RevIN-style)

    def __post_init__(self):
        if self.segment_len is None:
            self.segment_len = int(np.ceil(self.horizon / 3))
        self.granularities = tuple(int(g) for g in self.granularities)

    @property
    def gset(self) -> GranularitySet:
        return GranularitySet(self.granularities, self.d_model)

    @property
    def n_regions(self) -> int:
        g = self.gset
        if self.lookback % g.f_max != 0:
            raise ConfigurationError(
                f"lookback L={self.lookback} not divisible by f_max={g.f_max}"
            )
        return self.lookback // g.f_max

    @property
    def n_tokens(self) -> int:
        return self.n_regions * self.gset.N

    @property
    def segment_lengths(self) -> list[int]:
        return enc.segment_lengths(self.horizon, self.segment_len)


@dataclass
class ForwardResult:
    prediction: Tensor  # (B, H, C)
    decision: RegionDecision
    soft_usage: Tensor  # (K,)


@dataclass
class TimeMosaicModel:
    config: ModelConfig
    ape: pt.ApeWeights
    encoder: enc.EncoderWeights
    prompts: enc.PromptBank
    heads: list
    channel: ch.ChannelWeights
    _param_cache: dict = field(default=None, repr=False)

    def parameters(self) -> dict:
        params = {}
        params.update(self.ape.parameters())
        params.update(self.encoder.parameters())
        params.update(self.prompts.parameters())
        for k, head in enumerate(self.heads):
            params[f"heads.segment{k}.w"] = head.w
            params[f"heads.segment{k}.b"] = head.b
        params.update(self.channel.parameters())
        return params

    def parameter_counts(self) -> dict:
        """Parameter totals per component plus a grand total."""
        counts = {}
        for name, t in self.parameters().items():
            group = name.split(".")[0]
            counts[group] = counts.get(group, 0) + t.size
        counts["total"] = sum(counts.values())
        return counts

    def forward(
        self,
        x: np.ndarray,
        marks: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ForwardResult:
        """(B, L, C) lookback -> (B, H, C) forecast.

        Inside an active tape with training=True, gradients flow to every
        parameter; otherwise this is a plain deterministic evaluation.
        """
        cfg = self.config
        b, length, c = x.shape
        if length != cfg.lookback or c != cfg.n_channels:
            raise ConfigurationError(
                f"expected input (B, {cfg.lookback}, {cfg.n_channels}), got {x.shape}"
            )
        x = np.asarray(x, dtype=np.float64)
        if cfg.instance_norm:
            loc = x.mean(axis=1, keepdims=True)
            scale = np.sqrt(x.var(axis=1, keepdims=True) + 1e-5)
            x_in = (x - loc) / scale
        else:
            x_in = x

        streams = Tensor(np.moveaxis(x_in, -1, 1).reshape(b * c, length))  # (S, L)
        z, decision = pt.embed_lookback(
            streams, self.ape, pe_mode=cfg.pe_mode,
            temperature=cfg.temperature, training=training, rng=rng,
        )  # (S, n_tokens, d)

        add = ch.additive_mark_features(self.channel, marks, cfg.gset, c)
        if add is not None:
            z = z + add

        extra = ch.build_extra_tokens(self.channel, x, marks, cfg.gset)  # (S, e, d) or None

        segments = []
        s = b * c
        for prompt, head in zip(self.prompts.prompts, self.heads):
            p = ad.broadcast_to(ad.reshape(prompt, (1,) + prompt.shape), (s,) + prompt.shape)
            if extra is not None:
                p = ad.concat([extra, p], axis=1)
            h_k = enc.encode(z, p, self.encoder)
            segments.append(enc.decode_segment(h_k, head))  # (S, m_k)
        flat = ad.concat(segments, axis=-1)  # (S, H)
        pred = ad.transpose(ad.reshape(flat, (b, c, cfg.horizon)), (0, 2, 1))  # (B, H, C)

        if cfg.instance_norm:
            pred = ad.mul(pred, Tensor(scale)) + Tensor(loc)

        usage = pt.usage_ratios(decision, soft=True)
        return ForwardResult(prediction=pred, decision=decision, soft_usage=usage)


def build_model(config: ModelConfig, seed: int = 0) -> TimeMosaicModel:
    """Deterministic initialisation of every component from one seed."""
    rng = np.random.default_rng(seed)
    gset = config.gset
    seg_lens = config.segment_lengths
    n_global = config.n_global_prompts
    if n_global is None:
        n_global = len(seg_lens)
    return TimeMosaicModel(
        config=config,
        ape=pt.init_ape_weights(gset, config.n_tokens, rng, pe_mode=config.pe_mode),
        encoder=enc.init_encoder(config.d_model, config.d_ff, config.n_layers,
                                 config.n_heads, rng),
        prompts=enc.init_prompt_bank(len(seg_lens), config.prompt_len, config.d_model, rng),
        heads=enc.init_segment_heads(seg_lens, config.n_tokens, config.d_model, rng),
        channel=ch.init_channel_weights(
            config.channel_mode, config.d_model, config.n_channels,
            config.lookback // gset.f_max, config.n_mark_features, rng,
            n_global=n_global,
        ),
    )
