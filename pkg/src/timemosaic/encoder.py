"""Shared transformer encoder with segment prompts and per-segment heads.

Prompts are inserted only on the key/value path: queries come from data
tokens alone, so prompt tokens steer attention but never appear in the
decoded output. Blocks are pre-norm residual with a relu feed-forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .patching import ConfigurationError


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


@dataclass
class EncoderWeights:
    layers: list[LayerWeights]
    n_heads: int

    def parameters(self) -> dict:
        params = {}
        for i, lw in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "bo", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
                         "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                params[f"encoder.layer{i}.{name}"] = getattr(lw, name)
        return params


@dataclass
class PromptBank:
    """One learnable l x d prompt per forecast segment; no sharing."""

    prompts: list[Tensor]

    @property
    def length(self):
        return self.prompts[0].shape[0] if self.prompts else 0

    def parameters(self) -> dict:
        return {f"prompts.segment{k}": p for k, p in enumerate(self.prompts)}


@dataclass
class SegmentHead:
    w: Tensor  # (n_tokens * d, m_k)
    b: Tensor  # (m_k,)

    @property
    def out_len(self):
        return self.w.shape[1]


def init_encoder(d: int, d_ff: int, n_layers: int, n_heads: int, rng: np.random.Generator) -> EncoderWeights:
    if d % n_heads != 0:
        raise ConfigurationError(f"d_model={d} not divisible by heads={n_heads}")
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerWeights(
                wq=ad.uniform_init(rng, (d, d), d),
                wk=ad.uniform_init(rng, (d, d), d),
                wv=ad.uniform_init(rng, (d, d), d),
                wo=ad.uniform_init(rng, (d, d), d),
                bo=ad.uniform_init(rng, (d,), d),
                ff_w1=ad.uniform_init(rng, (d, d_ff), d),
                ff_b1=ad.uniform_init(rng, (d_ff,), d),
                ff_w2=ad.uniform_init(rng, (d_ff, d), d_ff),
                ff_b2=ad.uniform_init(rng, (d,), d_ff),
                ln1_g=Tensor(np.ones(d), requires_grad=True),
                ln1_b=Tensor(np.zeros(d), requires_grad=True),
                ln2_g=Tensor(np.ones(d), requires_grad=True),
                ln2_b=Tensor(np.zeros(d), requires_grad=True),
            )
        )
    return EncoderWeights(layers=layers, n_heads=n_heads)


def init_prompt_bank(n_segments: int, prompt_len: int, d: int, rng: np.random.Generator) -> PromptBank:
    return PromptBank(
        prompts=[ad.uniform_init(rng, (prompt_len, d), d) for _ in range(n_segments)]
    )


def init_segment_heads(segment_lengths, n_tokens: int, d: int, rng: np.random.Generator) -> list[SegmentHead]:
    return [
        SegmentHead(
            w=ad.uniform_init(rng, (n_tokens * d, m), n_tokens * d),
            b=ad.uniform_init(rng, (m,), n_tokens * d),
        )
        for m in segment_lengths
    ]


def segment_lengths(horizon: int, segment_len: int) -> list[int]:
    """Tile the horizon with fixed-length segments, last one truncated."""
    if segment_len < 1 or segment_len > horizon:
        raise ConfigurationError(f"segment_len={segment_len} invalid for horizon H={horizon}")
    lengths = []
    left = horizon
    while left > 0:
        lengths.append(min(segment_len, left))
        left -= lengths[-1]
    return lengths


def _split_heads(t: Tensor, h: int) -> Tensor:
    s, n, d = t.shape
    t = ad.reshape(t, (s, n, h, d // h))
    return ad.transpose(t, (0, 2, 1, 3))  # (s, h, n, d/h)


def _merge_heads(t: Tensor) -> Tensor:
    s, h, n, dh = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (s, n, h * dh))


def prompt_masked_attention(
    x: Tensor, prefix: Tensor | None, layer: LayerWeights, n_heads: int,
    return_weights: bool = False,
):
    """Multi-head attention with queries from data tokens only.

    x: (S, n, d); prefix: (S, l, d) prompt/context tokens entering the
    key/value path, or None. Output keeps exactly the n data rows.
    """
    d = x.shape[-1]
    if d % n_heads != 0:
        raise ConfigurationError(f"d_model={d} not divisible by heads={n_heads}")
    kv_in = x if prefix is None or prefix.shape[-2] == 0 else ad.concat([prefix, x], axis=-2)
    q = _split_heads(ad.matmul(x, layer.wq), n_heads)
    k = _split_heads(ad.matmul(kv_in, layer.wk), n_heads)
    v = _split_heads(ad.matmul(kv_in, layer.wv), n_heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d // n_heads))
    attn = ad.softmax(scores, axis=-1)  # rows over n+l columns
    out = _merge_heads(ad.matmul(attn, v))
    out = ad.matmul(out, layer.wo) + layer.bo
    if return_weights:
        return out, attn
    return out


def _affine_norm(t: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.mul(ad.layer_norm(t), g) + b


def encode(z: Tensor, prompt: Tensor | None, weights: EncoderWeights) -> Tensor:
    """Pre-norm residual stack; the prompt joins K/V at every layer.

    z: (S, n, d). prompt: (l, d) parameter or (S, l, d), or None.
    Output has the same shape as z.
    """
    s = z.shape[0]
    x = z
    for layer in weights.layers:
        normed = _affine_norm(x, layer.ln1_g, layer.ln1_b)
        prefix = None
        if prompt is not None and prompt.shape[-2] > 0:
            p = prompt
            if len(p.shape) == 2:
                p = ad.broadcast_to(ad.reshape(p, (1,) + p.shape), (s,) + p.shape)
            prefix = _affine_norm(p, layer.ln1_g, layer.ln1_b)
        x = x + prompt_masked_attention(normed, prefix, layer, weights.n_heads)
        f = _affine_norm(x, layer.ln2_g, layer.ln2_b)
        x = x + (ad.matmul(ad.relu(ad.matmul(f, layer.ff_w1) + layer.ff_b1), layer.ff_w2) + layer.ff_b2)
    return x


def decode_segment(h_k: Tensor, head: SegmentHead) -> Tensor:
    """Flatten the token axis per stream and apply the segment's linear head."""
    s, n, d = h_k.shape
    if head.w.shape[0] != n * d:
        raise ConfigurationError(
            f"head expects {head.w.shape[0]} features, encoder produced {n * d}"
        )
    flat = ad.reshape(h_k, (s, n * d))
    return ad.matmul(flat, head.w) + head.b  # (S, m_k)
