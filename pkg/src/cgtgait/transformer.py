"""Per-joint temporal attention, the CGT block, and the feature-refinement head."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, init_parameter
from .graph import GraphConv
from .nn import LayerNorm, Linear, Module, PointwiseConv, TemporalConv


class ConfigError(ValueError):
    pass


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis, split into heads.

    q, k, v: [..., T, C]; returns the concatenated heads, [..., T, C].
    """
    C = q.shape[-1]
    if C % heads:
        raise ConfigError(f"{heads} heads do not divide attention width {C}")
    d = C // heads
    lead = q.shape[:-2]
    nl = len(lead)

    def split(x):
        x = ad.reshape(x, x.shape[:-1] + (heads, d))
        return ad.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))  # [..., h, T, d]

    qh, kh, vh = split(q * (1.0 / np.sqrt(d))), split(k), split(v)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(attn, vh)  # [..., h, T, d]
    mixed = ad.transpose(mixed, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return ad.reshape(mixed, lead + (q.shape[-2], C))


class TemporalTransformer(Module):
    """MHSA + FFN (post-norm) across frames for every joint, then a strided 1x1 conv.

    Works on feature maps [B, C, T, N]; attention runs on the [B, N, T, C] view.
    """

    def __init__(self, channels: int, frames: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, stride: int = 1, ffn_mult: int = 2, positional: bool = True):
        if channels % heads:
            raise ConfigError(f"{heads} heads do not divide {channels} channels")
        self.channels, self.frames, self.heads, self.stride = channels, frames, heads, stride
        self.pos = init_parameter((frames, channels), "zeros", rng, dtype=dtype) if positional else None
        self.wq = Linear(channels, channels, rng, dtype, bias=False)
        self.wk = Linear(channels, channels, rng, dtype, bias=False)
        self.wv = Linear(channels, channels, rng, dtype, bias=False)
        self.wo = Linear(channels, channels, rng, dtype)
        self.ln1 = LayerNorm(channels, rng, dtype)
        self.ffn1 = Linear(channels, ffn_mult * channels, rng, dtype)
        self.ffn2 = Linear(ffn_mult * channels, channels, rng, dtype)
        self.ln2 = LayerNorm(channels, rng, dtype)
        self.down = PointwiseConv(channels, channels, rng, dtype, stride=stride)

    def mhsa(self, tokens: Tensor) -> Tensor:
        """[B, N, T, C] -> [B, N, T, C] (heads concatenated and projected)."""
        q, k, v = self.wq(tokens), self.wk(tokens), self.wv(tokens)
        return self.wo(multi_head_attention(q, k, v, self.heads))

    def core(self, x: Tensor) -> Tensor:
        """Attention and feed-forward sublayers, frame count unchanged."""
        tokens = ad.transpose(x, (0, 3, 2, 1))  # [B, N, T, C]
        if self.pos is not None:
            if tokens.shape[2] != self.frames:
                raise ConfigError(f"positional table built for {self.frames} frames, got {tokens.shape[2]}")
            tokens = ad.add(tokens, self.pos)
        att = self.ln1(ad.add(self.mhsa(tokens), tokens))
        hidden = ad.relu(self.ffn1(att))
        out = self.ln2(ad.add(self.ffn2(hidden), att))
        return ad.transpose(out, (0, 3, 2, 1))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.core(x))

    def macs(self, t: int, n: int) -> dict:
        c = self.channels
        tokens = t * n
        dff = self.ffn1.weight.shape[1]
        t_out = -(-t // self.stride)
        return {
            "qkv_proj": 3 * tokens * c * c,
            "attn_scores": n * t * t * c,
            "attn_mix": n * t * t * c,
            "out_proj": tokens * c * c,
            "ffn": 2 * tokens * c * dff,
            "downsample": t_out * n * c * c,
        }

    def elementwise(self, t: int, n: int) -> int:
        c = self.channels
        dff = self.ffn1.weight.shape[1]
        tokens = t * n
        pos = tokens * c if self.pos is not None else 0
        # residual adds (2), two layer norms (~4 ops each), ffn ReLU
        return pos + 2 * tokens * c + 8 * tokens * c + tokens * dff


class TemporalConvUnit(Module):
    """Baseline temporal module: ReLU then a 9x1 convolution (carries the block stride)."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32, stride: int = 1,
                 kernel: int = 9):
        self.channels, self.stride, self.kernel = channels, stride, kernel
        self.conv = TemporalConv(channels, channels, kernel, rng, dtype, stride=stride)

    def core(self, x: Tensor) -> Tensor:
        return x

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(ad.relu(x))

    def macs(self, t: int, n: int) -> dict:
        t_out = -(-t // self.stride)
        return {"temporal_conv": t_out * n * self.channels * self.channels * self.kernel}

    def elementwise(self, t: int, n: int) -> int:
        return t * n * self.channels


CGT_ORDERS = ("gcn-transformer", "transformer-gcn", "parallel")


class CGTBlock(Module):
    """f_out = T(G(f_in)) + Conv(f_in), with alternative orderings for ablation.

    For the transformer-first and parallel orders the input is lifted to the
    output width by a 1x1 conv before the temporal module, and the strided
    downsample always closes the block.
    """

    def __init__(self, c_in: int, c_out: int, frames: int, stride: int, heads: int,
                 rng: np.random.Generator, dtype=np.float32, order: str = "gcn-transformer",
                 temporal: str = "transformer", ffn_mult: int = 2, positional: bool = True):
        if order not in CGT_ORDERS:
            raise ConfigError(f"unknown CGT order {order!r}")
        if temporal not in ("transformer", "tcn"):
            raise ConfigError(f"unknown temporal module {temporal!r}")
        self.c_in, self.c_out, self.frames, self.stride = c_in, c_out, frames, stride
        self.order, self.temporal_kind = order, temporal
        self.lift = PointwiseConv(c_in, c_out, rng, dtype) if order != "gcn-transformer" else None
        g_in = c_in if order != "transformer-gcn" else c_out
        self.graph = GraphConv(g_in, c_out, rng, dtype)
        if temporal == "transformer":
            self.temporal = TemporalTransformer(c_out, frames, heads, rng, dtype, stride=stride,
                                                ffn_mult=ffn_mult, positional=positional)
        else:
            self.temporal = TemporalConvUnit(c_out, rng, dtype, stride=stride)
        self.residual = PointwiseConv(c_in, c_out, rng, dtype, stride=stride)

    @property
    def out_frames(self) -> int:
        return -(-self.frames // self.stride)

    def branch(self, x: Tensor) -> Tensor:
        """The spatial/temporal path without the residual."""
        if self.order == "gcn-transformer":
            return self.temporal(self.graph(x))
        lifted = self.lift(x)
        if self.temporal_kind == "tcn":
            if self.order == "transformer-gcn":
                # conv stride happens up front, the graph then sees the shorter sequence
                return self.graph(self.temporal(lifted))
            return self.temporal(ad.add(self.graph(x), lifted))
        if self.order == "transformer-gcn":
            return self.temporal.down(self.graph(self.temporal.core(lifted)))
        return self.temporal.down(ad.add(self.graph(x), self.temporal.core(lifted)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(self.branch(x), self.residual(x))

    def macs(self, n: int) -> dict:
        t = self.frames
        out = {}
        if self.lift is not None:
            out["lift"] = self.c_out * self.c_in * t * n
        g_frames = t
        if self.temporal_kind == "tcn" and self.order == "transformer-gcn":
            g_frames = self.out_frames
        for k, v in self.graph.macs(g_frames).items():
            out[f"graph.{k}"] = v
        for k, v in self.temporal.macs(t, n).items():
            out[f"temporal.{k}"] = v
        out["residual"] = self.c_out * self.c_in * self.out_frames * n
        return out

    def elementwise(self, n: int) -> int:
        t = self.frames
        extra = self.c_out * t * n if self.order == "parallel" else 0
        return (self.graph.elementwise(t) + self.temporal.elementwise(t, n)
                + self.c_out * self.out_frames * n + extra)


# ------------------------------------------------------------- FR head

@dataclass
class FRHeadState:
    prototypes: np.ndarray  # [num_classes, dim]
    tau: float = 0.8
    momentum: float = 0.9
    temperature: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("EMA momentum must lie in (0, 1)")

    @classmethod
    def empty(cls, num_classes: int = 4, dim: int = 64, **kw) -> "FRHeadState":
        return cls(np.zeros((num_classes, dim)), **kw)


def l2_normalize(z: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return ad.div(z, ad.norm(z, axis=axis, keepdims=True, eps=eps))


def infonce(z: Tensor, prototypes: np.ndarray, labels: np.ndarray, temperature: float) -> Tensor:
    """Mean of -log softmax(z . proto_c / temperature)[label] over the batch."""
    protos = Tensor(np.asarray(prototypes, dtype=z.dtype))
    logits = ad.matmul(z, ad.transpose(protos)) * (1.0 / temperature)
    return ad.cross_entropy(logits, labels)


def update_prototypes(state: FRHeadState, z: np.ndarray, labels: np.ndarray,
                      confidences: np.ndarray) -> FRHeadState:
    """EMA each class prototype toward its confident samples' mean embedding, then renormalise."""
    protos = state.prototypes.copy()
    confident = np.asarray(confidences) > state.tau
    for c in range(protos.shape[0]):
        sel = confident & (np.asarray(labels) == c)
        if not sel.any():
            continue
        target = z[sel].mean(axis=0)
        p = state.momentum * protos[c] + (1.0 - state.momentum) * target
        n = np.linalg.norm(p)
        protos[c] = p / n if n > 1e-12 else p
    return replace(state, prototypes=protos)


def fr_contrastive(f_out: Tensor, labels, confidences, projection: Linear,
                   state: FRHeadState) -> Tuple[Tensor, FRHeadState]:
    """Prototype contrastive loss for one block output.

    ``f_out`` is a feature map [B, C, T, N] or already pooled [B, C]. The loss
    uses the prototypes as they were before this batch; the returned state
    holds the EMA-updated prototypes.
    """
    pooled = ad.reduce_mean(f_out, axes=(2, 3)) if f_out.ndim == 4 else f_out
    z = l2_normalize(projection(pooled))
    labels = np.asarray(labels)
    loss = infonce(z, state.prototypes, labels, state.temperature)
    new_state = update_prototypes(state, z.data.astype(np.float64), labels, np.asarray(confidences))
    return loss, new_state
