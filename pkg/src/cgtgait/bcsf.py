"""Bidirectional cross-stream fusion between the posture and motion streams."""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, Module
from .transformer import ConfigError, multi_head_attention


class FusionDirection(Module):
    """Parameters for one direction: the own stream queries, the other supplies keys/values."""

    def __init__(self, channels: int, joints: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, ffn_mult: int = 2):
        if channels % heads:
            raise ConfigError(f"{heads} heads do not divide {channels} channels")
        self.channels, self.heads = channels, heads
        self.wq = Linear(channels, channels, rng, dtype, bias=False)
        self.wk = Linear(channels, channels, rng, dtype, bias=False)
        self.wv = Linear(channels, channels, rng, dtype, bias=False)
        self.wo = Linear(channels, channels, rng, dtype)
        self.ln1 = LayerNorm(channels, rng, dtype)
        self.ffn1 = Linear(channels, ffn_mult * channels, rng, dtype)
        self.ffn2 = Linear(ffn_mult * channels, channels, rng, dtype)
        self.ln2 = LayerNorm(channels, rng, dtype)
        self.mlp1 = Linear(joints, joints, rng, dtype)
        self.mlp2 = Linear(joints, joints, rng, dtype)


def temporal_cross_fusion(f_a: Tensor, f_b: Tensor, p: FusionDirection) -> Tensor:
    """Per-joint cross-attention over frames, post-norm FFN, and the outer residual to ``f_a``."""
    if f_a.shape != f_b.shape:
        raise ad.ShapeError(f"stream shapes differ: {f_a.shape} vs {f_b.shape}")
    a = ad.transpose(f_a, (0, 3, 2, 1))  # [B, N, T, C]
    b = ad.transpose(f_b, (0, 3, 2, 1))
    cross = p.wo(multi_head_attention(p.wq(a), p.wk(b), p.wv(b), p.heads))
    h1 = p.ln1(ad.add(cross, a))
    h2 = p.ln2(ad.add(p.ffn2(ad.relu(p.ffn1(h1))), h1))
    return ad.add(ad.transpose(h2, (0, 3, 2, 1)), f_a)


def joint_attention(f_other: Tensor, p: FusionDirection) -> Tensor:
    """Per-joint weights in (0, 1) from the channel/time-pooled other stream: [B, N]."""
    pooled = ad.reduce_mean(f_other, axes=(1, 2))
    return ad.sigmoid(p.mlp2(ad.relu(p.mlp1(pooled))))


def spatial_attention_fuse(f_self: Tensor, f_other: Tensor, p: FusionDirection) -> Tensor:
    if f_self.shape != f_other.shape:
        raise ad.ShapeError(f"stream shapes differ: {f_self.shape} vs {f_other.shape}")
    w = joint_attention(f_other, p)
    w = ad.reshape(w, (w.shape[0], 1, 1, w.shape[1]))
    return ad.add(ad.mul(f_other, w), f_self)


class BCSF(Module):
    """Exchange information between streams; output shapes equal input shapes."""

    def __init__(self, channels: int, joints: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, temporal: bool = True, spatial: bool = True, ffn_mult: int = 2):
        self.channels, self.joints = channels, joints
        self.use_temporal, self.use_spatial = temporal, spatial
        self.posture = FusionDirection(channels, joints, heads, rng, dtype, ffn_mult)
        self.motion = FusionDirection(channels, joints, heads, rng, dtype, ffn_mult)

    def __call__(self, f_p: Tensor, f_m: Tensor) -> Tuple[Tensor, Tensor]:
        if f_p.shape != f_m.shape:
            raise ad.ShapeError(f"stream shapes differ: {f_p.shape} vs {f_m.shape}")
        if self.use_temporal:
            p_ct = temporal_cross_fusion(f_p, f_m, self.posture)
            m_ct = temporal_cross_fusion(f_m, f_p, self.motion)
        else:
            p_ct, m_ct = f_p, f_m
        if not self.use_spatial:
            return p_ct, m_ct
        return (spatial_attention_fuse(p_ct, m_ct, self.posture),
                spatial_attention_fuse(m_ct, p_ct, self.motion))

    def macs(self, t: int) -> dict:
        c, n = self.channels, self.joints
        tokens = t * n
        out = {}
        for name, d in (("posture", self.posture), ("motion", self.motion)):
            dff = d.ffn1.weight.shape[1]
            if self.use_temporal:
                out[f"{name}.qkv_proj"] = 3 * tokens * c * c
                out[f"{name}.attn_scores"] = n * t * t * c
                out[f"{name}.attn_mix"] = n * t * t * c
                out[f"{name}.out_proj"] = tokens * c * c
                out[f"{name}.ffn"] = 2 * tokens * c * dff
            if self.use_spatial:
                out[f"{name}.joint_mlp"] = 2 * n * n
        return out

    def elementwise(self, t: int) -> int:
        c, n = self.channels, self.joints
        tokens = t * n
        per = 0
        if self.use_temporal:
            dff = self.posture.ffn1.weight.shape[1]
            per += 3 * tokens * c + 8 * tokens * c + tokens * dff
        if self.use_spatial:
            per += c * t * n + 2 * c * t * n + 3 * n
        return 2 * per
