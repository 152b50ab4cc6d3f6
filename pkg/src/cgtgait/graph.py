"""Frame-level spatial modelling: physical + learned + data-dependent adjacency."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, init_parameter
from .nn import Module, PointwiseConv
from .skeleton import DEFAULT_TOPOLOGY, SkeletonTopology

NUM_SUBSETS = 3


def build_physical_adjacency(topology: SkeletonTopology = DEFAULT_TOPOLOGY,
                             normalize: bool = True) -> np.ndarray:
    """Three spatial partitions of the skeleton graph, stacked as [3, N, N].

    0: self loops; 1: centripetal (row joint -> neighbour nearer the root);
    2: centrifugal (row joint -> neighbour farther from the root). Each
    partition is normalised as D^-1/2 A D^-1/2 with D its row degree
    (floored at 1 so joints without such neighbours stay finite).
    """
    depth = topology.hop_distance()
    n = topology.num_joints
    parts = np.zeros((NUM_SUBSETS, n, n))
    parts[0] = np.eye(n)
    for a, b in topology.edges:
        for i, j in ((a, b), (b, a)):
            if depth[j] < depth[i]:
                parts[1, i, j] = 1.0
            else:
                parts[2, i, j] = 1.0
    if not normalize:
        return parts
    out = np.empty_like(parts)
    for k in range(NUM_SUBSETS):
        d = np.maximum(parts[k].sum(axis=1), 1.0) ** -0.5
        out[k] = d[:, None] * parts[k] * d[None, :]
    return out


def embed_width(c_in: int) -> int:
    return max(c_in // 4, 8)


class GraphConv(Module):
    """f_out = sum_k Conv_k(f_in @ (A_k + B_k + C_k)) + Conv(f_in)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32,
                 topology: SkeletonTopology = DEFAULT_TOPOLOGY, adjacency: np.ndarray = None):
        self.c_in, self.c_out = c_in, c_out
        self.A = (build_physical_adjacency(topology) if adjacency is None else adjacency).astype(dtype)
        n = self.A.shape[-1]
        k = self.A.shape[0]
        ce = embed_width(c_in)
        self.B = init_parameter((k, n, n), "zeros", rng, dtype=dtype)
        self.theta = [PointwiseConv(c_in, ce, rng, dtype, bias=False) for _ in range(k)]
        self.phi = [PointwiseConv(c_in, ce, rng, dtype, bias=False) for _ in range(k)]
        self.convs = [PointwiseConv(c_in, c_out, rng, dtype) for _ in range(k)]
        self.residual = PointwiseConv(c_in, c_out, rng, dtype)
        self.adaptive = True

    @property
    def num_subsets(self) -> int:
        return self.A.shape[0]

    def adaptive_adjacency(self, x: Tensor) -> list:
        """Per-subset, per-sequence C_k: row-softmax of time-pooled joint embeddings."""
        pooled = ad.reduce_mean(x, axes=2, keepdims=True)  # [B, C, 1, N]; 1x1 convs commute with it
        out = []
        for theta, phi in zip(self.theta, self.phi):
            e_t = theta(pooled)[:, :, 0, :]   # [B, Ce, N]
            e_p = phi(pooled)[:, :, 0, :]
            sim = ad.matmul(ad.swapaxes(e_t, 1, 2), e_p)  # [B, N, N]
            out.append(ad.softmax(sim, axis=-1))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        adaptive = self.adaptive_adjacency(x) if self.adaptive else [None] * self.num_subsets
        B, C, T, N = x.shape
        flat = ad.reshape(x, (B, C * T, N))
        mixed = []
        for k in range(self.num_subsets):
            m = ad.add(Tensor(self.A[k]), self.B[k])  # [N, N]
            if adaptive[k] is not None:
                m = ad.add(m, adaptive[k])  # [B, N, N]
            mixed.append(ad.reshape(ad.matmul(flat, m), (B, C, T, N)))
        stacked = ad.concatenate(mixed, axis=1)  # [B, K*Ci, T, N]
        weight = ad.concatenate([c.weight for c in self.convs], axis=1)
        bias = self.convs[0].bias
        for c in self.convs[1:]:
            bias = ad.add(bias, c.bias)
        out = ad.add(ad.pointwise_conv(stacked, weight, bias), self.residual(x))
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return out

    def macs(self, t: int) -> dict:
        n = self.A.shape[-1]
        k = self.num_subsets
        ci, co = self.c_in, self.c_out
        ce = embed_width(ci)
        return {
            "embed": 2 * k * ce * ci * n + k * ce * n * n,
            "joint_mix": k * ci * t * n * n,
            "subset_conv": k * co * ci * t * n,
            "residual_conv": co * ci * t * n,
        }

    def elementwise(self, t: int) -> int:
        n = self.A.shape[-1]
        k = self.num_subsets
        # pooling over time, adjacency sums, subset/ residual accumulation
        return self.c_in * t * n + 2 * k * n * n + k * self.c_out * t * n
