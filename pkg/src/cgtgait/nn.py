"""Parameter containers shared by the network modules."""
from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, init_parameter


class Module:
    """Attribute-registered parameter tree, in the spirit of torch.nn.Module."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """Affine map over the last axis; weight stored as [in, out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        self.weight = init_parameter((d_in, d_out), "uniform-fan-in", rng, dtype=dtype, fan_in=d_in)
        self.bias = init_parameter((d_out,), "zeros", rng, dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def macs(self, tokens: int) -> int:
        return tokens * self.weight.shape[0] * self.weight.shape[1]


class PointwiseConv(Module):
    """1x1 convolution over [B, C, T, N] with optional frame stride."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32,
                 stride: int = 1, bias: bool = True):
        self.weight = init_parameter((c_out, c_in), "uniform-fan-in", rng, dtype=dtype, fan_in=c_in)
        self.bias = init_parameter((c_out,), "zeros", rng, dtype=dtype) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.pointwise_conv(x, self.weight, self.bias, self.stride)


class TemporalConv(Module):
    """Kx1 convolution along frames (the TCN unit of the baseline)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32, stride: int = 1):
        self.weight = init_parameter((c_out, c_in, kernel), "uniform-fan-in", rng, dtype=dtype,
                                     fan_in=c_in * kernel)
        self.bias = init_parameter((c_out,), "zeros", rng, dtype=dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.temporal_conv(x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32, eps: float = 1e-5):
        self.gamma = init_parameter((dim,), "ones", rng, dtype=dtype)
        self.beta = init_parameter((dim,), "zeros", rng, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, axis=axis, eps=self.eps)


def name_parameters(module: Module, prefix: str = "") -> None:
    """Stamp registry names onto every Parameter (names are unique by construction)."""
    for name, p in module.named_parameters(prefix):
        p.name = name


def zero_(p: Optional[Parameter]) -> None:
    if p is not None:
        p.data[...] = 0
