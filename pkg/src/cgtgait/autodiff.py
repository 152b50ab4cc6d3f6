"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op builds its output from numpy arrays and, when any input tracks
gradients, records a closure mapping the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named, trainable tensor."""

    __slots__ = ("name", "init_scheme")

    def __init__(self, data, name: str = "", init_scheme: str = "uniform-fan-in"):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init_scheme = init_scheme

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def init_parameter(shape, scheme: str, rng: np.random.Generator, name: str = "",
                   dtype=np.float32, fan_in: Optional[int] = None) -> Parameter:
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif scheme == "ones":
        data = np.ones(shape, dtype=dtype)
    elif scheme == "uniform-fan-in":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Parameter(data, name=name, init_scheme=scheme)


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_last(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis (keepdims). A gemv beats ufunc.reduce by a wide margin here."""
    return (a @ np.ones(a.shape[-1], dtype=a.dtype))[..., None]


def _sum_lead(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except the last."""
    a2 = a.reshape(-1, a.shape[-1])
    return np.ones(a2.shape[0], dtype=a.dtype) @ a2


def _sum_axis(a: np.ndarray, axis: int) -> np.ndarray:
    if axis % a.ndim == a.ndim - 1:
        return _sum_last(a)
    return a.sum(axis=axis, keepdims=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        if grad.shape[extra:] == tuple(shape) and grad.flags.c_contiguous:
            return _sum_lead(grad.reshape(-1, max(1, int(np.prod(shape))))).reshape(shape)
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    # python scalars follow the other operand's precision
    if a.data.ndim == 0 and not a.requires_grad and a._backward is None:
        a = Tensor(a.data.astype(b.dtype))
    elif b.data.ndim == 0 and not b.requires_grad and b._backward is None:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return _result(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    # keep the open interval (0, 1) even where rounding would hit an endpoint
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    # materialise: downstream reshapes and matmuls would otherwise copy the strided view repeatedly
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for a {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axis)}")
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axes`` (all axes when None)."""
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return _result(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward)


def norm(x: Tensor, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm along one axis."""
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x.data / out,)

    data = out if keepdims else np.squeeze(out, axis=axis)
    return _result(data, (x,), backward)


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis, with ``w`` shaped [in, out]."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, _sum_lead(g2)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# ------------------------------------------------------------- fused kernels

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= _sum_axis(out, axis)

    def backward(g):
        gi = g * out
        gi -= out * _sum_axis(gi, axis)
        return (gi,)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(_sum_axis(np.exp(shifted), axis))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * _sum_axis(g, axis),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean / unit variance, then scale and shift."""
    axis = axis % x.ndim
    if gamma.shape != (x.shape[axis],) or beta.shape != (x.shape[axis],):
        raise ShapeError(
            f"layer_norm affine extents {gamma.shape}/{beta.shape} do not match axis extent {x.shape[axis]}")
    xm = np.moveaxis(x.data, axis, -1)
    n = xm.shape[-1]
    xc = xm - _sum_last(xm) / n
    var = _sum_last(xc * xc) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        ggamma = _sum_lead(gm * xhat) if gamma.requires_grad else None
        gbeta = _sum_lead(gm) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = gm * gamma.data
            gx = inv / n * (n * gh - _sum_last(gh) - xhat * _sum_last(gh * xhat))
            gx = np.moveaxis(gx, -1, axis)
        return gx, ggamma, gbeta

    return _result(np.moveaxis(out, -1, axis), (x, gamma, beta), backward)


def pointwise_conv(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """1x1 convolution over a [B, C_in, T, N] (or [C_in, T, N]) feature map.

    Stride applies along frames and keeps even-indexed frames.
    """
    if stride not in (1, 2):
        raise ValueError(f"temporal stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"pointwise_conv expects [B, C, T, N], got {x.shape}")
    if w.shape[1] != xd.shape[1]:
        raise ShapeError(f"pointwise_conv: weight expects {w.shape[1]} channels, input has {xd.shape[1]}")
    xs = xd[:, :, ::stride] if stride > 1 else xd
    B, Ci, T, N = xs.shape
    Co = w.shape[0]
    flat = xs.reshape(B, Ci, T * N)
    out = np.matmul(w.data, flat)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, Co, T, N)

    def backward(g):
        gd = g[None] if squeeze else g
        g2 = gd.reshape(B, Co, T * N)
        gx = None
        if x.requires_grad:
            gxs = np.matmul(w.data.T, g2).reshape(B, Ci, T, N)
            if stride > 1:
                full = np.zeros(xd.shape, dtype=gxs.dtype)
                full[:, :, ::stride] = gxs
                gxs = full
            gx = gxs[0] if squeeze else gxs
        gw = np.einsum("bot,bct->oc", g2, flat, optimize=True) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, _sum_last(g2).sum(axis=0)[:, 0]

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out[0] if squeeze else out, parents, backward)


def temporal_conv(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Kx1 convolution along frames of [B, C_in, T, N] with 'same' zero padding."""
    B, Ci, T, N = x.shape
    Co, Ci_w, K = w.shape
    if Ci_w != Ci:
        raise ShapeError(f"temporal_conv: weight expects {Ci_w} channels, input has {Ci}")
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (0, 0)))
    T_out = (T + 2 * pad - K) // stride + 1
    span = stride * (T_out - 1) + 1
    cols = np.stack([xp[:, :, k:k + span:stride] for k in range(K)], axis=2)  # B,Ci,K,T_out,N
    cols = cols.reshape(B, Ci * K, T_out * N)
    w2 = w.data.reshape(Co, Ci * K)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, Co, T_out, N)

    def backward(g):
        g2 = g.reshape(B, Co, T_out * N)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(B, Ci, K, T_out, N)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for k in range(K):
                gxp[:, :, k:k + span:stride] += gcols[:, :, k]
            gx = gxp[:, :, pad:pad + T]
        gw = np.einsum("bot,bct->oc", g2, cols, optimize=True).reshape(w.shape) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, _sum_last(g2).sum(axis=0)[:, 0]

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return reduce_mean(picked) * -1.0


# ------------------------------------------------------------ grad checking

class GradCheckError(RuntimeError):
    pass


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
               max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               return_details: bool = False):
    """Compare reverse-mode gradients against central differences.

    ``f`` is called without arguments and must return a scalar Tensor that
    depends on ``params``. Entries are perturbed in place and restored. When
    ``max_entries`` is given, that many entries per parameter are sampled.
    Returns the worst relative error, |a - n| / max(|a|, |n|, 1e-8).
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise GradCheckError("grad_check requires double-precision parameters")
        p.grad = None
    value = f()
    if not np.isfinite(value.data).all():
        raise GradCheckError("objective is not finite")
    value.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    details = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError("objective became non-finite under perturbation")
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            details.append((getattr(p, "name", ""), int(i), ana, num, err))
            worst = max(worst, err)
        p.grad = None
    if return_details:
        return worst, details
    return worst
