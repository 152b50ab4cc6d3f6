"""Finite-difference gradient checks for every differentiable building block."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .bcsf import BCSF
from .graph import GraphConv
from .network import CGTGait, ModelConfig
from .nn import Linear
from .transformer import CGTBlock, FRHeadState, TemporalConvUnit, TemporalTransformer, fr_contrastive

F64 = np.float64
OP_TOLERANCE = 1e-4
E2E_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    module: str
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _leaf(rng, shape, lo=-1.0, hi=1.0, away_from_zero=False) -> Tensor:
    x = rng.uniform(lo, hi, size=shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Contract an output with a fixed random weight so every entry matters."""
    w = Tensor(rng.normal(size=out.shape))
    return ad.reduce_sum(ad.mul(out, w))


def _randomize(module, rng, scale=0.3) -> None:
    """Zero-initialised parameters (B, positional table) would hide gradient paths."""
    for p in module.parameters():
        if not np.any(p.data):
            p.data[...] = rng.normal(scale=scale, size=p.shape)


def _op_cases(rng) -> Dict[str, Callable[[], tuple]]:
    seed = int(rng.integers(2 ** 31))

    def W(out: Tensor) -> Tensor:
        return _weighted(out, np.random.default_rng(seed))

    def binary(op, **kw):
        def make():
            a, b = _leaf(rng, (3, 4), **kw), _leaf(rng, (4,), **kw)
            return (lambda: W(op(a, b))), [a, b]
        return make

    cases = {}
    cases["add"] = binary(ad.add)
    cases["sub"] = binary(ad.sub)
    cases["mul"] = binary(ad.mul)
    cases["div"] = binary(ad.div, away_from_zero=True)

    def unary(op, **kw):
        def make():
            x = _leaf(rng, (3, 5), **kw)
            return (lambda: W(op(x))), [x]
        return make

    cases["power"] = unary(lambda x: ad.power(x, 3.0), away_from_zero=True)
    cases["exp"] = unary(ad.exp)
    cases["log"] = unary(ad.log, lo=0.2, hi=2.0)
    cases["sqrt"] = unary(ad.sqrt, lo=0.2, hi=2.0)
    cases["relu"] = unary(ad.relu, away_from_zero=True)
    cases["sigmoid"] = unary(ad.sigmoid, lo=-4, hi=4)
    cases["tanh"] = unary(ad.tanh)
    cases["reshape"] = unary(lambda x: ad.reshape(x, (5, 3)))
    cases["transpose"] = unary(ad.transpose)
    cases["swapaxes"] = unary(lambda x: ad.swapaxes(x, 0, 1))
    cases["getitem"] = unary(lambda x: ad.getitem(x, (np.array([0, 2, 0]), slice(1, 4))))
    cases["reduce_sum"] = unary(lambda x: ad.reduce_sum(x, axis=1, keepdims=True))
    cases["reduce_mean"] = unary(lambda x: ad.reduce_mean(x, axes=0))
    cases["norm"] = unary(lambda x: ad.norm(x, axis=-1, eps=1e-12))
    cases["softmax"] = unary(lambda x: ad.softmax(x, axis=1))
    cases["log_softmax"] = unary(lambda x: ad.log_softmax(x, axis=0))

    def concat():
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
        return (lambda: W(ad.concatenate([a, b], axis=1))), [a, b]

    def stack():
        a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
        return (lambda: W(ad.stack([a, b], axis=1))), [a, b]

    def matmul():
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
        return (lambda: W(ad.matmul(a, b))), [a, b]

    def linear():
        x, w, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,))
        return (lambda: W(ad.linear(x, w, b))), [x, w, b]

    def layer_norm():
        x, g, b = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
        return (lambda: W(ad.layer_norm(x, g, b))), [x, g, b]

    def pointwise(stride):
        def make():
            x, w, b = _leaf(rng, (2, 3, 5, 4)), _leaf(rng, (4, 3)), _leaf(rng, (4,))
            return (lambda: W(ad.pointwise_conv(x, w, b, stride))), [x, w, b]
        return make

    def temporal(stride):
        def make():
            x, w, b = _leaf(rng, (2, 3, 7, 4)), _leaf(rng, (2, 3, 5)), _leaf(rng, (2,))
            return (lambda: W(ad.temporal_conv(x, w, b, stride))), [x, w, b]
        return make

    def xent():
        x = _leaf(rng, (5, 4), lo=-3, hi=3)
        y = np.array([0, 3, 1, 2, 1])
        return (lambda: ad.cross_entropy(x, y)), [x]

    cases.update({"concatenate": concat, "stack": stack, "matmul": matmul, "linear": linear,
                  "layer_norm": layer_norm, "pointwise_conv": pointwise(1),
                  "pointwise_conv_stride2": pointwise(2), "temporal_conv": temporal(1),
                  "temporal_conv_stride2": temporal(2), "cross_entropy": xent})
    return cases


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, make in _op_cases(rng).items():
        f, params = make()
        out.append(CheckResult("autodiff", name, grad_check(f, params), OP_TOLERANCE))
    return out


def _module_check(module_name, name, module, inputs, fwd, rng, tol=OP_TOLERANCE, max_entries=6):
    _randomize(module, rng)
    w_rng_seed = int(rng.integers(2 ** 31))

    def f():
        return _weighted(fwd(), np.random.default_rng(w_rng_seed))

    params = list(inputs) + module.parameters()
    err = grad_check(f, params, max_entries=max_entries, rng=np.random.default_rng(w_rng_seed))
    return CheckResult(module_name, name, err, tol)


def graph_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    g = GraphConv(4, 6, rng, F64)
    x = _leaf(rng, (2, 4, 5, 16))
    return [_module_check("graph-conv", "GraphConv", g, [x], lambda: g(x), rng)]


def transformer_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    res = []
    tt = TemporalTransformer(4, 6, 2, rng, F64, stride=2)
    x = _leaf(rng, (2, 4, 6, 3))
    res.append(_module_check("temporal-transformer", "TemporalTransformer", tt, [x], lambda: tt(x), rng))
    tc = TemporalConvUnit(4, rng, F64, stride=2)
    res.append(_module_check("temporal-transformer", "TemporalConvUnit", tc, [x], lambda: tc(x), rng))
    for order in ("gcn-transformer", "transformer-gcn", "parallel"):
        blk = CGTBlock(3, 4, 6, 2, 2, rng, F64, order=order)
        xb = _leaf(rng, (2, 3, 6, 16))
        res.append(_module_check("temporal-transformer", f"CGTBlock[{order}]", blk, [xb],
                                 lambda b=blk, v=xb: b(v), rng))
    proj = Linear(4, 8, rng, F64)
    state = FRHeadState(_unit_rows(rng, 4, 8))
    feats = _leaf(rng, (5, 4, 3, 2))
    labels = np.array([0, 1, 2, 3, 1])
    conf = np.full(5, 0.9)

    def fr():
        return fr_contrastive(feats, labels, conf, proj, state)[0]

    err = grad_check(fr, [feats] + proj.parameters())
    res.append(CheckResult("temporal-transformer", "fr_contrastive", err, OP_TOLERANCE))
    return res


def bcsf_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    res = []
    for t_on, s_on in ((True, True), (True, False), (False, True)):
        b = BCSF(4, 16, 2, rng, F64, temporal=t_on, spatial=s_on)
        fp, fm = _leaf(rng, (2, 4, 3, 16)), _leaf(rng, (2, 4, 3, 16))

        def fwd(b=b, fp=fp, fm=fm):
            p, m = b(fp, fm)
            return ad.concatenate([p, m], axis=1)

        tag = "+".join(n for n, on in (("TF", t_on), ("SF", s_on)) if on)
        res.append(_module_check("bcsf", f"BCSF[{tag}]", b, [fp, fm], fwd, rng))
    return res


def _unit_rows(rng, n, d):
    p = rng.normal(size=(n, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def tiny_config(**kw) -> ModelConfig:
    base = dict(channels=[[3, 4], [4, 4], [4, 8], [8, 8]], heads=2, frames=8, fr_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def network_checks(seed: int = 0, max_entries: int = 3) -> List[CheckResult]:
    """End-to-end total loss on a two-sample batch, with random prototypes so the FR path is live."""
    rng = np.random.default_rng(seed)
    model = CGTGait(tiny_config(), seed=seed, dtype=F64)
    _randomize(model, rng)
    for row in model.fr_states:
        for i, st in enumerate(row):
            row[i] = FRHeadState(_unit_rows(rng, 4, 8))
    x = rng.normal(size=(2, 3, 8, 16))
    y = np.array([1, 3])
    y_a = rng.normal(size=(2, 31))

    def f():
        return model.loss(model(x), y, y_a).total

    err = grad_check(f, model.parameters(), max_entries=max_entries, rng=np.random.default_rng(seed))
    return [CheckResult("network", "total_loss", err, E2E_TOLERANCE)]


SUITES = {
    "autodiff": op_checks,
    "graph-conv": graph_checks,
    "temporal-transformer": transformer_checks,
    "bcsf": bcsf_checks,
    "network": network_checks,
}


def run_gradcheck(module: Optional[str] = None, seed: int = 0) -> List[CheckResult]:
    if module is not None and module not in SUITES:
        raise ValueError(f"unknown module {module!r}; choose from {sorted(SUITES)}")
    names = [module] if module else list(SUITES)
    out = []
    for n in names:
        out.extend(SUITES[n](seed))
    return out
