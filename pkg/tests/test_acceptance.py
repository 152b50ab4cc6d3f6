"""Acceptance suite: one PASS/FAIL line per criterion.

Run with pytest (lines are repeated in the terminal summary) or directly:
``python3 tests/test_acceptance.py``.
"""
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from cgtgait import autodiff as ad
from cgtgait.autodiff import Tensor
from cgtgait.checks import run_gradcheck
from cgtgait.graph import GraphConv, build_physical_adjacency
from cgtgait.network import CGTGait, LossWeights, ModelConfig, Outputs, count_complexity, total_loss, with_block_count
from cgtgait.trainer import ABLATION_AXES, TrainConfig, ablate, ablation_variants, desk_model_config, train
from cgtgait.transformer import TemporalTransformer

RESULTS = {}

# the overfit and benchmark runs use the quarter-width model sized for one CPU core
OVERFIT_STEPS = 300
BENCH_EPOCHS = 30
ABLATION_EPOCHS = 10


def record(num, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num:>2}: {detail}"
    RESULTS[num] = line
    print(line)
    return ok


# ---------------------------------------------------------------- 1

def test_c01_gradient_suite():
    t0 = time.time()
    results = run_gradcheck(seed=0)
    secs = time.time() - t0
    ops = [r for r in results if r.module != "network"]
    e2e = [r for r in results if r.module == "network"]
    op_err = max(r.max_rel_error for r in ops)
    e2e_err = max(r.max_rel_error for r in e2e)
    ok = op_err < 1e-4 and e2e_err < 1e-3 and secs < 120
    assert record(1, ok, f"{len(ops)} op/module checks max rel err {op_err:.2e} (<1e-4), "
                         f"end-to-end {e2e_err:.2e} (<1e-3), {secs:.0f}s (<120s)")


# ---------------------------------------------------------------- 2

def test_c02_attention_oracle():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = TemporalTransformer(8, 6, 1, rng, np.float64)
        for p in m.parameters():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
        x = rng.normal(size=(2, 3, 6, 8))
        Q, K, V = (x @ m.wq.weight.data, x @ m.wk.weight.data, x @ m.wv.weight.data)
        s = Q @ np.swapaxes(K, -1, -2) / math.sqrt(8)
        A = np.exp(s - s.max(-1, keepdims=True))
        A /= A.sum(-1, keepdims=True)
        ref = (A @ V) @ m.wo.weight.data + m.wo.bias.data
        worst = max(worst, float(np.abs(m.mhsa(Tensor(x)).data - ref).max()))
    assert record(2, worst < 1e-6, f"single-head attention vs direct formula, 10 inputs, max abs err {worst:.1e}")


# ---------------------------------------------------------------- 3

def test_c03_equivariance():
    rng = np.random.default_rng(0)
    perm = rng.permutation(16)
    g = GraphConv(3, 8, np.random.default_rng(1), np.float64)
    for p in g.parameters():
        p.data[...] = rng.normal(scale=0.4, size=p.shape)
    A = build_physical_adjacency()
    g2 = GraphConv(3, 8, np.random.default_rng(2), np.float64, adjacency=A[:, perm][:, :, perm])
    g2.load_state_dict(g.state_dict())
    g2.B.data[...] = g.B.data[:, perm][:, :, perm]
    x = rng.normal(size=(2, 3, 10, 16))
    graph_err = float(np.abs(g2(Tensor(x[..., perm])).data - g(Tensor(x)).data[..., perm]).max())

    m = TemporalTransformer(8, 10, 2, np.random.default_rng(3), np.float64, positional=False)
    y = rng.normal(size=(2, 4, 10, 8))
    tperm = rng.permutation(10)
    attn_err = float(np.abs(m.mhsa(Tensor(y[:, :, tperm])).data - m.mhsa(Tensor(y)).data[:, :, tperm]).max())
    ok = graph_err < 1e-6 and attn_err < 1e-6
    assert record(3, ok, f"joint permutation err {graph_err:.1e}, frame permutation err {attn_err:.1e} (<1e-6)")


# ---------------------------------------------------------------- 4

def all_variants(base):
    out = {}
    for axis in ABLATION_AXES:
        for name, cfg in ablation_variants(base, axis).items():
            out[f"{axis}/{name}"] = cfg
    return out


def test_c04_shape_pipeline():
    x = np.random.default_rng(0).normal(size=(1, 3, 48, 16))
    bad = []
    variants = all_variants(ModelConfig())
    for name, cfg in variants.items():
        out = CGTGait(cfg, seed=0)(x)
        shapes_ok = out.features_p.shape[1:] == out.features_m.shape[1:] == (256, 12, 16)
        sums_ok = all(abs(float(p.data.sum()) - 1.0) < 1e-6 and p.shape == (1, 4)
                      for p in (out.probs_p, out.probs_m))
        if not (shapes_ok and sums_ok):
            bad.append(name)
    assert record(4, not bad, f"{len(variants)} ablation variants give 256x12x16 features and unit-sum "
                              f"4-class rows" + (f"; failing: {bad}" if bad else ""))


# ---------------------------------------------------------------- 5

def test_c05_complexity_budget():
    full = count_complexity(ModelConfig())
    params_ok = abs(full.parameters - 2.66e6) / 2.66e6 <= 0.25
    flops_ok = 0.34e9 / 2 <= full.flops <= 0.34e9 * 2
    by_blocks = [count_complexity(with_block_count(ModelConfig(), b)).flops for b in (3, 4, 5, 6)]
    order_ok = all(a < b for a, b in zip(by_blocks, by_blocks[1:]))
    by_heads = {count_complexity(replace(ModelConfig(), heads=h)).flops for h in (2, 4, 8, 16)}
    heads_ok = len(by_heads) == 1
    ok = params_ok and flops_ok and order_ok and heads_ok
    detail = (f"params {full.parameters / 1e6:.3f}M ({'ok' if params_ok else 'out of'} 2.66M±25%), "
              f"FLOPs {full.flops / 1e9:.3f}G ({'ok' if flops_ok else 'outside'} 0.17-0.68G), "
              f"3-6 block FLOPs {[round(f / 1e9, 3) for f in by_blocks]} strictly increasing={order_ok}, "
              f"head-invariant={heads_ok}")
    assert record(5, ok, detail)


# ---------------------------------------------------------------- 6

def test_c06_overfit():
    cfg = TrainConfig(model=desk_model_config(), overfit=True, epochs=OVERFIT_STEPS, batch_size=32,
                      data={"class_counts": 8, "seed": 0}, max_steps=OVERFIT_STEPS,
                      stop_at_train_accuracy=1.0, lr_step=10 ** 6, eval_every=5)
    t0 = time.time()
    res = train(cfg)
    secs = time.time() - t0
    acc = max(h.get("train_accuracy", 0.0) for h in res.history)
    ok = acc == 1.0 and res.steps <= OVERFIT_STEPS and secs < 300
    assert record(6, ok, f"32 samples: train accuracy {acc:.3f} after {res.steps} steps "
                         f"(<= {OVERFIT_STEPS}), {secs:.0f}s (<300s)")


# ---------------------------------------------------------------- 7

def test_c07_synthetic_benchmark():
    cfg = TrainConfig(model=desk_model_config(), epochs=BENCH_EPOCHS)
    t0 = time.time()
    full = train(cfg)
    base = train(replace(cfg, model=cfg.model.baseline()))
    secs = time.time() - t0
    ok = full.best_accuracy >= 0.9 and full.best_accuracy > base.best_accuracy and secs < 900
    assert record(7, ok, f"480-sequence preset, {BENCH_EPOCHS} epochs: full {full.best_accuracy:.3f} "
                         f"(>= 0.90) vs baseline {base.best_accuracy:.3f}, {secs:.0f}s (<900s)")


# ---------------------------------------------------------------- 8

def test_c08_loss_identities():
    model = CGTGait(desk_model_config(), seed=0, dtype=np.float64)
    y = np.array([0, 1, 2, 3])
    zeros = Tensor(np.zeros((4, 4)))
    aff = np.random.default_rng(0).normal(size=(4, 31))
    uniform = Outputs(zeros, zeros, ad.softmax(zeros), ad.softmax(zeros), Tensor(aff), [], [], zeros, zeros)
    res = total_loss(uniform, y, aff, LossWeights([0.0] * 4), model)
    ce_err = abs(res.ce - 2 * math.log(4))
    x = np.random.default_rng(1).normal(size=(4, 3, 48, 16))
    real = model.loss(model(x), y, aff, LossWeights([0.0] * 4))
    ok = ce_err < 1e-6 and res.mse == 0.0 and res.fr == 0.0 and real.fr == 0.0
    assert record(8, ok, f"uniform CE err {ce_err:.1e}, matched affective MSE {res.mse}, "
                         f"zero-weight FR {real.fr}")


# ---------------------------------------------------------------- 9

def test_c09_determinism():
    cfg = TrainConfig(model=desk_model_config(), epochs=2, data={"class_counts": 12, "seed": 1})
    a, b = train(cfg), train(cfg)
    same_loss = a.history[0]["total"] == b.history[0]["total"]
    same_cm = a.final_report.confusion == b.final_report.confusion
    assert record(9, same_loss and same_cm, f"epoch-0 loss {a.history[0]['total']!r} vs "
                                             f"{b.history[0]['total']!r}, confusion equal={same_cm}")


# ---------------------------------------------------------------- 10

def test_c10_ablation_harness(tmp_path):
    cfg = TrainConfig(model=desk_model_config(), epochs=ABLATION_EPOCHS, data={"class_counts": 10, "seed": 2})
    t0 = time.time()
    reports = {}
    for axis in ABLATION_AXES:
        rep = ablate(cfg, axis)
        path = tmp_path / f"{axis}.json"
        path.write_text(json.dumps(rep))
        reports[axis] = json.loads(path.read_text())
    expected = {axis: len(ablation_variants(cfg.model, axis)) for axis in ABLATION_AXES}
    got = {axis: len(r["variants"]) for axis, r in reports.items()}
    fields_ok = all({"variant", "accuracy", "flops", "parameters"} <= set(v)
                    for r in reports.values() for v in r["variants"])
    ok = got == expected and fields_ok
    assert record(10, ok, f"{sum(got.values())} variants over {len(got)} axes, {ABLATION_EPOCHS} epochs each, "
                          f"JSON reports written, {time.time() - t0:.0f}s")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
