import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgtgait import autodiff as ad
from cgtgait.autodiff import Tensor
from cgtgait.checks import transformer_checks
from cgtgait.transformer import (CGTBlock, ConfigError, FRHeadState, TemporalConvUnit, TemporalTransformer,
                                 infonce, l2_normalize, multi_head_attention, update_prototypes)

F64 = np.float64


def tt(c=8, t=6, h=2, stride=1, seed=0, positional=True):
    return TemporalTransformer(c, t, h, np.random.default_rng(seed), F64, stride=stride, positional=positional)


def randomize(m, seed=1, scale=0.4):
    rng = np.random.default_rng(seed)
    for p in m.parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)


def brute_attention(q, k, v, heads):
    """Loop over heads and frames with explicit exp/sum."""
    T, C = q.shape[-2:]
    d = C // heads
    out = np.zeros_like(q)
    for idx in np.ndindex(q.shape[:-2]):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            for i in range(T):
                s = np.array([q[idx][i, sl] @ k[idx][j, sl] for j in range(T)]) / math.sqrt(d)
                w = np.exp(s - s.max())
                w /= w.sum()
                out[idx][i, sl] = w @ v[idx][:, sl]
    return out


# ---------------------------------------------------------------- attention

@pytest.mark.parametrize("seed", range(10))
def test_single_head_matches_direct_formula(seed):
    m = tt(c=6, t=5, h=1, seed=seed)
    randomize(m, seed)
    x = np.random.default_rng(seed).normal(size=(2, 3, 5, 6))
    Wq, Wk, Wv = m.wq.weight.data, m.wk.weight.data, m.wv.weight.data
    Q, K, V = x @ Wq, x @ Wk, x @ Wv
    scores = Q @ np.swapaxes(K, -1, -2) / math.sqrt(6)
    A = np.exp(scores - scores.max(-1, keepdims=True))
    A /= A.sum(-1, keepdims=True)
    ref = (A @ V) @ m.wo.weight.data + m.wo.bias.data
    assert np.abs(m.mhsa(Tensor(x)).data - ref).max() < 1e-6


@pytest.mark.parametrize("heads", [1, 2, 4, 8])
def test_multi_head_matches_per_head_loop(heads):
    rng = np.random.default_rng(heads)
    q, k, v = rng.normal(size=(3, 2, 5, 8))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads).data
    np.testing.assert_allclose(out, brute_attention(q, k, v, heads), atol=1e-12)


def test_constant_keys_give_time_mean_of_values():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(4, 7, 8))
    k = np.repeat(rng.normal(size=(4, 1, 8)), 7, axis=1)
    v = rng.normal(size=(4, 7, 8))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2).data
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(1, keepdims=True), out.shape), atol=1e-12)


def test_attention_shape():
    x = Tensor(np.zeros((16, 48, 64)))
    assert multi_head_attention(x, x, x, 8).shape == (16, 48, 64)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        tt(c=6, h=4)
    x = Tensor(np.zeros((2, 5, 6)))
    with pytest.raises(ConfigError):
        multi_head_attention(x, x, x, 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_mhsa_without_positions_is_time_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    m = tt(c=8, t=6, h=2, seed=seed % 5, positional=False)
    x = rng.normal(size=(2, 3, 6, 8))
    perm = rng.permutation(6)
    a = m.mhsa(Tensor(x)).data[:, :, perm]
    b = m.mhsa(Tensor(x[:, :, perm])).data
    assert np.abs(a - b).max() < 1e-6


def test_positional_embedding_breaks_time_symmetry():
    m = tt(c=8, t=6, h=2)
    randomize(m)
    x = np.random.default_rng(2).normal(size=(1, 8, 6, 3))
    perm = np.array([1, 0, 2, 3, 4, 5])
    a = m.core(Tensor(x)).data[:, :, perm]
    b = m.core(Tensor(x[:, :, perm])).data
    assert np.abs(a - b).max() > 1e-3


# ---------------------------------------------------------------- transformer module

@pytest.mark.parametrize("t, stride, t_out", [(24, 1, 24), (24, 2, 12), (7, 2, 4)])
def test_frame_count_after_stride(t, stride, t_out):
    m = tt(c=8, t=t, stride=stride)
    assert m(Tensor(np.zeros((1, 8, t, 16)))).shape == (1, 8, t_out, 16)


def test_zero_output_projections_collapse_to_layer_norms():
    m = tt(c=8, t=6, h=2, stride=2)
    randomize(m)
    for p in (m.wo.weight, m.wo.bias, m.ffn2.weight, m.ffn2.bias):
        p.data[...] = 0.0
    x = np.random.default_rng(3).normal(size=(2, 8, 6, 4))
    tokens = Tensor(np.transpose(x, (0, 3, 2, 1)) + m.pos.data)
    ref = m.ln2(m.ln1(tokens))
    ref = m.down(ad.transpose(ref, (0, 3, 2, 1))).data
    np.testing.assert_allclose(m(Tensor(x)).data, ref, atol=1e-12)


def test_tcn_unit_strides():
    u = TemporalConvUnit(4, np.random.default_rng(0), F64, stride=2)
    assert u(Tensor(np.zeros((1, 4, 24, 16)))).shape == (1, 4, 12, 16)
    assert u.conv.weight.shape == (4, 4, 9)


# ---------------------------------------------------------------- CGT block

def test_block_shapes_for_first_and_last_stage():
    rng = np.random.default_rng(0)
    b1 = CGTBlock(3, 64, 48, 1, 8, rng)
    assert b1(Tensor(np.zeros((1, 3, 48, 16), dtype=np.float32))).shape == (1, 64, 48, 16)
    b4 = CGTBlock(128, 256, 24, 2, 8, rng)
    assert b4(Tensor(np.zeros((1, 128, 24, 16), dtype=np.float32))).shape == (1, 256, 12, 16)


@pytest.mark.parametrize("order", ["gcn-transformer", "transformer-gcn", "parallel"])
@pytest.mark.parametrize("temporal", ["transformer", "tcn"])
def test_block_is_branch_plus_residual(order, temporal):
    blk = CGTBlock(3, 8, 6, 2, 2, np.random.default_rng(1), F64, order=order, temporal=temporal)
    randomize(blk)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 6, 16)))
    whole = blk(x).data
    parts = blk.branch(x).data + blk.residual(x).data
    assert np.abs(whole - parts).max() < 1e-6
    assert whole.shape == (2, 8, 3, 16)


def test_block_rejects_unknown_options():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        CGTBlock(3, 8, 6, 1, 2, rng, order="zigzag")
    with pytest.raises(ConfigError):
        CGTBlock(3, 8, 6, 1, 2, rng, temporal="lstm")


def test_block_and_module_gradients():
    bad = [(r.name, r.max_rel_error) for r in transformer_checks(seed=3) if not r.passed]
    assert not bad


# ---------------------------------------------------------------- FR head

def test_infonce_closed_form():
    protos = np.eye(4, 5)
    z = Tensor(protos[[2]])
    loss = infonce(z, protos, np.array([2]), temperature=0.1).item()
    expected = -math.log(math.exp(10) / (math.exp(10) + 3))
    assert loss == pytest.approx(expected, rel=1e-9)
    assert loss == pytest.approx(1.36e-4, rel=1e-2)


def test_identical_prototypes_give_log4():
    protos = np.tile(np.array([[0.6, 0.8, 0.0]]), (4, 1))
    z = l2_normalize(Tensor(np.random.default_rng(0).normal(size=(5, 3))))
    out = ad.cross_entropy(ad.matmul(z, Tensor(protos.T)) * 10.0, np.array([0, 1, 2, 3, 0]))
    assert out.item() == pytest.approx(math.log(4), abs=1e-12)
    assert infonce(z, protos, np.array([0, 1, 2, 3, 0]), 0.1).item() == pytest.approx(math.log(4), abs=1e-12)


def test_unconfident_batch_leaves_prototypes():
    st0 = FRHeadState(np.random.default_rng(0).normal(size=(4, 6)))
    z = np.random.default_rng(1).normal(size=(3, 6))
    st1 = update_prototypes(st0, z, np.array([0, 1, 2]), np.array([0.5, 0.8, 0.1]))
    np.testing.assert_array_equal(st1.prototypes, st0.prototypes)


def test_confident_sample_moves_its_prototype_only():
    st0 = FRHeadState(np.eye(4, 6))
    z = np.zeros((1, 6))
    z[0, 5] = 1.0
    st1 = update_prototypes(st0, z, np.array([1]), np.array([0.95]))
    expected = 0.9 * np.eye(4, 6)[1] + 0.1 * z[0]
    np.testing.assert_allclose(st1.prototypes[1], expected / np.linalg.norm(expected))
    np.testing.assert_array_equal(np.delete(st1.prototypes, 1, 0), np.delete(np.eye(4, 6), 1, 0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_prototype_norm_bounded(seed, steps):
    rng = np.random.default_rng(seed)
    state = FRHeadState.empty(4, 8)
    for _ in range(steps):
        z = rng.normal(size=(6, 8))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        state = update_prototypes(state, z, rng.integers(0, 4, 6), rng.uniform(0, 1, 6))
        assert (np.linalg.norm(state.prototypes, axis=1) <= 1 + 1e-12).all()


def test_momentum_must_lie_in_unit_interval():
    with pytest.raises(ConfigError):
        FRHeadState(np.zeros((4, 3)), momentum=1.0)
