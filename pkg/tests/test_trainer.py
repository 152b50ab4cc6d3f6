import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgtgait.autodiff import Parameter
from cgtgait.checks import tiny_config
from cgtgait.skeleton import generate_dataset
from cgtgait.trainer import (SGD, TrainConfig, TrainingError, ablation_variants, augment_batch, confusion_matrix,
                             desk_model_config,
                             learning_rate, metrics_from_predictions, prepare, stratified_split, train)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(6, seed=3)


def tiny_train(**kw):
    base = dict(model=tiny_config(), epochs=2, batch_size=8, seed=0, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule and optimizer

@pytest.mark.parametrize("epoch, lr", [(0, 1e-2), (29, 1e-2), (30, 1e-3), (59, 1e-3), (60, 1e-4), (79, 1e-4)])
def test_step_schedule(epoch, lr):
    assert learning_rate(TrainConfig(), epoch) == pytest.approx(lr, rel=1e-12)


def test_momentum_update_by_hand():
    p = Parameter(np.array([1.0, -2.0]))
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0, 1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -2.1])
    p.grad = np.array([1.0, 1.0])
    opt.step()  # v = 0.9 * 1 + 1 = 1.9
    np.testing.assert_allclose(p.data, [0.71, -2.29])


def test_clipping_rescales_to_norm():
    p = Parameter(np.zeros(2))
    opt = SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0)
    p.grad = np.array([3.0, 4.0])
    assert opt.step() == pytest.approx(5.0)
    np.testing.assert_allclose(p.data, [-0.6, -0.8])


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=1)
    with pytest.raises(TrainingError):
        TrainConfig(optimizer="adam")
    with pytest.raises(TrainingError):
        TrainConfig.from_dict({"epochz": 3})
    cfg = tiny_train(epochs=7)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg


# ---------------------------------------------------------------- metrics

def test_perfect_predictions():
    y = np.array([0, 1, 2, 3, 3, 2])
    rep = metrics_from_predictions(y, y)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0
    assert rep.per_class_accuracy == [1.0] * 4


def test_constant_predictor_scores():
    y = np.repeat(np.arange(4), 5)
    rep = metrics_from_predictions(y, np.zeros_like(y))
    # class 0: precision 1/4, recall 1 -> F1 0.4; others 0
    assert rep.accuracy == pytest.approx(0.25)
    assert rep.macro_f1 == pytest.approx(0.1)
    assert rep.confusion[0] == [5, 0, 0, 0] and [r[0] for r in rep.confusion] == [5] * 4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    t, p = np.array(pairs).T
    cm = confusion_matrix(t, p)
    assert cm.sum() == len(pairs)
    np.testing.assert_array_equal(cm.sum(1), np.bincount(t, minlength=4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = metrics_from_predictions(t, p)
    assert rep.accuracy == pytest.approx(np.mean(t == p))
    assert 0.0 <= rep.macro_f1 <= 1.0


def test_absent_class_warns_and_scores_zero():
    y = np.array([0, 0, 1, 2])
    with pytest.warns(UserWarning, match="neutral"):
        rep = metrics_from_predictions(y, y)
    assert rep.per_class_accuracy[3] is None and rep.per_class_f1[3] == 0.0
    assert rep.macro_f1 == pytest.approx(0.75)


# ---------------------------------------------------------------- data handling

@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=8, max_size=80), st.integers(0, 100))
def test_split_disjoint_exhaustive_deterministic(labels, seed):
    labels = np.array(labels)
    tr, te = stratified_split(labels, 0.9, seed)
    assert not set(tr) & set(te)
    assert sorted(np.concatenate([tr, te])) == list(range(len(labels)))
    tr2, te2 = stratified_split(labels, 0.9, seed)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)


def test_preset_split_sizes():
    labels = np.repeat(np.arange(4), 120)
    tr, te = stratified_split(labels, 0.9, 0)
    assert len(tr) == 432 and len(te) == 48
    assert np.bincount(labels[te]).tolist() == [12] * 4


def test_batch_augmentation_is_rigid(small_data):
    d = prepare(small_data[:4])
    out = augment_batch(d.frames, np.random.default_rng(0))
    for a, b in zip(d.frames, out):
        da = np.linalg.norm(a[:, 0] - a[:, 5], axis=-1)
        db = np.linalg.norm(b[:, 0] - b[:, 5], axis=-1)
        np.testing.assert_allclose(da, db, rtol=1e-9)


def test_training_rejects_bad_data(small_data):
    with pytest.raises(TrainingError):
        train(tiny_train(), [])
    one_class = [s for s in small_data if s.label == 1]
    with pytest.raises(TrainingError):
        train(tiny_train(), one_class)
    with pytest.raises(TrainingError):
        train(tiny_train(batch_size=64), small_data)


# ---------------------------------------------------------------- training loop

def test_same_seed_same_run(small_data):
    a = train(tiny_train(), small_data)
    b = train(tiny_train(), small_data)
    assert a.history[0]["total"] == b.history[0]["total"]
    assert a.final_report.confusion == b.final_report.confusion
    c = train(tiny_train(seed=1), small_data)
    assert c.history[0]["total"] != a.history[0]["total"]


def test_history_and_best_epoch(small_data):
    res = train(tiny_train(epochs=3), small_data)
    assert [h["epoch"] for h in res.history] == [0, 1, 2]
    accs = [h["test_accuracy"] for h in res.history]
    assert res.best_accuracy == max(accs) and res.best_epoch == accs.index(max(accs))
    assert res.final_report.accuracy == pytest.approx(res.best_accuracy)
    assert res.steps == 3 * (len(res.train_idx) // 8)
    assert res.final_report.complexity["parameters"] == res.model.num_parameters()


def test_max_steps_stops_early(small_data):
    res = train(tiny_train(epochs=10, max_steps=3), small_data)
    assert res.steps == 3 and len(res.history) == 2


def test_overfit_mode_uses_every_sample(small_data):
    res = train(tiny_train(overfit=True, epochs=1), small_data)
    assert np.array_equal(res.train_idx, res.test_idx) and len(res.train_idx) == len(small_data)


def test_ablation_variant_sets():
    base = tiny_config()
    assert list(ablation_variants(base, "fusion_parts")) == ["none", "SF", "TF", "SF+TF"]
    assert len(ablation_variants(base, "bcsf_position")) == base.num_blocks
    assert list(ablation_variants(desk_model_config(), "heads")) == ["h2", "h4", "h8", "h16"]
    assert list(ablation_variants(base, "block_count")) == ["3_blocks", "4_blocks", "5_blocks", "6_blocks"]
    with pytest.raises(ValueError):
        ablation_variants(base, "depth")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_reported(small_data):
    cfg = tiny_train(initial_lr=1e6, grad_clip=None, epochs=3)
    with pytest.raises(TrainingError, match="non-finite"):
        train(cfg, small_data)
