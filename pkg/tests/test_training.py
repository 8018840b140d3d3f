import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from destine import model, synth, training
from destine.cli import prepare_splits
from destine.config import DataConfig
from destine.features import FieldSchema, load_csv, split
from destine.attention import Variant
from destine.model import ModelConfig
from destine.numerics import DomainError, SeededRng, ShapeError
from destine.training import AdamState, MetricsReport, EpochRecord, TrainConfig, adam_step, auc, logloss

TINY = ModelConfig(num_fields=3, total_features=12, embed_dim=4, head_dim=2, num_heads=2, num_layers=1,
                   dropout_rate=0.0, l2_weight=0.0)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


# ---- adam ------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_value():
    p = {"w": np.array(0.0)}
    adam_step(p, {"w": np.array(1.0)}, AdamState(0.001))
    # m_hat = 1, v_hat = 1 after bias correction
    assert float(p["w"]) == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_steps_approach_lr():
    p = {"w": np.array(0.0)}
    state = AdamState(0.01)
    prev = 0.0
    for _ in range(500):
        adam_step(p, {"w": np.array(-3.0)}, state)
        step, prev = float(p["w"]) - prev, float(p["w"])
    assert step == pytest.approx(0.01, rel=1e-6)
    assert state.t == 500 and np.all(state.v["w"] >= 0)


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    before = {k: v.copy() for k, v in p.items()}
    state = AdamState(0.0)
    for _ in range(3):
        adam_step(p, {k: rng.normal(size=v.shape) for k, v in p.items()}, state)
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())


@pytest.mark.parametrize("seed", range(20))
def test_single_adam_step_decreases_sample_loss(seed):
    c = replace(TINY, variant=list(Variant)[seed % 5])
    params = model.init_params(c, SeededRng(seed))
    params.tensors["embedding"][:] = np.random.default_rng(seed).normal(size=(12, 4))
    rng = np.random.default_rng(100 + seed)
    x = rng.integers(0, 12, size=(1, 3))
    y = np.array([float(seed % 2)])
    y_hat, cache = model.forward(x, params, c, "train")
    before = model.loss(y_hat, y)
    adam_step(params.tensors, model.backward(cache, y, params, c), AdamState(1e-4))
    after = model.loss(model.forward(x, params, c, "eval")[0], y)
    assert after < before


# ---- metrics ---------------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(DomainError):
        auc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(25))
def test_auc_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    scores = rng.integers(0, 8, size=n) / 8.0  # coarse grid forces ties
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 1, 0
    assert auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=50, deadline=None, derandomize=True)
@given(st.lists(st.tuples(st.floats(0.01, 10), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_invariant_under_increasing_transforms(pairs):
    scores = np.array([s for s, _ in pairs])
    labels = np.array([y for _, y in pairs])
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    base = auc(scores, labels)
    assert auc(2 * scores + 1, labels) == base
    assert auc(scores ** 3, labels) == base


def test_logloss_examples():
    assert logloss([0.5], [1]) == pytest.approx(math.log(2), rel=1e-15)
    assert logloss([0.9, 0.2], [1, 0]) == pytest.approx(0.164252, abs=1e-6)
    s, y = np.random.default_rng(0).random(30), np.random.default_rng(1).integers(0, 2, 30)
    assert logloss(s, y) == model.loss(s, y, None, 0.0)
    with pytest.raises(ShapeError):
        logloss([0.1, 0.2], [1])


def test_metrics_csv_format():
    r = MetricsReport([EpochRecord(1, 0.5, 0.75, 0.6)], 1, 0.8, 0.45)
    assert r.to_csv() == "epoch,train_loss,val_auc,val_logloss\n1,0.5,0.75,0.6\ntest,,0.8,0.45\n"


# ---- training loop ---------------------------------------------------------

def _toy_splits(n=600, seed=0):
    f1, f2, f3, y, _ = synth.generate(n, seed)
    x = np.stack([f1, 10 + f2, 20 + f3], axis=1)
    parts = np.split(np.arange(n), [int(0.8 * n), int(0.9 * n)])
    return [(x[p], y[p].astype(float)) for p in parts]


TOY = ModelConfig(num_fields=3, total_features=25, embed_dim=8, head_dim=4, num_heads=2, num_layers=1,
                  dropout_rate=0.2, l2_weight=0.0)


def test_zero_epochs_returns_initial_params():
    tr, va, te = _toy_splits()
    params, report = training.train(tr, va, te, TOY, TrainConfig(max_epochs=0, seed=3))
    init = model.init_params(TOY, SeededRng(3))
    for k in init.tensors:
        np.testing.assert_array_equal(params.tensors[k], init.tensors[k])
    assert report.epochs == [] and 0.0 <= report.test_auc <= 1.0


def test_training_is_deterministic():
    tr, va, te = _toy_splits()
    tc = TrainConfig(batch_size=32, max_epochs=3, seed=1)
    _, a = training.train(tr, va, te, TOY, tc)
    _, b = training.train(tr, va, te, TOY, tc)
    assert a.to_csv() == b.to_csv()


def test_no_patience_runs_every_epoch_and_keeps_best():
    tr, va, te = _toy_splits()
    best, report = training.train(tr, va, te, TOY, TrainConfig(batch_size=64, max_epochs=5, patience=None))
    assert [e.epoch for e in report.epochs] == [1, 2, 3, 4, 5]
    assert report.best_val_auc == max(e.val_auc for e in report.epochs)
    assert training.evaluate(best, TOY, *va)[0] == report.best_val_auc


def test_early_stopping_respects_patience():
    tr, va, te = _toy_splits()
    _, report = training.train(tr, va, te, replace(TOY, l2_weight=0.0),
                               TrainConfig(batch_size=64, max_epochs=40, patience=1, learning_rate=0.05))
    aucs = [e.val_auc for e in report.epochs]
    assert len(aucs) < 40
    assert aucs[-1] <= max(aucs[:-1])


def test_training_with_dnn_branch_runs():
    tr, va, te = _toy_splits()
    c = replace(TOY, use_dnn=True, dnn_widths=(8, 8))
    params, report = training.train(tr, va, te, c, TrainConfig(batch_size=33, max_epochs=2))
    assert np.any(params.buffers["dnn.0.running_mean"] != 0)
    assert len(report.epochs) == 2


def test_train_config_validation():
    with pytest.raises(model.ConfigError, match="patience"):
        TrainConfig(patience=0)
    with pytest.raises(model.ConfigError, match="batch_size"):
        TrainConfig(batch_size=0)


def test_l2_sweep_covers_grid():
    tr, va, te = _toy_splits()
    out = training.l2_sweep(tr, va, te, TOY, TrainConfig(max_epochs=1, batch_size=128))
    assert list(out) == [5e-3, 5e-4, 5e-5, 5e-6]


# ---- gradient check --------------------------------------------------------

GC = ModelConfig(num_fields=4, total_features=20, embed_dim=6, head_dim=4, num_heads=2, num_layers=2,
                 l2_weight=1e-3)


@pytest.mark.parametrize("variant", list(Variant))
def test_grad_check_passes(variant):
    report = training.grad_check(replace(GC, variant=variant))
    assert report.passed, report.lines()
    assert set(report.max_rel_error) == set(model.param_shapes(GC))


def test_grad_check_subsamples_large_tensors():
    report = training.grad_check(replace(GC, use_dnn=True, dnn_widths=(16, 16)), max_entries=50)
    assert report.passed
    assert max(report.checked.values()) == 50


def test_grad_check_rejects_large_config():
    with pytest.raises(DomainError, match="shrink"):
        training.grad_check(ModelConfig(num_fields=4, total_features=1000))


def test_grad_check_catches_corrupted_backward(monkeypatch):
    real = model.backward

    def broken(*args, **kwargs):
        g = real(*args, **kwargs)
        g["layers.0.heads.1.w_k"] = g["layers.0.heads.1.w_k"] * 1.01
        return g

    monkeypatch.setattr(model, "backward", broken)
    report = training.grad_check(GC)
    assert not report.passed
    failing = [n for n, e in report.max_rel_error.items() if e > report.tol]
    assert failing == ["layers.0.heads.1.w_k"]


def test_grad_check_tolerance_semantics():
    assert not training.grad_check(GC, tol=1e-12).passed


def test_constant_loss_when_output_frozen():
    params = model.init_params(GC, SeededRng(0))
    params.tensors["out_w"][:] = 0.0
    x = np.array([[0, 5, 10, 15], [1, 6, 11, 16]])
    y = np.array([1.0, 0.0])
    c = replace(GC, l2_weight=0.0, dropout_rate=0.0)
    _, cache = model.forward(x, params, c, "train")
    g = model.backward(cache, y, params, c)
    for name, t in g.items():
        if name not in ("out_w", "out_b"):
            np.testing.assert_array_equal(t, 0.0)


def test_l2_gradient_matches_central_difference():
    params = model.init_params(GC, SeededRng(1))
    w = params.tensors["layers.1.w_r"]
    h = 1e-5
    for i in range(w.size):
        flat = w.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = 0.01 * model.l2_penalty(params)
        flat[i] = orig - h
        fm = 0.01 * model.l2_penalty(params)
        flat[i] = orig
        assert (fp - fm) / (2 * h) == pytest.approx(2 * 0.01 * orig, rel=1e-6, abs=1e-12)


# ---- synthetic generator ---------------------------------------------------

def test_planted_set_is_balanced():
    s = synth.planted_pairs(SeededRng(0))
    assert s.sum() == 50
    assert np.all(s.sum(axis=0) == 5) and np.all(s.sum(axis=1) == 5)


def test_synth_marginals():
    f1, f2, f3, y, inside = synth.generate(10_000, 0)
    assert abs(y.mean() - 0.5) <= 0.02
    for v in range(10):
        assert abs(y[f1 == v].mean() - 0.5) <= 0.05
    assert abs(y[inside].mean() - 0.9) <= 0.02
    assert set(f3) == set(range(5))


def test_synth_deterministic_and_size():
    assert synth.to_csv(200, 4) == synth.to_csv(200, 4)
    assert synth.to_csv(200, 4) != synth.to_csv(200, 5)
    assert len(synth.to_csv(200, 4).splitlines()) == 201
    with pytest.raises(DomainError):
        synth.generate(99, 0)


def test_bayes_auc_by_enumeration():
    # population of (membership, label) cells weighted by probability
    cells = [(1, 1, 0.5 * 0.9), (1, 0, 0.5 * 0.1), (0, 1, 0.5 * 0.1), (0, 0, 0.5 * 0.9)]
    pos = [(s, w) for s, y, w in cells if y == 1]
    neg = [(s, w) for s, y, w in cells if y == 0]
    num = sum(wp * wn * (1.0 if sp > sn else 0.5 if sp == sn else 0.0) for sp, wp in pos for sn, wn in neg)
    den = sum(w for _, w in pos) * sum(w for _, w in neg)
    assert synth.bayes_auc() == pytest.approx(num / den, rel=1e-12)
    assert synth.bayes_auc() == pytest.approx(0.90, abs=1e-12)


def test_full_model_reaches_bayes_score_on_synth(tmp_path):
    """The attainable ceiling: Full tracks the Bayes scorer on identical test rows."""
    (tmp_path / "s.csv").write_text(synth.to_csv(10_000, 0))
    schema = FieldSchema(tuple((f, "categorical") for f in ("f1", "f2", "f3")))
    data = DataConfig(str(tmp_path / "s.csv"), schema)
    _, vocab, (tr, va, te) = prepare_splits(data)
    c = ModelConfig(num_fields=3, total_features=vocab.total_features, dropout_rate=0.2, l2_weight=0.0)
    _, report = training.train(tr, va, te, c, TrainConfig(max_epochs=20))

    planted = synth.planted_pairs(SeededRng(0))
    test_rows = split(load_csv(data.path, schema), data.ratios, data.split_seed)[2]
    letter = synth.F12_VALUES.index
    bayes = [float(planted[letter(r["f1"]), letter(r["f2"])]) for r in test_rows]
    bayes_test_auc = auc(bayes, [int(r["label"]) for r in test_rows])
    assert abs(report.test_auc - bayes_test_auc) <= 0.02
