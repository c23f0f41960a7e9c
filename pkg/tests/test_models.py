import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subspace_margins.datasets import LabeledDataset, T1Params, gen_t1
from subspace_margins.models import (Model, TrainConfig, TrainingDivergedError, epoch_permutation, finetune,
                                     input_loss_gradient, learning_rate, linear_onestep, load_checkpoint,
                                     loss_and_grads, save_checkpoint, train_sgd)


def fd_input_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def min_abs_preactivation(model, x):
    _, pre = model._forward(x[None])
    return min(np.abs(z).min() for z in pre[:-1]) if len(pre) > 1 else np.inf


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# --- forward ---------------------------------------------------------------------------------

def test_linear_forward():
    m = Model.linear([3.0, 4.0], 0.0)
    assert m.forward(np.array([1.0, 1.0]))[0] == 7.0
    assert m.predict(np.array([[1.0, 1.0], [-1.0, -1.0]])).tolist() == [1, -1]


def test_zero_mlp_ties():
    m = Model.mlp(4, [5, 5], 3, seed=0)
    m = Model("mlp", [np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])
    out = m.forward(np.random.default_rng(0).normal(size=(6, 4)))
    assert np.all(out == out[:, :1])
    assert np.all(m.predict_class(np.ones((2, 4))) == 0)


@given(st.integers(0, 1000))
def test_random_mlp_finite(seed):
    m = Model.mlp(7, [9, 9], 4, seed=seed)
    x = np.random.default_rng(seed).normal(size=(5, 7)) * 100
    assert np.all(np.isfinite(m.forward(x)))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        Model.mlp(3, [4], 2).forward(np.ones(4))
    with pytest.raises(ValueError):
        Model("mlp", [np.ones((3, 4)), np.ones((5, 2))], [np.ones(4), np.ones(2)])


def test_init_schemes():
    k = Model.mlp(200, [300], 1, seed=0)
    u = Model.mlp(200, [300], 1, seed=0, init="uniform")
    assert abs(k.weights[0].std() - np.sqrt(2 / 200)) < 0.003
    assert np.abs(u.weights[0]).max() <= 1 / np.sqrt(200)
    assert np.all(k.biases[0] == 0)
    with pytest.raises(ValueError):
        Model.mlp(3, [3], 1, init="xavier")


# --- gradients -----------------------------------------------------------------------------------

def test_linear_gradient_is_w():
    w = np.array([1.0, -2.0, 0.5])
    m = Model.linear(w, 0.3)
    for x in np.random.default_rng(0).normal(size=(4, 3)):
        assert np.array_equal(m.grad_logit_diff(x, 1, 0), w)


def test_grad_logit_diff_invalid_index():
    with pytest.raises(ValueError):
        Model.mlp(3, [4], 3).grad_logit_diff(np.ones(3), 0, 3)


def test_input_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 100:
        m = Model.mlp(6, [8, 8], 3, seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=6)
        if min_abs_preactivation(m, x) < 1e-2:
            continue
        k, l = rng.choice(3, 2, replace=False)
        f = lambda z: m.forward(z)[k] - m.forward(z)[l]
        assert rel_err(m.grad_logit_diff(x, k, l), fd_input_grad(f, x)) <= 1e-4
        checked += 1


def test_binary_input_gradient_and_loss_gradient():
    rng = np.random.default_rng(2)
    m = Model.mlp(5, [7, 7], 1, seed=3)
    x = rng.normal(size=(4, 5))
    y = np.array([1, -1, 1, -1])
    g = input_loss_gradient(m, x, y)
    for i in range(4):
        f = lambda z: np.logaddexp(0, -y[i] * m.forward(z)[0])
        assert rel_err(g[i], fd_input_grad(f, x[i].copy())) <= 1e-4


@pytest.mark.parametrize("n_out,labels", [(1, [1, -1, 1]), (3, [0, 2, 1])])
def test_parameter_gradients_match_finite_differences(n_out, labels):
    rng = np.random.default_rng(3)
    m = Model.mlp(2, [2], n_out, seed=4)
    x = rng.normal(size=(3, 2))
    _, grads = loss_and_grads(m, x, labels)
    for p, g in zip(m.params, grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-5
            lp = m.loss(x, labels)
            p[idx] = old - 1e-5
            lm = m.loss(x, labels)
            p[idx] = old
            fd[idx] = (lp - lm) / 2e-5
        assert rel_err(g, fd) <= 1e-4


# --- training ---------------------------------------------------------------------------------

def test_lr_schedules():
    base = dict(epochs=10, max_lr=1.0)
    lin = TrainConfig(lr_schedule="linear_decay", **base)
    assert learning_rate(lin, 0, 100) == 1.0 and abs(learning_rate(lin, 50, 100) - 0.5) < 1e-12
    tri = TrainConfig(lr_schedule="triangular", **base)
    assert learning_rate(tri, 0, 100) == 0.0 and learning_rate(tri, 40, 100) == 1.0
    assert abs(learning_rate(tri, 70, 100) - 0.5) < 1e-12
    pw = TrainConfig(lr_schedule="piecewise_constant", **base)
    assert [learning_rate(pw, s, 100) for s in (0, 49, 50, 74, 75, 99)] == [1.0, 1.0, 0.1, 0.1, 0.01, 0.01]
    assert learning_rate(TrainConfig(lr_schedule="constant", **base), 77, 100) == 1.0
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="cosine")


def test_epoch_permutation_pure():
    assert np.array_equal(epoch_permutation(3, 5, 20), epoch_permutation(3, 5, 20))
    assert sorted(epoch_permutation(3, 5, 20)) == list(range(20))


def test_logistic_fits_t1():
    ds = gen_t1(T1Params(n_samples=2000, seed=1))
    m, hist, _ = train_sgd(Model.logistic(100), ds, TrainConfig(epochs=5))
    assert m.accuracy(ds) == 1.0 and len(hist) == 5


def test_mlp_fits_t1_and_generalizes():
    ds = gen_t1(T1Params(n_samples=3000, seed=2))
    test = gen_t1(T1Params(n_samples=1000, seed=3), rotation=ds.rotation)
    m, hist, _ = train_sgd(Model.mlp(100, [200] * 4, 1, seed=0), ds, TrainConfig(epochs=4), test=test)
    assert hist[-1].train_acc == 1.0
    assert hist[-1].test_acc >= 0.99


def test_one_sample_loss_decreases():
    ds = LabeledDataset(np.array([[0.5, -1.0]]), np.array([1]))
    m0 = Model.mlp(2, [4], 1, seed=1)
    m, _, _ = train_sgd(m0, ds, TrainConfig(epochs=1, batch_size=1, lr_schedule="constant", max_lr=0.1))
    assert m.loss(ds.features, ds.labels) < m0.loss(ds.features, ds.labels)


def test_training_deterministic_and_input_untouched():
    ds = gen_t1(T1Params(n_samples=300, dim=10, seed=5))
    m0 = Model.mlp(10, [16, 16], 1, seed=2)
    before = [p.copy() for p in m0.params]
    cfg = TrainConfig(epochs=3, batch_size=32, momentum=0.9, weight_decay=1e-3, seed=4)
    a, _, _ = train_sgd(m0, ds, cfg)
    b, _, _ = train_sgd(m0, ds, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert all(np.array_equal(p, q) for p, q in zip(m0.params, before))


def test_resume_matches_uninterrupted(tmp_path):
    ds = gen_t1(T1Params(n_samples=300, dim=10, seed=5))
    m0 = Model.mlp(10, [16], 1, seed=2)
    cfg = TrainConfig(epochs=4, batch_size=32, momentum=0.9, seed=1)
    full, hist, _ = train_sgd(m0, ds, cfg)
    snap = {}

    def stop_after_two(model, row, state):
        if state.epoch == 2:
            save_checkpoint(str(tmp_path / "c.json"), model, state, cfg)
            snap["done"] = True

    train_sgd(m0, ds, cfg, on_epoch=stop_after_two)
    model, state, _ = load_checkpoint(str(tmp_path / "c.json"))
    resumed, hist2, _ = train_sgd(model, ds, cfg, state=state)
    assert all(np.array_equal(p, q) for p, q in zip(full.params, resumed.params))
    assert [h.loss for h in hist2] == [h.loss for h in hist[2:]]


def test_divergence_raises():
    ds = LabeledDataset(np.array([[1e150, 1.0], [-1e150, 1.0]]), np.array([1, -1]))
    with pytest.raises(TrainingDivergedError):
        train_sgd(Model.mlp(2, [4], 1, seed=0), ds, TrainConfig(epochs=3, max_lr=1e10))


def test_finetune_zero_epochs_and_tiny_lr():
    ds = gen_t1(T1Params(n_samples=500, dim=10, seed=6))
    m, _, _ = train_sgd(Model.mlp(10, [16], 1, seed=1), ds, TrainConfig(epochs=3))
    same, _, _ = finetune(m, ds, TrainConfig(epochs=0))
    assert all(np.array_equal(p, q) for p, q in zip(m.params, same.params))
    tuned, _, _ = finetune(m, ds, TrainConfig(epochs=1, max_lr=1e-4))
    assert abs(tuned.accuracy(ds) - m.accuracy(ds)) <= 0.01


# --- one-step linear classifier -------------------------------------------------------------------

def test_onestep_identity_rotation_first_weight():
    ds = gen_t1(T1Params(5.0, 1.0, 1000, 10, 0), rotation=np.eye(10))
    w = linear_onestep(ds).weights[0][:, 0]
    assert w[0] == 1000 * 5.0
    assert np.array_equal(w, ds.labels.astype(float) @ ds.features)


def test_onestep_cancellation():
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    ds = LabeledDataset(x, np.array([1, -1]))
    assert np.all(linear_onestep(ds).weights[0] == 0)
    with pytest.raises(ValueError):
        linear_onestep(LabeledDataset(x, np.array([0, 1])))


def test_onestep_noise_coordinates_variance():
    n, reps = 200, 200
    vals = []
    for r in range(reps):
        ds = gen_t1(T1Params(5.0, 1.0, n, 20, r))
        w = linear_onestep(ds).weights[0][:, 0]
        vals.append((ds.rotation.T @ w)[1:])
    var = np.var(np.concatenate(vals))
    assert abs(var - n) <= 0.1 * n


# --- checkpoints -----------------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = Model.mlp(5, [6, 7], 3, seed=9)
    p = str(tmp_path / "m.json")
    save_checkpoint(p, m, extra={"note": 1})
    back, state, cfg, payload = load_checkpoint(p, with_payload=True)
    assert all(np.array_equal(a, b) for a, b in zip(m.params, back.params))
    assert state is None and cfg is None and payload["note"] == 1
    with open(p) as f:
        first = f.read()
    save_checkpoint(p, back, extra={"note": 1})
    with open(p) as f:
        assert f.read() == first
    bad = json.loads(first)
    bad["model"]["version"] = 99
    with pytest.raises(ValueError):
        Model.from_dict(bad["model"])
