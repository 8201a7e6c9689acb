import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from knnsets.datamodel import DatasetBundle, RunConfig
from knnsets.knn_approx import (
    KnnModel,
    fit_knn,
    knn_forward,
    knn_forward_batch,
    knn_weights,
    loss_and_grad,
    neighbor_features,
    split_halves,
)
from knnsets.knn_index import Neighbor, batch_topk, build
from knnsets.synth import SynthSpec, generate
from oracles import central_difference, knn_scores_scalar


def test_weights_examples():
    np.testing.assert_allclose(knn_weights([Neighbor(0, 1.3), Neighbor(1, 1.3)], 0.7), [0.5, 0.5])
    # exp(0) : exp(-ln 2) = 1 : 1/2
    np.testing.assert_allclose(knn_weights([0.0, math.log(2)], 1.0), [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(knn_weights([0.0, 1.0, 5.0], 1e9), [1 / 3] * 3, atol=1e-6)
    with pytest.raises(ValueError):
        knn_weights([1.0], 0.0)
    with pytest.raises(ValueError):
        knn_weights([], 1.0)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 50)), st.floats(1e-2, 1e3), st.randoms())
def test_weights_properties(d, eta, rnd):
    w = knn_weights(d, eta)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)
    order = np.argsort(d, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-15)
    perm = list(range(d.size))
    rnd.shuffle(perm)
    np.testing.assert_allclose(knn_weights(d[perm], eta), w[perm], atol=1e-15)


def _train(logits, labels, X):
    n = len(labels)
    ids = [f"tr{i}" for i in range(n)]
    C = np.asarray(logits).shape[1]
    cal = (["ca0", "ca1"], [0, 1], np.zeros((2, C)), np.zeros((2, np.asarray(X).shape[1])))
    b = DatasetBundle.from_arrays(C, (ids, labels, logits, X), cal, ([], None, None, np.zeros((0, np.asarray(X).shape[1]))))
    return b, build(b.train.exemplars)


def test_forward_k1_tanh_degenerate():
    logits = np.array([[0.3, -1.2, 2.0], [5.0, 0.0, 0.0]])
    b, idx = _train(logits, [2, 0], [[0.0], [10.0]])
    m = KnnModel(np.zeros(3), np.zeros(3), 1.0, 1, "tanh")
    out = knn_forward(m, [0.1], idx, b.train)
    np.testing.assert_allclose(out.scores, np.tanh(logits[0]), atol=1e-15)
    assert out.pred == 2 and abs(out.probs.sum() - 1) < 1e-12
    assert out.neighbors == (Neighbor(0, 0.1),)


def test_forward_label_term_isolated():
    b, idx = _train(np.zeros((1, 2)), [0], [[0.0]])
    m = KnnModel(np.zeros(2), np.ones(2), 1.0, 1, "identity")
    np.testing.assert_allclose(knn_forward(m, [0.0], idx, b.train).scores, [1.0, -1.0])


def test_forward_two_neighbors_hand_summed():
    logits = np.array([[0.4, -0.8], [-1.5, 0.9]])
    labels = [1, 0]
    b, idx = _train(logits, labels, [[0.0], [1.0]])
    beta, gamma = [0.1, -0.1], [0.5, 0.5]
    m = KnnModel(np.array(beta), np.array(gamma), 1.0, 2, "tanh")
    got = knn_forward(m, [0.0], idx, b.train).scores
    want = knn_scores_scalar(beta, gamma, 1.0, [0.0, 1.0], logits, labels, "tanh")
    np.testing.assert_allclose(got, want, rtol=1e-14)
    # spelled out: w = (e^0, e^-1)/(1 + e^-1)
    w0 = 1 / (1 + math.exp(-1))
    c0 = 0.1 + w0 * (math.tanh(0.4) - 0.5) + (1 - w0) * (math.tanh(-1.5) + 0.5)
    assert abs(got[0] - c0) < 1e-14


def test_forward_errors():
    b, idx = _train(np.zeros((1, 2)), [0], [[0.0]])
    with pytest.raises(ValueError):
        knn_forward(None, [0.0], idx, b.train)
    with pytest.raises(ValueError):
        KnnModel(np.zeros(2), np.zeros(2), -1.0, 1)


def test_batch_forward_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    train_logits, train_labels = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
    rows = rng.integers(0, 30, size=(4, 5))
    dists = np.sort(rng.uniform(0, 3, size=(4, 5)), axis=1)
    m = KnnModel(rng.normal(size=3), rng.normal(size=3), 0.8, 5, "identity")
    got = knn_forward_batch(m, rows, dists, train_logits, train_labels)
    for i in range(4):
        want = knn_scores_scalar(m.beta, m.gamma, m.eta, dists[i], train_logits[rows[i]], train_labels[rows[i]], "identity")
        np.testing.assert_allclose(got[i], want, rtol=1e-13)


def _random_problem(seed, n=40, K=6, C=3, activation="tanh"):
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, 50, size=(n, K))
    dists = np.sort(rng.uniform(0.1, 4.0, size=(n, K)), axis=1)
    act, yt = neighbor_features(rows, rng.normal(size=(50, C)), rng.integers(0, C, 50), activation)
    return dists, act, yt, rng.integers(0, C, n)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    dists, act, yt, targets = _random_problem(seed)
    rng = np.random.default_rng(100 + seed)
    p = np.concatenate([rng.normal(size=3), rng.normal(size=3), [rng.uniform(-1, 1.5)]])
    _, g = loss_and_grad(p, dists, act, yt, targets)
    fd = central_difference(lambda x: loss_and_grad(x, dists, act, yt, targets)[0], p)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def _vote_bundle(seed=0):
    # train logits are zero, memory-layer target on calibration is the local label:
    # a gamma-only model reproduces it exactly
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    def draw(n):
        y = rng.integers(0, 3, n)
        return y, centers[y] + rng.normal(size=(n, 2))
    ytr, xtr = draw(300)
    yca, xca = draw(200)
    ca_logits = np.eye(3)[yca] * 2.0
    return DatasetBundle.from_arrays(
        3,
        ([f"tr{i}" for i in range(300)], ytr, np.zeros((300, 3)), xtr),
        ([f"ca{i}" for i in range(200)], yca, ca_logits, xca),
        (["te0"], None, None, xca[:1]),
    )


def test_fit_reaches_vote_solution():
    b = _vote_bundle()
    m = fit_knn(b, RunConfig(k_neighbors=10, knn_epochs=100), build(b.train.exemplars))
    assert m.meta["heldout_agreement"] >= 0.99
    assert m.eta > 0 and m.meta["epochs_budget"] == 100


def test_fit_constant_logits():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 3))
    b = DatasetBundle.from_arrays(
        2,
        ([f"tr{i}" for i in range(30)], rng.integers(0, 2, 30), np.ones((30, 2)), X[:30]),
        ([f"ca{i}" for i in range(30)], rng.integers(0, 2, 30), np.ones((30, 2)), X[30:]),
        ([], None, None, np.zeros((0, 3))),
    )
    m = fit_knn(b, RunConfig(k_neighbors=5, knn_epochs=20), build(b.train.exemplars))
    # every target is class 0 (argmax of a constant row), so the majority rate is 1
    assert m.meta["heldout_agreement"] == 1.0


def test_fit_deterministic_and_serializable(small_bundle):
    cfg = RunConfig(knn_epochs=30, seed=4)
    idx = build(small_bundle.train.exemplars)
    a, b = fit_knn(small_bundle, cfg, idx), fit_knn(small_bundle, cfg, idx)
    assert a.to_dict() == b.to_dict()
    back = KnnModel.from_dict(a.to_dict())
    np.testing.assert_array_equal(back.beta, a.beta)
    assert back.eta == a.eta


def test_fit_needs_two_calibration_points():
    b = _vote_bundle()
    one = DatasetBundle.from_arrays(
        3,
        (b.train.ids, b.train.labels, b.train.logits, b.train.exemplars),
        (("ca0",), [0], np.zeros((1, 3)), np.zeros((1, 2))),
        ((), None, None, np.zeros((0, 2))),
    )
    with pytest.raises(ValueError):
        fit_knn(one, RunConfig(k_neighbors=3), build(one.train.exemplars))


def test_split_halves_seeded():
    a, b = split_halves(11, 3)
    assert a.size == 6 and b.size == 5
    assert sorted(np.concatenate([a, b]).tolist()) == list(range(11))
    np.testing.assert_array_equal(split_halves(11, 3)[0], a)


def test_approximation_parity_on_easy_data():
    b = generate(SynthSpec(dim=8, n_train=1000, n_cal=1000, n_test=10, separation=4.0, logit_noise=0.1, seed=2))
    idx = build(b.train.exemplars)
    m = fit_knn(b, RunConfig(), idx)
    _, held = split_halves(len(b.calibration), 0)
    rows, dists = batch_topk(idx, b.calibration.exemplars[held], m.K)
    knn_pred = np.argmax(knn_forward_batch(m, rows, dists, b.train.logits, b.train.labels), axis=1)
    y = b.calibration.labels[held]
    ml_acc = np.mean(np.argmax(b.calibration.logits[held], axis=1) == y)
    assert abs(np.mean(knn_pred == y) - ml_acc) <= 0.03
    assert m.meta["heldout_agreement"] >= 0.97


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_deterministic(seed):
    dists, act, yt, _ = _random_problem(seed, n=5)
    rng = np.random.default_rng(seed)
    m = KnnModel(rng.normal(size=3), rng.normal(size=3), 0.5, 6)
    rows = rng.integers(0, 50, size=(5, 6))
    logits, labels = rng.normal(size=(50, 3)), rng.integers(0, 3, 50)
    a = knn_forward_batch(m, rows, dists, logits, labels)
    np.testing.assert_array_equal(a, knn_forward_batch(m, rows, dists, logits, labels))
