import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from knnsets.constraints import band_mask
from knnsets.knn_index import build, pairwise_distances
from knnsets.knn_knn import KnnKnnModel, forward_from_distances
from knnsets.resample import choose_k_sample_report, resample


def _self_setup(seed=0, J=80):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(J, 3))
    d = rng.uniform(0, 2, J)
    q = rng.uniform(size=J) < 0.6
    scores = rng.normal(size=(J, 3))
    pred = scores.argmax(axis=1)
    dist = pairwise_distances(build(X), X)
    mask = band_mask(d, q, 0.5, d, q)
    kk = forward_from_distances(KnnKnnModel(1e-6, scores, tuple(map(str, range(J)))), dist, mask)
    return d, q, dist, kk.pred, pred


def test_calibration_as_test_admits_itself():
    d, q, dist, kk_pred, pred = _self_setup()
    rs = resample(d, q, dist, kk_pred, d, q, pred, 0.5, 3)
    assert rs.admitted.all()
    for j, rows in enumerate(rs.contributions):
        assert rows[0] == j
    assert set(rs.rows.tolist()) == set(range(d.size))


def test_empty_band_contributes_nothing():
    d, q, dist, kk_pred, pred = _self_setup()
    rs = resample(np.array([100.0]), np.array([True]), dist[:1], np.array([-1]), d, q, pred, 0.5, 5)
    assert not rs.admitted[0] and rs.rows.size == 0


def test_disagreeing_cluster_contributes_nothing():
    # one nearby calibration point predicts 0; a far cluster of twenty predicts 1
    X = np.vstack([[0.0, 0.0], 10.0 + np.random.default_rng(1).normal(scale=0.1, size=(20, 2))])
    scores = np.vstack([[1.0, 0.0], np.tile([0.0, 1.0], (20, 1))])
    pred = scores.argmax(axis=1)
    cal_d, cal_q = np.ones(21), np.ones(21, dtype=bool)
    q_x = np.array([[0.5, 0.0]])
    dist = pairwise_distances(build(X), q_x)
    mask = band_mask(np.array([1.0]), np.array([True]), 0.5, cal_d, cal_q)
    kk = forward_from_distances(KnnKnnModel(1e3, scores, tuple(map(str, range(21)))), dist, mask)
    assert kk.pred[0] == 1 and pred[np.argmin(dist[0])] == 0
    rs = resample(np.array([1.0]), np.array([True]), dist, kk.pred, cal_d, cal_q, pred, 0.5, 5)
    assert not rs.admitted[0] and rs.contributions[0].size == 0
    # with a sharp temperature the same point is admitted
    kk_sharp = forward_from_distances(KnnKnnModel(1e-2, scores, tuple(map(str, range(21)))), dist, mask)
    assert resample(np.array([1.0]), np.array([True]), dist, kk_sharp.pred, cal_d, cal_q, pred, 0.5, 5).admitted[0]


def test_small_band_takes_everything_and_duplicates_count(tmp_path):
    cal_d, cal_q = np.array([1.0, 1.1, 5.0]), np.array([True, True, True])
    pred = np.array([0, 0, 1])
    dist = np.array([[0.2, 0.1, 3.0], [0.3, 0.4, 3.0]])
    rs = resample(np.array([1.0, 1.05]), np.array([True, True]), dist, np.array([0, 0]), cal_d, cal_q, pred, 0.5, 10)
    assert [r.tolist() for r in rs.contributions] == [[1, 0], [0, 1]]
    assert rs.rows.tolist() == [1, 0, 0, 1]
    assert rs.duplicate_fraction == 0.5
    assert rs.summary() == {"size": 4, "unique": 2, "duplicate_fraction": 0.5, "admitted_fraction": 1.0}
    rs.write_audit(tmp_path / "a.jsonl", ["t0", "t1"], ["c0", "c1", "c2"])
    first = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert first == {"id": "t0", "admitted": True, "contributed": ["c1", "c0"]}


def test_nearest_tie_goes_to_lower_row():
    cal_d, cal_q = np.ones(3), np.ones(3, dtype=bool)
    pred = np.array([1, 0, 0])
    dist = np.array([[0.5, 0.5, 0.5]])
    rs = resample(np.ones(1), np.ones(1, bool), dist, np.array([1]), cal_d, cal_q, pred, 0.5, 2)
    assert rs.contributions[0].tolist() == [0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_membership_and_determinism(seed, k):
    rng = np.random.default_rng(seed)
    J, n = 30, 15
    cal_d, cal_q = rng.uniform(0, 3, J), rng.uniform(size=J) < 0.5
    args = (rng.uniform(0, 3, n), rng.uniform(size=n) < 0.5, rng.uniform(0, 5, (n, J)), rng.integers(-1, 2, n), cal_d, cal_q, rng.integers(0, 2, J), 0.7, k)
    a, b = resample(*args), resample(*args)
    np.testing.assert_array_equal(a.rows, b.rows)
    assert np.all((a.rows >= 0) & (a.rows < J))
    for ok, rows in zip(a.admitted, a.contributions):
        assert ok or rows.size == 0
        assert rows.size <= k


def test_k_sample_report():
    assert choose_k_sample_report(np.ones(10))["mean"] == 1.0
    r = choose_k_sample_report([1, 2, 3, 10, 0])
    assert r["n"] == 4 and r["mean"] == 4.0 and r["median"] == 2.5
    assert choose_k_sample_report([])["n"] == 0
