import numpy as np

from knnsets.datamodel import RunConfig
from knnsets.pipeline import Pipeline


def test_methods_and_invariants(fitted):
    results, meta = fitted.predict_all()
    assert list(results) == ["conformal", "admit", "admit_no_h", "admit_resample", "admit_no_h_resample"]
    for s in results.values():
        n = len(s)
        assert s.c_hat[np.arange(n), s.point_pred].all()
        assert not np.any(s.c_hat & ~s.c_hat_A)
        assert s.c_hat[s.kappa_censored].all()
    assert meta["resample"]["size"] > 0 and meta["k_sample_report"]["n"] > 0


def test_no_h_keeps_refined_set_guarded(fitted):
    guarded, free = fitted.admit(use_h_guard=True), fitted.admit(use_h_guard=False)
    np.testing.assert_array_equal(guarded.c_hat_A, free.c_hat_A)
    not_h = ~fitted.h_flag
    assert free.c_hat_A[not_h].all()
    assert guarded.c_hat[not_h].all()
    assert not np.any(free.c_hat & ~guarded.c_hat)


def test_h_uses_original_calibration(fitted):
    # re-sampling changes the pool but not H
    a = fitted.admit()
    from knnsets.conformal_sets import CalibrationPool

    b = fitted.admit(pool=CalibrationPool.from_contexts(fitted.cal, fitted.resample().rows))
    np.testing.assert_array_equal(a.h_flag, b.h_flag)


def test_reload_reproduces_fit(small_bundle, fitted):
    p = Pipeline(small_bundle, fitted.config, use_cache=False).load_models(fitted.knn, fitted.knnknn.tau)
    a, b = fitted.admit(), p.admit()
    np.testing.assert_array_equal(a.c_hat, b.c_hat)
    np.testing.assert_array_equal(a.c_hat_A, b.c_hat_A)


def test_non_transductive_fit(small_bundle):
    p = Pipeline(small_bundle, RunConfig(knn_epochs=50, kappa=50), use_cache=False).fit(transductive=False)
    assert p.knnknn.meta["fit_source"] == "calibration_heldout"
    assert p.knnknn.meta["agreement"] > 0.8


def test_disk_cache_used(small_bundle, tmp_path, monkeypatch):
    monkeypatch.setenv("KNNSETS_CACHE_DIR", str(tmp_path))
    cfg = RunConfig(knn_epochs=10)
    a = Pipeline(small_bundle, cfg).fit()
    assert len(list(tmp_path.glob("*.npz"))) == 2
    b = Pipeline(small_bundle, cfg).fit()
    assert a.knn.to_dict() == b.knn.to_dict()
