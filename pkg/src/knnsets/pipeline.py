"""End-to-end wiring: neighbor tables, model fits, contexts, and all set variants."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import knn_index
from .conformal_sets import CalibrationPool, SetBatch, admit_sets, baseline_split_conformal, heuristic_h
from .constraints import BandSpec, ContextTable, band_mask, build_contexts, distance_quantile_bins, estimate_band_radius
from .datamodel import DataError, DatasetBundle, RunConfig, softmax
from .knn_approx import KnnModel, fit_knn, knn_forward_batch, split_halves
from .knn_knn import KnnKnnModel, fit_knnknn, fit_subset, forward_from_distances
from .resample import ResampledCalibration, choose_k_sample_report, resample

log = logging.getLogger(__name__)


@dataclass
class Pipeline:
    bundle: DatasetBundle
    config: RunConfig
    threads: int = 1
    use_cache: bool = True
    timings: dict = field(default_factory=dict)

    knn: KnnModel | None = None
    knnknn: KnnKnnModel | None = None
    cal: ContextTable | None = None
    test: ContextTable | None = None
    band: BandSpec | None = None
    test_to_cal: np.ndarray | None = None
    test_band_mask: np.ndarray | None = None
    kk_band_pred: np.ndarray | None = None
    kk_depth: np.ndarray | None = None
    h_flag: np.ndarray | None = None

    def __post_init__(self):
        self.train_index = knn_index.build(self.bundle.train.exemplars, self.bundle.train.ids)
        self.cal_index = knn_index.build(self.bundle.calibration.exemplars, self.bundle.calibration.ids)
        self._hash = self.bundle.content_hash() if self.use_cache else None
        self._nbrs: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _timed(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    def train_neighbors(self, split: str):
        if split not in self._nbrs:
            part = self.bundle.split(split)
            self._nbrs[split] = self._timed(
                "neighbors",
                knn_index.cached_batch_topk,
                self.train_index,
                part.exemplars,
                self.config.k_neighbors,
                self._hash,
                f"train-top{self.config.k_neighbors}-{split}",
                self.threads,
            )
        return self._nbrs[split]

    # -- fitting ---------------------------------------------------------

    def fit(self, transductive: bool = True) -> "Pipeline":
        """Fit the KNN and the combination temperature, then build all contexts.

        With ``transductive`` the temperature is fit on the test batch;
        otherwise on the held-out calibration half with self-matches masked.
        """
        b, cfg = self.bundle, self.config
        self.knn = self._timed("fit_knn", fit_knn, b, cfg, self.train_index, self.train_neighbors("calibration"))
        self._build_contexts()
        cal = self.cal
        if transductive:
            if len(b.test) == 0:
                raise DataError("empty test set")
            sub = fit_subset(len(b.test), cfg.knnknn_max_fit_points, cfg.seed)
            dists = self.test_to_cal[sub]
            targets = self.test.knn_pred[sub]
            mask, source = None, "test"
        else:
            _, held = split_halves(len(cal), cfg.seed)
            held = held[fit_subset(held.size, cfg.knnknn_max_fit_points, cfg.seed)]
            dists = knn_index.pairwise_distances(self.cal_index, b.calibration.exemplars[held])
            mask = np.ones_like(dists, dtype=bool)
            mask[np.arange(held.size), held] = False
            targets, source = cal.knn_pred[held], "calibration_heldout"
        self.knnknn = self._timed(
            "fit_knnknn", fit_knnknn, cal.knn_scores, b.calibration.ids, dists, targets, cfg, source, mask
        )
        self._finish_test_contexts()
        return self

    def load_models(self, knn: KnnModel, tau: float, knnknn_meta: dict | None = None) -> "Pipeline":
        self.knn = knn
        self._build_contexts()
        self.knnknn = KnnKnnModel(tau, self.cal.knn_scores, self.bundle.calibration.ids, dict(knnknn_meta or {}))
        self._finish_test_contexts()
        return self

    def _contexts_for(self, split: str) -> ContextTable:
        b = self.bundle
        part = b.split(split)
        rows, dists = self.train_neighbors(split)
        scores = knn_forward_batch(self.knn, rows, dists, b.train.logits, b.train.labels)
        return build_contexts(
            part.ids,
            rows,
            dists,
            b.train.labels,
            np.argmax(b.train.logits, axis=1),
            scores,
            softmax(scores) if len(part) else scores,
            part.labels,
        )

    def _build_contexts(self) -> None:
        cfg = self.config
        self.cal = self._contexts_for("calibration")
        self.test = self._contexts_for("test")
        self.band = estimate_band_radius(self.cal.d, self.cal.q, self.cal.knn_pred, self.cal.labels, cfg.delta)
        if len(self.bundle.test):
            self.test_to_cal = self._timed(
                "distances", knn_index.pairwise_distances, self.cal_index, self.bundle.test.exemplars, self.threads
            )
        else:
            self.test_to_cal = np.empty((0, len(self.bundle.calibration)))

    def _finish_test_contexts(self) -> None:
        full = forward_from_distances(self.knnknn, self.test_to_cal)
        self.test_band_mask = band_mask(self.test.d, self.test.q, self.band.omega, self.cal.d, self.cal.q)
        banded = forward_from_distances(self.knnknn, self.test_to_cal, self.test_band_mask)
        t = self.test
        self.test = ContextTable(
            t.ids, t.d, t.q, t.nn_row, t.nn_label, t.nn_pred, t.knn_scores, t.knn_probs, t.knn_pred, t.labels,
            kk_probs=full.probs, kk_pred=full.pred,
        )
        self.kk_band_pred = banded.pred
        self.kk_depth = banded.depth
        self.h_flag = heuristic_h(full.pred, t.knn_pred, banded.pred, t.q)

    # -- prediction sets -------------------------------------------------

    def baseline(self, alpha: float | None = None) -> SetBatch:
        alpha = self.config.alpha if alpha is None else alpha
        return baseline_split_conformal(
            self.test.ids, self.cal.knn_probs, self.cal.labels, self.test.knn_probs, alpha, self.h_flag
        )

    def admit(
        self,
        alpha: float | None = None,
        use_h_guard: bool | None = None,
        kappa: int | None = None,
        pool: CalibrationPool | None = None,
    ) -> SetBatch:
        cfg = self.config
        return admit_sets(
            self.test.ids,
            self.test.d,
            self.test.q,
            self.test.kk_probs,
            self.test.kk_pred,
            self.h_flag,
            CalibrationPool.from_contexts(self.cal) if pool is None else pool,
            self.band.omega,
            cfg.alpha if alpha is None else alpha,
            cfg.kappa if kappa is None else kappa,
            cfg.use_h_guard if use_h_guard is None else use_h_guard,
        )

    def resample(self, k_sample: int | None = None) -> ResampledCalibration:
        k = self.config.k_sample if k_sample is None else k_sample
        if k is None:
            raise ValueError("k_sample is required for re-sampling")
        return resample(
            self.test.d, self.test.q, self.test_to_cal, self.kk_band_pred,
            self.cal.d, self.cal.q, self.cal.knn_pred, self.band.omega, k,
        )

    def predict_all(self) -> tuple[dict[str, SetBatch], dict]:
        """Every method variant the config asks for, keyed by method name, plus run metadata.

        ADMIT is emitted with and without the H guard on Ĉ; ``use_h_guard=False``
        keeps only the unguarded variant.
        """
        cfg = self.config
        t0 = time.perf_counter()
        guards = (True, False) if cfg.use_h_guard else (False,)
        out = {"conformal": self.baseline()}
        for g in guards:
            out["admit" if g else "admit_no_h"] = self.admit(use_h_guard=g)
        meta: dict = {}
        if cfg.resample:
            rs = self.resample()
            pool = CalibrationPool.from_contexts(self.cal, rs.rows)
            for g in guards:
                out[("admit" if g else "admit_no_h") + "_resample"] = self.admit(use_h_guard=g, pool=pool)
            meta["resample"] = rs.summary()
            self._last_resample = rs
        meta["k_sample_report"] = choose_k_sample_report(self.kk_depth)
        self.timings["sets"] = time.perf_counter() - t0
        return out, meta

    def run_meta(self) -> dict:
        cfg = self.config
        return {
            "config": cfg.to_dict(),
            "s_hat": self.band.s_hat,
            "omega": self.band.omega,
            "band_std": "sample (ddof=1)",
            "band_source": "original calibration",
            "knn": self.knn.to_dict(),
            "knnknn": self.knnknn.to_dict(),
            "distance_bins": {
                str(k): distance_quantile_bins(self.cal.d, k).tolist() for k in sorted({2, 4, cfg.num_bins})
            },
            "num_classes": self.bundle.num_classes,
            "bundle_hash": self.bundle.content_hash(),
        }
