"""Quantile thresholds and prediction-set construction.

Nonconformity score for a labeled calibration point: s = 1 - pi^y (KNN
probability of its true class). A class c enters a set when pi^c >= tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .constraints import band_mask


@dataclass(frozen=True)
class ThresholdTable:
    thresholds: np.ndarray
    sizes: np.ndarray
    fallback: np.ndarray


@dataclass(frozen=True)
class PredictionSetResult:
    id: str
    c_hat: frozenset
    c_hat_A: frozenset
    point_pred: int
    h_flag: bool
    kappa_censored: bool
    band_size: int
    thresholds: tuple[float, ...]
    thresholds_A: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "c_hat": sorted(self.c_hat),
            "c_hat_A": sorted(self.c_hat_A),
            "point_pred": self.point_pred,
            "h_flag": self.h_flag,
            "kappa_censored": self.kappa_censored,
            "band_size": self.band_size,
            "thresholds": list(self.thresholds),
            "thresholds_A": list(self.thresholds_A),
        }


@dataclass(frozen=True, eq=False)
class SetBatch:
    """Prediction sets for n points as boolean (n, C) membership matrices."""

    ids: tuple[str, ...]
    c_hat: np.ndarray
    c_hat_A: np.ndarray
    point_pred: np.ndarray
    h_flag: np.ndarray
    kappa_censored: np.ndarray
    band_size: np.ndarray
    thresholds: np.ndarray
    thresholds_A: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> PredictionSetResult:
        return PredictionSetResult(
            id=self.ids[i],
            c_hat=frozenset(np.flatnonzero(self.c_hat[i]).tolist()),
            c_hat_A=frozenset(np.flatnonzero(self.c_hat_A[i]).tolist()),
            point_pred=int(self.point_pred[i]),
            h_flag=bool(self.h_flag[i]),
            kappa_censored=bool(self.kappa_censored[i]),
            band_size=int(self.band_size[i]),
            thresholds=tuple(float(t) for t in self.thresholds[i]),
            thresholds_A=tuple(float(t) for t in self.thresholds_A[i]),
        )

    def results(self) -> list[PredictionSetResult]:
        return [self[i] for i in range(len(self))]


def quantile_index(n: int, alpha: float) -> int:
    """m = ceil((n + 1)(1 - alpha)) clamped to n, with alpha read as its shortest decimal."""
    a = Fraction(alpha).limit_denominator(10**12)
    return min(n, math.ceil((n + 1) * (1 - a)))


def conformal_threshold(scores, alpha: float, kappa: int, default: float) -> tuple[float, bool]:
    """Return (tau, fallback): tau = 1 - (m-th smallest score), or ``default`` when fewer than kappa scores."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if n < kappa:
        return float(default), True
    if n == 0:
        raise ValueError("empty score list")
    m = quantile_index(n, alpha)
    return float(1.0 - np.partition(s, m - 1)[m - 1]), False


def true_class_scores(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return 1.0 - probs[np.arange(len(labels)), labels]


def heuristic_h(kk_pred, knn_pred, kk_band_pred, q):
    """H: KNN-over-calibration agrees with the KNN and with its band-restricted variant, and q holds."""
    out = (np.asarray(kk_pred) == np.asarray(knn_pred)) & (np.asarray(kk_pred) == np.asarray(kk_band_pred)) & np.asarray(
        q, dtype=bool
    )
    return bool(out) if out.ndim == 0 else out


def baseline_split_conformal(
    ids,
    cal_probs: np.ndarray,
    cal_labels: np.ndarray,
    test_probs: np.ndarray,
    alpha: float,
    h_flag: np.ndarray | None = None,
) -> SetBatch:
    """Single global threshold over all calibration scores; point prediction always included."""
    n, C = test_probs.shape
    tau, _ = conformal_threshold(true_class_scores(cal_probs, cal_labels), alpha, 0, 0.0)
    pred = np.argmax(test_probs, axis=1)
    sets = test_probs >= tau
    sets[np.arange(n), pred] = True
    thr = np.full((n, C), tau)
    return SetBatch(
        ids=tuple(ids),
        c_hat=sets,
        c_hat_A=sets.copy(),
        point_pred=pred,
        h_flag=np.zeros(n, dtype=bool) if h_flag is None else np.asarray(h_flag, dtype=bool),
        kappa_censored=np.zeros(n, dtype=bool),
        band_size=np.full(n, cal_labels.shape[0]),
        thresholds=thr,
        thresholds_A=thr.copy(),
    )


def weighted_threshold(scores, counts, alpha: float, kappa: int, default: float) -> tuple[float, bool]:
    """conformal_threshold over the multiset where scores[i] appears counts[i] times."""
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    if n < kappa:
        return float(default), True
    if n == 0:
        raise ValueError("empty score list")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(s, kind="stable")
    m = quantile_index(n, alpha)
    pos = np.searchsorted(np.cumsum(counts[order]), m, side="left")
    return float(1.0 - s[order[pos]]), False


@dataclass(frozen=True, eq=False)
class CalibrationPool:
    """Calibration rows available to threshold construction.

    A re-sampled multiset is stored as its distinct rows with multiplicities;
    every size and quantile counts duplicates.
    """

    d: np.ndarray
    q: np.ndarray
    labels: np.ndarray
    probs: np.ndarray
    pred: np.ndarray
    counts: np.ndarray
    rows: np.ndarray

    @classmethod
    def from_contexts(cls, cal, rows: np.ndarray | None = None) -> "CalibrationPool":
        if rows is None:
            idx = np.arange(len(cal))
            counts = np.ones(len(cal), dtype=np.int64)
        else:
            idx, counts = np.unique(np.asarray(rows, dtype=np.int64), return_counts=True)
        return cls(cal.d[idx], cal.q[idx], cal.labels[idx], cal.knn_probs[idx], cal.knn_pred[idx], counts, idx)

    def __len__(self) -> int:
        return int(self.counts.sum())

    @property
    def scores(self) -> np.ndarray:
        return true_class_scores(self.probs, self.labels)


def _class_thresholds(scores, labels, counts, members, C, alpha, kappa, defaults):
    thr = np.empty(C)
    sizes = np.empty(C, dtype=np.int64)
    fb = np.empty(C, dtype=bool)
    member_labels = labels[members]
    unit = bool(np.all(counts[members] == 1))
    for c in range(C):
        sel = members[member_labels == c]
        if unit:
            sizes[c] = sel.size
            thr[c], fb[c] = conformal_threshold(scores[sel], alpha, kappa, defaults[c])
        else:
            sizes[c] = counts[sel].sum()
            thr[c], fb[c] = weighted_threshold(scores[sel], counts[sel], alpha, kappa, defaults[c])
    return ThresholdTable(thr, sizes, fb)


def admit_one(
    d_t: float,
    q_t: bool,
    kk_probs: np.ndarray,
    kk_pred: int,
    h: bool,
    pool: CalibrationPool,
    omega: float,
    alpha: float,
    kappa: int,
    use_h_guard: bool = True,
    exclude: int | None = None,
    pool_scores: np.ndarray | None = None,
):
    """Label-conditional band sets for one test point.

    Returns (c_hat, c_hat_A, kappa_censored, band_size, thresholds, thresholds_A)
    with the two sets as boolean vectors of length C.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1 for band thresholds")
    C = kk_probs.shape[0]
    scores = pool.scores if pool_scores is None else pool_scores
    mask = band_mask(d_t, q_t, omega, pool.d, pool.q)
    if exclude is not None:
        # exclude is a calibration row; drop every pool entry built from it
        mask &= pool.rows != exclude
    members = np.flatnonzero(mask)

    c_hat = np.zeros(C, dtype=bool)
    c_hat[kk_pred] = True
    if use_h_guard and not h:
        c_hat[:] = True
    table = _class_thresholds(scores, pool.labels, pool.counts, members, C, alpha, kappa, np.zeros(C))
    c_hat |= kk_probs >= table.thresholds
    censored = bool(np.any(table.sizes < kappa))
    if censored:
        c_hat[:] = True

    # calibration-side sets over the band, using the full per-class table
    ca_sets = pool.probs[members] >= table.thresholds
    ca_sets[np.arange(members.size), pool.pred[members]] = True
    same = members[np.all(ca_sets == c_hat, axis=1)]
    refined = _class_thresholds(scores, pool.labels, pool.counts, same, C, alpha, kappa, table.thresholds)
    c_hat_A = c_hat | (kk_probs >= refined.thresholds)
    if not h:
        c_hat_A[:] = True
    return c_hat, c_hat_A, censored, int(pool.counts[members].sum()), table.thresholds, refined.thresholds


def admit_sets(
    ids,
    d: np.ndarray,
    q: np.ndarray,
    kk_probs: np.ndarray,
    kk_pred: np.ndarray,
    h_flag: np.ndarray,
    pool: CalibrationPool,
    omega: float,
    alpha: float,
    kappa: int,
    use_h_guard: bool = True,
    exclude: np.ndarray | None = None,
) -> SetBatch:
    """Band-conditioned, label-conditional sets (and composition-conditioned refinements) for every point."""
    if omega is None or not np.isfinite(omega):
        raise ValueError("band radius unavailable")
    n, C = kk_probs.shape
    c_hat = np.zeros((n, C), dtype=bool)
    c_hat_A = np.zeros((n, C), dtype=bool)
    censored = np.zeros(n, dtype=bool)
    sizes = np.zeros(n, dtype=np.int64)
    thr = np.zeros((n, C))
    thr_A = np.zeros((n, C))
    scores = pool.scores
    for i in range(n):
        c_hat[i], c_hat_A[i], censored[i], sizes[i], thr[i], thr_A[i] = admit_one(
            d[i],
            q[i],
            kk_probs[i],
            int(kk_pred[i]),
            bool(h_flag[i]),
            pool,
            omega,
            alpha,
            kappa,
            use_h_guard,
            None if exclude is None else int(exclude[i]),
            scores,
        )
    return SetBatch(tuple(ids), c_hat, c_hat_A, np.asarray(kk_pred).copy(), np.asarray(h_flag, dtype=bool), censored, sizes, thr, thr_A)
