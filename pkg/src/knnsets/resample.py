"""Constrained re-sampling of calibration toward the test batch."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .constraints import band_mask


@dataclass(frozen=True, eq=False)
class ResampledCalibration:
    rows: np.ndarray  # calibration row indices, duplicates allowed
    admitted: np.ndarray  # per test point
    contributions: tuple[np.ndarray, ...]  # per test point, rows it added

    @property
    def duplicate_fraction(self) -> float:
        if self.rows.size == 0:
            return 0.0
        return 1.0 - np.unique(self.rows).size / self.rows.size

    def summary(self) -> dict:
        return {
            "size": int(self.rows.size),
            "unique": int(np.unique(self.rows).size),
            "duplicate_fraction": float(self.duplicate_fraction),
            "admitted_fraction": float(self.admitted.mean()) if self.admitted.size else 0.0,
        }

    def write_audit(self, path, test_ids, cal_ids) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tid, ok, rows in zip(test_ids, self.admitted, self.contributions):
                rec = {"id": tid, "admitted": bool(ok), "contributed": [cal_ids[r] for r in rows]}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def resample(
    test_d: np.ndarray,
    test_q: np.ndarray,
    test_to_cal: np.ndarray,
    kk_band_pred: np.ndarray,
    cal_d: np.ndarray,
    cal_q: np.ndarray,
    cal_knn_pred: np.ndarray,
    omega: float,
    k_sample: int,
) -> ResampledCalibration:
    """For each test point, add its k_sample nearest band members when the band-restricted
    combined prediction agrees with the KNN prediction of its nearest band member.

    ``test_to_cal`` holds exemplar distances (n_test, J); ``kk_band_pred`` the
    band-restricted prediction per test point (-1 for an empty band).
    Deterministic: contributions are concatenated in test order.
    """
    if k_sample < 1:
        raise ValueError("k_sample must be positive")
    n = test_d.shape[0]
    admitted = np.zeros(n, dtype=bool)
    contributions = []
    empty = np.empty(0, dtype=np.int64)
    for i in range(n):
        members = np.flatnonzero(band_mask(test_d[i], test_q[i], omega, cal_d, cal_q))
        if members.size == 0:
            contributions.append(empty)
            continue
        dist = test_to_cal[i, members]
        order = np.lexsort((members, dist))
        j0 = members[order[0]]
        if kk_band_pred[i] == cal_knn_pred[j0]:
            admitted[i] = True
            contributions.append(members[order[:k_sample]])
        else:
            contributions.append(empty)
    rows = np.concatenate(contributions) if contributions else empty
    return ResampledCalibration(rows.astype(np.int64), admitted, tuple(contributions))


def choose_k_sample_report(depths) -> dict:
    """Summary of the depth at which half the combination-weight mass is reached."""
    d = np.asarray(depths, dtype=np.float64)
    d = d[d > 0]
    if d.size == 0:
        return {"n": 0, "mean": None, "median": None, "p10": None, "p90": None}
    return {
        "n": int(d.size),
        "mean": float(d.mean()),
        "median": float(np.median(d)),
        "p10": float(np.quantile(d, 0.1)),
        "p90": float(np.quantile(d, 0.9)),
    }
