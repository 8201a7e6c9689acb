"""Per-point reliability signals: match constraint, distance to training, distance bands."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .knn_index import Neighbor


class BandUndefined(ValueError):
    """Too few constrained true positives in calibration to estimate the band radius."""


@dataclass(frozen=True)
class BandSpec:
    omega: float
    s_hat: float
    delta: float


@dataclass(frozen=True)
class InstanceContext:
    id: str
    d_t: float
    q_t: bool
    nearest_train: Neighbor
    nearest_train_label: int
    nearest_train_pred: int
    knn_pred: int
    knnknn_pred: int | None = None
    label: int | None = None


@dataclass(frozen=True, eq=False)
class ContextTable:
    """Columnar contexts for one split (calibration or test)."""

    ids: tuple[str, ...]
    d: np.ndarray
    q: np.ndarray
    nn_row: np.ndarray
    nn_label: np.ndarray
    nn_pred: np.ndarray
    knn_scores: np.ndarray
    knn_probs: np.ndarray
    knn_pred: np.ndarray
    labels: np.ndarray  # -1 when unknown
    kk_probs: np.ndarray | None = None
    kk_pred: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> InstanceContext:
        return InstanceContext(
            id=self.ids[i],
            d_t=float(self.d[i]),
            q_t=bool(self.q[i]),
            nearest_train=Neighbor(int(self.nn_row[i]), float(self.d[i])),
            nearest_train_label=int(self.nn_label[i]),
            nearest_train_pred=int(self.nn_pred[i]),
            knn_pred=int(self.knn_pred[i]),
            knnknn_pred=None if self.kk_pred is None else int(self.kk_pred[i]),
            label=None if self.labels[i] < 0 else int(self.labels[i]),
        )

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(self)):
                c = self[i]
                fh.write(
                    json.dumps(
                        {
                            "id": c.id,
                            "d_t": c.d_t,
                            "q_t": c.q_t,
                            "nearest_train_row": c.nearest_train.row,
                            "nearest_train_label": c.nearest_train_label,
                            "nearest_train_pred": c.nearest_train_pred,
                            "knn_pred": c.knn_pred,
                            "knnknn_pred": c.knnknn_pred,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


def match_constraint(knn_pred, nearest_train_pred, nearest_train_label):
    """True iff the KNN agrees with the nearest training match's prediction and that prediction is correct.

    Works elementwise on arrays.
    """
    out = (np.asarray(knn_pred) == np.asarray(nearest_train_pred)) & (
        np.asarray(nearest_train_pred) == np.asarray(nearest_train_label)
    )
    return bool(out) if out.ndim == 0 else out


def build_contexts(
    ids,
    nn_rows: np.ndarray,
    nn_dists: np.ndarray,
    train_labels: np.ndarray,
    train_preds: np.ndarray,
    knn_scores: np.ndarray,
    knn_probs: np.ndarray,
    labels: np.ndarray,
) -> ContextTable:
    """Assemble contexts from each point's top-K training neighbors (column 0 is the nearest)."""
    nn_row = nn_rows[:, 0]
    knn_pred = np.argmax(knn_scores, axis=1)
    nn_label = train_labels[nn_row]
    nn_pred = train_preds[nn_row]
    return ContextTable(
        ids=tuple(ids),
        d=np.ascontiguousarray(nn_dists[:, 0]),
        q=match_constraint(knn_pred, nn_pred, nn_label),
        nn_row=nn_row,
        nn_label=nn_label,
        nn_pred=nn_pred,
        knn_scores=knn_scores,
        knn_probs=knn_probs,
        knn_pred=knn_pred,
        labels=np.asarray(labels),
    )


def estimate_band_radius(d, q, knn_pred, labels, delta: float) -> BandSpec:
    """omega = delta * sample std of d over calibration points with q true and a correct KNN prediction."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    d = np.asarray(d, dtype=np.float64)
    keep = np.asarray(q, dtype=bool) & (np.asarray(knn_pred) == np.asarray(labels))
    if keep.sum() < 2:
        raise BandUndefined(f"need >= 2 constrained true positives in calibration, found {int(keep.sum())}")
    s_hat = float(np.std(d[keep], ddof=1))
    return BandSpec(omega=delta * s_hat, s_hat=s_hat, delta=float(delta))


def band_mask(d_t, q_t, omega: float, cal_d: np.ndarray, cal_q: np.ndarray) -> np.ndarray:
    """Membership of calibration points in each center's band: same q and d in the open interval.

    Scalar (d_t, q_t) gives a 1-D mask over calibration; arrays give (n, J).
    """
    d_t = np.asarray(d_t, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=bool)
    inside = np.abs(cal_d - d_t[..., None]) < omega
    return inside & (cal_q == q_t[..., None])


def band(center: InstanceContext, omega: float, cal: ContextTable) -> set[str]:
    mask = band_mask(center.d_t, center.q_t, omega, cal.d, cal.q)
    return {cal.ids[j] for j in np.flatnonzero(mask)}


def distance_quantile_bins(cal_d, num_bins: int = 4) -> np.ndarray:
    """Interior bin boundaries at the calibration distance quantiles i/num_bins."""
    if num_bins < 2:
        raise ValueError("num_bins must be >= 2")
    cal_d = np.asarray(cal_d, dtype=np.float64)
    if cal_d.size == 0:
        raise ValueError("empty calibration")
    return np.quantile(cal_d, np.arange(1, num_bins) / num_bins)


def assign_bins(d, boundaries) -> np.ndarray:
    """Bin b holds (boundary[b-1], boundary[b]]; everything past the last boundary is in the last bin."""
    return np.searchsorted(np.asarray(boundaries), np.asarray(d, dtype=np.float64), side="left")
