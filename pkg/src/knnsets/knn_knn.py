"""Re-expressing a KNN output as a convex combination of calibration KNN outputs.

    kk^c(x) = sum_j a_j * knn^c(x_j),   a = softmax(-||r_x - r_j|| / tau)

over all calibration points j, or over a subset I with the weights
renormalized inside I.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import DataError, NumericalError, RunConfig, softmax
from .knn_approx import gradient_descent
from .knn_index import VectorIndex, pairwise_distances


@dataclass
class KnnKnnModel:
    tau: float
    cal_scores: np.ndarray
    cal_ids: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        self.cal_scores = np.asarray(self.cal_scores, dtype=np.float64)

    def to_dict(self) -> dict:
        # calibration scores are rebuilt from the KNN model, not serialized
        return {"tau": float(self.tau), "num_calibration": len(self.cal_ids), "meta": self.meta}


@dataclass(frozen=True)
class KnnKnnOutput:
    scores: np.ndarray
    probs: np.ndarray
    pred: int
    cumulative_weight_depth: int


@dataclass(frozen=True)
class KnnKnnBatch:
    scores: np.ndarray  # (n, C); NaN rows where the subset was empty
    probs: np.ndarray
    pred: np.ndarray  # -1 where the subset was empty
    depth: np.ndarray  # 0 where the subset was empty


def alpha_weights(dists: np.ndarray, tau: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-normalized distance-softmax weights; rows with an empty mask are all zero."""
    d = np.atleast_2d(dists)
    if mask is None:
        dmin = d.min(axis=1, keepdims=True)
        w = np.exp(-(d - dmin) / tau)
    else:
        m = np.atleast_2d(mask)
        dmin = np.where(m, d, np.inf).min(axis=1, keepdims=True)
        dmin[~np.isfinite(dmin)] = 0.0
        w = np.exp(-np.where(m, d - dmin, np.inf) / tau)
    s = w.sum(axis=1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def cumulative_weight_depth(weights: np.ndarray, mass: float = 0.5) -> np.ndarray:
    """Smallest k with the k largest weights summing to at least ``mass`` (per row)."""
    w = np.atleast_2d(weights)
    cs = np.cumsum(-np.sort(-w, axis=1), axis=1)
    reached = cs >= mass - 1e-12
    depth = np.argmax(reached, axis=1) + 1
    depth[~reached.any(axis=1)] = 0
    return depth


def forward_from_distances(model: KnnKnnModel, dists: np.ndarray, mask: np.ndarray | None = None) -> KnnKnnBatch:
    a = alpha_weights(dists, model.tau, mask)
    scores = a @ model.cal_scores
    empty = a.sum(axis=1) == 0
    scores[empty] = np.nan
    probs = np.full_like(scores, np.nan)
    pred = np.full(scores.shape[0], -1, dtype=np.int64)
    ok = ~empty
    if ok.any():
        probs[ok] = softmax(scores[ok])
        pred[ok] = np.argmax(scores[ok], axis=1)
    return KnnKnnBatch(scores, probs, pred, cumulative_weight_depth(a))


def knnknn_forward(model: KnnKnnModel, query, cal_index: VectorIndex, subset=None) -> KnnKnnOutput:
    if model is None:
        raise ValueError("model is not fitted")
    d = pairwise_distances(cal_index, np.asarray(query, dtype=np.float64))
    mask = None
    if subset is not None:
        subset = set(subset)
        if not subset:
            raise ValueError("empty subset")
        unknown = subset.difference(model.cal_ids)
        if unknown:
            raise ValueError(f"subset ids not in calibration: {sorted(unknown)[:5]}")
        mask = np.array([i in subset for i in model.cal_ids])[None, :]
    out = forward_from_distances(model, d, mask)
    return KnnKnnOutput(out.scores[0], out.probs[0], int(out.pred[0]), int(out.depth[0]))


def tau_loss_and_grad(
    log_tau: float, dists: np.ndarray, cal_scores: np.ndarray, targets: np.ndarray, mask=None, with_agreement=False
):
    """Mean cross-entropy of softmax(kk scores) against ``targets``; gradient w.r.t. log tau.

    ``mask`` excludes calibration entries per row (used to drop self-matches).
    """
    tau = float(np.exp(log_tau))
    n = dists.shape[0]
    a = alpha_weights(dists, tau, mask)
    if mask is not None:
        dists = np.where(mask, dists, 0.0)
    scores = a @ cal_scores
    logp = scores - scores.max(axis=1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), targets].mean()
    g = np.exp(logp)
    g[np.arange(n), targets] -= 1.0
    g /= n
    # d a_j / d log tau = a_j (d_j - <d>_a) / tau
    mean_d = (a * dists).sum(axis=1, keepdims=True)
    da = a * (dists - mean_d) / tau
    grad = float(np.sum(g * (da @ cal_scores)))
    if with_agreement:
        return float(loss), grad, float(np.mean(np.argmax(scores, axis=1) == targets))
    return float(loss), grad


def fit_knnknn(
    cal_scores: np.ndarray,
    cal_ids,
    fit_dists: np.ndarray,
    fit_targets: np.ndarray,
    config: RunConfig,
    source: str = "test",
    fit_mask: np.ndarray | None = None,
) -> KnnKnnModel:
    """Fit the single temperature by gradient descent on log tau.

    ``fit_dists`` are distances from the fitting points to every calibration
    point, ``fit_targets`` the fitting points' KNN argmax. The iterate with the
    best agreement is kept (ties: lower loss).
    """
    if fit_dists.shape[0] == 0:
        raise DataError("no points to fit the calibration-combination temperature")
    masked = fit_dists if fit_mask is None else np.where(fit_mask, fit_dists, np.inf)
    nearest = masked.min(axis=1)
    pos = nearest[(nearest > 0) & np.isfinite(nearest)]
    if pos.size:
        tau0 = float(np.median(pos))
    elif np.any(fit_dists > 0):
        tau0 = float(np.median(fit_dists[fit_dists > 0]))
    else:
        tau0 = 1.0
    # the loss is flat for large tau; start from the best point of a coarse
    # log-grid anchored at the median nearest distance (ties keep the point nearest the anchor)
    grid = np.log(tau0) + np.log(2.0) * np.array(sorted(range(-8, 3), key=abs))
    grid_keys = []
    for g in grid:
        loss, _, agree = tau_loss_and_grad(g, fit_dists, cal_scores, fit_targets, fit_mask, with_agreement=True)
        grid_keys.append((agree, -loss))
    x0 = np.array([grid[max(range(len(grid)), key=grid_keys.__getitem__)]])

    last = {}

    def objective(p):
        loss, g, agree = tau_loss_and_grad(p[0], fit_dists, cal_scores, fit_targets, fit_mask, with_agreement=True)
        last.update(p=p[0], loss=loss, agree=agree)
        return loss, np.array([g])

    def select(p):
        assert last["p"] == p[0]
        return (last["agree"], -last["loss"])

    best, (agreement, neg_loss), epochs_run = gradient_descent(
        x0, objective, config.knnknn_epochs, config.knnknn_lr, select
    )
    tau = float(np.exp(best[0]))
    if not np.isfinite(tau) or tau <= 0:
        raise NumericalError("temperature fit diverged")
    model = KnnKnnModel(tau, cal_scores, tuple(cal_ids))
    model.meta = {
        "seed": int(config.seed),
        "fit_source": source,
        "fit_size": int(fit_dists.shape[0]),
        "epochs_budget": int(config.knnknn_epochs),
        "epochs_run": int(epochs_run),
        "lr": float(config.knnknn_lr),
        "tau_anchor": tau0,
        "tau_init": float(np.exp(x0[0])),
        "fit_loss": float(-neg_loss),
        "agreement": float(agreement),
    }
    return model


def fit_subset(n: int, max_points: int, seed: int) -> np.ndarray:
    """Seeded subsample of fitting rows when the full batch is too large."""
    if n <= max_points:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 1]).choice(n, size=max_points, replace=False))
