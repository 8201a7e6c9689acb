"""Distance-weighted KNN approximation of the memory-layer output.

For a query with K nearest training neighbors k at distances d_k:

    score^c = beta^c + sum_k w_k * (e(f^c(x_k)) + gamma^c * ytilde^c_k)
    w = softmax(-d / eta)

where f(x_k) are the neighbor's logits, ytilde^c_k is +1 if the neighbor's
label is c and -1 otherwise, and e is tanh or identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import DataError, DatasetBundle, NumericalError, RunConfig, softmax
from .knn_index import Neighbor, VectorIndex, batch_topk

ACTIVATIONS = {"tanh": np.tanh, "identity": lambda x: x}


@dataclass
class KnnModel:
    beta: np.ndarray
    gamma: np.ndarray
    eta: float
    K: int
    activation: str = "tanh"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.beta.shape != self.gamma.shape or self.beta.ndim != 1:
            raise ValueError("beta and gamma must be vectors of length C")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return self.beta.shape[0]

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "eta": float(self.eta),
            "K": int(self.K),
            "activation": self.activation,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnnModel":
        return cls(np.array(d["beta"]), np.array(d["gamma"]), d["eta"], d["K"], d["activation"], d.get("meta", {}))


@dataclass(frozen=True)
class KnnOutput:
    scores: np.ndarray
    probs: np.ndarray
    pred: int
    neighbors: tuple[Neighbor, ...]


def knn_weights(neighbors, eta: float) -> np.ndarray:
    """Softmax of negative distance over temperature.

    ``neighbors`` may be Neighbor records or raw distances; batched input of
    shape (n, K) is normalized row-wise.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if len(neighbors) and isinstance(neighbors[0], Neighbor):
        d = np.array([nb.distance for nb in neighbors], dtype=np.float64)
    else:
        d = np.asarray(neighbors, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no neighbors")
    return softmax(-d / eta)


def neighbor_features(rows: np.ndarray, train_logits: np.ndarray, train_labels: np.ndarray, activation: str):
    """Activated neighbor logits and +/-1 label indicators, each (n, K, C)."""
    C = train_logits.shape[1]
    act = ACTIVATIONS[activation](train_logits[rows])
    ytilde = np.where(train_labels[rows][..., None] == np.arange(C), 1.0, -1.0)
    return act, ytilde


def knn_scores(beta, gamma, eta, dists, act, ytilde) -> np.ndarray:
    w = knn_weights(dists, eta)
    return beta + np.einsum("nk,nkc->nc", w, act + gamma * ytilde)


def knn_forward_batch(model: KnnModel, rows: np.ndarray, dists: np.ndarray, train_logits, train_labels) -> np.ndarray:
    """Scores for many queries given their precomputed top-K training neighbors."""
    if rows.shape[0] == 0:
        return np.empty((0, model.num_classes))
    act, ytilde = neighbor_features(rows, train_logits, train_labels, model.activation)
    return knn_scores(model.beta, model.gamma, model.eta, dists, act, ytilde)


def knn_forward(model: KnnModel, query, train_index: VectorIndex, train) -> KnnOutput:
    if model is None:
        raise ValueError("model is not fitted")
    if train_index.size == 0 or len(train) == 0:
        raise ValueError("empty training set")
    rows, dists = batch_topk(train_index, np.asarray(query, dtype=np.float64), model.K)
    scores = knn_forward_batch(model, rows, dists, train.logits, train.labels)[0]
    probs = softmax(scores)
    return KnnOutput(
        scores=scores,
        probs=probs,
        pred=int(np.argmax(scores)),
        neighbors=tuple(Neighbor(int(r), float(d)) for r, d in zip(rows[0], dists[0])),
    )


def loss_and_grad(params: np.ndarray, dists, act, ytilde, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against ``targets`` and its gradient.

    ``params`` packs [beta (C), gamma (C), log eta].
    """
    C = act.shape[2]
    beta, gamma, log_eta = params[:C], params[C : 2 * C], params[2 * C]
    eta = np.exp(log_eta)
    n = dists.shape[0]
    w = knn_weights(dists, eta)  # (n, K)
    u = act + gamma * ytilde  # (n, K, C)
    scores = beta + np.einsum("nk,nkc->nc", w, u)
    logp = scores - scores.max(axis=1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), targets].mean()

    g_scores = np.exp(logp)
    g_scores[np.arange(n), targets] -= 1.0
    g_scores /= n
    g_beta = g_scores.sum(axis=0)
    g_gamma = np.einsum("nc,nk,nkc->c", g_scores, w, ytilde)
    # d w_k / d log eta = w_k (d_k - <d>_w) / eta
    mean_d = (w * dists).sum(axis=1, keepdims=True)
    dw = w * (dists - mean_d) / eta
    g_log_eta = np.einsum("nc,nk,nkc->", g_scores, dw, u)
    return float(loss), np.concatenate([g_beta, g_gamma, [g_log_eta]])


def _agreement(params, dists, act, ytilde, targets) -> float:
    C = act.shape[2]
    scores = knn_scores(params[:C], params[C : 2 * C], np.exp(params[2 * C]), dists, act, ytilde)
    return float(np.mean(np.argmax(scores, axis=1) == targets))


def split_halves(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic seeded 50/50 split of range(n); first half gets the extra item."""
    perm = np.random.default_rng(seed).permutation(n)
    h = (n + 1) // 2
    return np.sort(perm[:h]), np.sort(perm[h:])


def gradient_descent(params, objective, epochs: int, lr: float, select=None, tol: float = 1e-10):
    """Fixed-step full-batch descent, keeping the iterate with the best ``select`` key.

    Without ``select`` the key is the negated training loss.
    """
    best_key, best = None, params.copy()
    epochs_run = 0
    for epoch in range(epochs + 1):
        loss, grad = objective(params)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalError(f"non-finite loss or gradient at epoch {epoch}")
        key = -loss if select is None else select(params)
        if best_key is None or key > best_key:
            best_key, best = key, params.copy()
        if epoch == epochs or np.max(np.abs(grad)) < tol:
            break
        params = params - lr * grad
        epochs_run = epoch + 1
    return best, best_key, epochs_run


def fit_knn(
    bundle: DatasetBundle,
    config: RunConfig,
    train_index: VectorIndex,
    cal_neighbors: tuple[np.ndarray, np.ndarray] | None = None,
) -> KnnModel:
    """Fit (beta, gamma, eta) so the KNN argmax matches the memory-layer argmax.

    Fits on one seeded half of calibration and selects the iterate with the
    best held-out agreement on the other half (ties: lower held-out loss).
    """
    cal, train = bundle.calibration, bundle.train
    if len(cal) < 2:
        raise DataError("calibration set needs at least 2 instances to fit the KNN")
    C = bundle.num_classes
    if cal_neighbors is None:
        cal_neighbors = batch_topk(train_index, cal.exemplars, config.k_neighbors)
    rows, dists = cal_neighbors
    act, ytilde = neighbor_features(rows, train.logits, train.labels, config.activation)
    targets = np.argmax(cal.logits, axis=1)

    fit_idx, held_idx = split_halves(len(cal), config.seed)
    fit = (dists[fit_idx], act[fit_idx], ytilde[fit_idx], targets[fit_idx])
    held = (dists[held_idx], act[held_idx], ytilde[held_idx], targets[held_idx])

    nn = dists[fit_idx, 0]
    eta0 = float(nn.mean()) if nn.mean() > 0 else float(dists[fit_idx].mean())
    if not eta0 > 0:
        eta0 = 1.0
    params = np.concatenate([np.zeros(C), np.full(C, 0.5), [np.log(eta0)]])

    def select(p):
        return (_agreement(p, *held), -loss_and_grad(p, *held)[0])

    best, (held_agree, neg_held_loss), epochs_run = gradient_descent(
        params, lambda p: loss_and_grad(p, *fit), config.knn_epochs, config.knn_lr, select
    )
    return KnnModel(
        beta=best[:C],
        gamma=best[C : 2 * C],
        eta=float(np.exp(best[2 * C])),
        K=int(rows.shape[1]),
        activation=config.activation,
        meta={
            "seed": int(config.seed),
            "epochs_budget": int(config.knn_epochs),
            "epochs_run": int(epochs_run),
            "lr": float(config.knn_lr),
            "eta_init": eta0,
            "fit_size": int(len(fit_idx)),
            "heldout_size": int(len(held_idx)),
            "heldout_agreement": float(held_agree),
            "heldout_loss": float(-neg_held_loss),
            "fit_agreement": _agreement(best, *fit),
        },
    )
