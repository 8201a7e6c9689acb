"""Independent reference implementations used as test oracles."""

import math

import numpy as np


def brute_force_knn(vectors, q, k):
    """Full scan with per-row math.fsum distances; sorted by (distance, row)."""
    d = [math.sqrt(math.fsum((float(a) - float(b)) ** 2 for a, b in zip(row, q))) for row in vectors]
    order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
    return [i for i in order], [d[i] for i in order]


def sort_and_index_threshold(scores, alpha, kappa, default):
    """Reference split-conformal threshold: sort, take the m-th smallest."""
    from decimal import ROUND_CEILING, Decimal

    J = len(scores)
    if J < kappa:
        return default, True
    m = int(((Decimal(J) + 1) * (1 - Decimal(repr(alpha)))).to_integral_value(rounding=ROUND_CEILING))
    m = min(m, J)
    return 1.0 - sorted(scores)[m - 1], False


def knn_scores_scalar(beta, gamma, eta, dists, neighbor_logits, neighbor_labels, activation="tanh"):
    """Plain-loop evaluation of the distance-weighted KNN scores for one query."""
    act = math.tanh if activation == "tanh" else (lambda v: v)
    C = len(beta)
    ex = [math.exp(-d / eta) for d in dists]
    z = sum(ex)
    out = []
    for c in range(C):
        s = beta[c]
        for k, w in enumerate(ex):
            yt = 1.0 if neighbor_labels[k] == c else -1.0
            s += (w / z) * (act(neighbor_logits[k][c]) + gamma[c] * yt)
        out.append(s)
    return out


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def admit_reference(d_t, q_t, kk_probs, kk_pred, h, cal, omega, alpha, kappa, use_h_guard=True):
    """Plain-loop set construction over a list of calibration dicts (d, q, label, probs, pred).

    Returns (c_hat, c_hat_A, censored) with sets as Python sets.
    """
    C = len(kk_probs)
    members = [c for c in cal if c["q"] == q_t and d_t - omega < c["d"] < d_t + omega]
    c_hat = {kk_pred}
    if use_h_guard and not h:
        c_hat = set(range(C))
    tau, censored = [], False
    for c in range(C):
        sc = [1 - m["probs"][m["label"]] for m in members if m["label"] == c]
        t, fb = sort_and_index_threshold(sc, alpha, kappa, 0.0)
        censored |= fb
        tau.append(t)
        if kk_probs[c] >= t:
            c_hat.add(c)
    if censored:
        c_hat = set(range(C))
    same = []
    for m in members:
        s = {c for c in range(C) if m["probs"][c] >= tau[c]} | {m["pred"]}
        if s == c_hat:
            same.append(m)
    c_hat_A = set(c_hat)
    for c in range(C):
        sc = [1 - m["probs"][m["label"]] for m in same if m["label"] == c]
        t, _ = sort_and_index_threshold(sc, alpha, kappa, tau[c])
        if kk_probs[c] >= t:
            c_hat_A.add(c)
    if not h:
        c_hat_A = set(range(C))
    return c_hat, c_hat_A, censored
