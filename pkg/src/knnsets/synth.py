"""Seeded Gaussian-cluster bundles with optional label-proportion and covariate shift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import DatasetBundle


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 2
    dim: int = 16
    n_train: int = 2000
    n_cal: int = 2000
    n_test: int = 5000
    separation: float = 3.0
    # per-class isotropic std; a scalar applies to every class
    scales: tuple[float, ...] | float = 1.0
    means: tuple[tuple[float, ...], ...] | None = None
    class_probs: tuple[float, ...] | None = None
    test_class_probs: tuple[float, ...] | None = None
    # logits = logit_scale * (mu_c . x - |mu_c|^2 / 2) + logit_noise * N(0, 1)
    logit_scale: float = 1.0
    logit_noise: float = 0.5
    # test exemplars are translated by this vector (or by this length along a seeded direction)
    test_shift: tuple[float, ...] | float | None = None
    # with a scalar test_shift, translate toward this class mean (from the grand mean)
    # instead of along a random direction
    shift_toward: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 1:
            raise ValueError("need num_classes >= 2 and dim >= 1")
        if min(self.n_train, self.n_cal) < 1 or self.n_test < 0:
            raise ValueError("split sizes must be positive")
        for probs in (self.class_probs, self.test_class_probs):
            if probs is None:
                continue
            p = np.asarray(probs, dtype=np.float64)
            if p.shape != (self.num_classes,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("label proportions must be C non-negative values summing to 1")


def _means(spec: SynthSpec, rng) -> np.ndarray:
    if spec.means is not None:
        m = np.asarray(spec.means, dtype=np.float64)
        if m.shape != (spec.num_classes, spec.dim):
            raise ValueError("means must have shape (C, D)")
        return m
    direction = rng.standard_normal((spec.num_classes, spec.dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return spec.separation / np.sqrt(2.0) * direction


def _draw(spec, rng, n, probs, means, scales):
    C = spec.num_classes
    labels = rng.choice(C, size=n, p=probs)
    x = means[labels] + scales[labels, None] * rng.standard_normal((n, spec.dim))
    return labels, x


def _logits(spec, rng, x, means):
    lin = x @ means.T - 0.5 * np.einsum("cd,cd->c", means, means)
    return spec.logit_scale * lin + spec.logit_noise * rng.standard_normal(lin.shape)


def generate(spec: SynthSpec) -> DatasetBundle:
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    means = _means(spec, rng)
    scales = np.broadcast_to(np.asarray(spec.scales, dtype=np.float64), (C,)).copy()
    probs = np.full(C, 1.0 / C) if spec.class_probs is None else np.asarray(spec.class_probs, dtype=np.float64)
    test_probs = probs if spec.test_class_probs is None else np.asarray(spec.test_class_probs, dtype=np.float64)

    shift = np.zeros(spec.dim)
    if spec.test_shift is not None:
        if np.ndim(spec.test_shift) == 0:
            if spec.shift_toward is not None:
                u = means[spec.shift_toward] - means.mean(axis=0)
            else:
                # separate stream, so adding a shift leaves every other draw unchanged
                u = np.random.default_rng([spec.seed, 1]).standard_normal(spec.dim)
            shift = float(spec.test_shift) * u / np.linalg.norm(u)
        else:
            shift = np.asarray(spec.test_shift, dtype=np.float64)
            if shift.shape != (spec.dim,):
                raise ValueError("test_shift vector must have length D")

    splits = []
    for name, n, p in (("tr", spec.n_train, probs), ("ca", spec.n_cal, probs), ("te", spec.n_test, test_probs)):
        labels, x = _draw(spec, rng, n, p, means, scales)
        if name == "te":
            x = x + shift
        logits = _logits(spec, rng, x, means)
        ids = [f"{name}{i:06d}" for i in range(n)]
        splits.append((ids, labels, logits, x))
    return DatasetBundle.from_arrays(C, *splits)
