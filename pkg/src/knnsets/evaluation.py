"""Stratified coverage / cardinality tables and the leave-one-out calibration audit."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .conformal_sets import CalibrationPool, SetBatch, admit_sets, heuristic_h, quantile_index, true_class_scores
from .constraints import assign_bins, band_mask, distance_quantile_bins
from .datamodel import DataError
from .knn_index import pairwise_distances
from .knn_knn import forward_from_distances

SCHEMA_VERSION = 1
COLUMNS = ("method", "stratum", "value", "n", "fraction", "coverage", "mean_cardinality", "accuracy")
# partitions emitted per method, in this order
STRATA = ("all", "class", "distance_bin", "cardinality", "q", "kappa_censored", "class_x_distance_bin", "class_x_cardinality", "class_x_q")


@dataclass(frozen=True)
class ReportRow:
    method: str
    stratum: str
    value: str
    n: int
    fraction: float
    coverage: float
    mean_cardinality: float
    accuracy: float


@dataclass
class StratifiedReport:
    rows: list[ReportRow]
    meta: dict

    def select(self, method: str, stratum: str) -> dict[str, ReportRow]:
        return {r.value: r for r in self.rows if r.method == method and r.stratum == stratum}

    def row(self, method: str, stratum: str = "all", value: str = "all") -> ReportRow:
        return self.select(method, stratum)[value]

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r.method, r.stratum, r.value, r.n, repr(r.fraction), repr(r.coverage), repr(r.mean_cardinality), repr(r.accuracy)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "columns": list(COLUMNS), "meta": self.meta, "rows": [asdict(r) for r in self.rows]}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.json").write_text(self.to_json())


def _partition_rows(method, stratum, keys, covered, card, correct):
    n_total = covered.size
    rows = []
    for key in sorted(set(keys), key=_sort_key):
        sel = np.array([k == key for k in keys])
        n = int(sel.sum())
        rows.append(
            ReportRow(
                method=method,
                stratum=stratum,
                value=str(key) if not isinstance(key, tuple) else "|".join(str(k) for k in key),
                n=n,
                fraction=n / n_total,
                coverage=float(covered[sel].mean()),
                mean_cardinality=float(card[sel].mean()),
                accuracy=float(correct[sel].mean()),
            )
        )
    return rows


def _sort_key(k):
    # ints numerically, then strings
    return tuple((0, v, "") if isinstance(v, int) else (1, 0, v) for v in (k if isinstance(k, tuple) else (k,)))


def stratify(method: str, sets: np.ndarray, point_pred, labels, bins, q, censored) -> list[ReportRow]:
    """All report rows for one method; ``sets`` is an (n, C) boolean membership matrix."""
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        return []
    if np.any(labels < 0):
        raise DataError("every evaluated instance needs a gold label")
    covered = sets[np.arange(n), labels]
    card = sets.sum(axis=1)
    correct = np.asarray(point_pred) == labels
    cls = [int(v) for v in labels]
    bn = [int(v) for v in bins]
    cd = [int(v) for v in card]
    qs = ["true" if v else "false" for v in q]
    ks = ["true" if v else "false" for v in censored]
    parts = {
        "all": ["all"] * n,
        "class": cls,
        "distance_bin": bn,
        "cardinality": cd,
        "q": qs,
        "kappa_censored": ks,
        "class_x_distance_bin": list(zip(cls, bn)),
        "class_x_cardinality": list(zip(cls, cd)),
        "class_x_q": list(zip(cls, qs)),
    }
    rows = []
    for stratum in STRATA:
        rows.extend(_partition_rows(method, stratum, parts[stratum], covered, card, correct))
    return rows


def evaluate(results: dict[str, SetBatch], labels, d, q, boundaries, meta: dict | None = None) -> StratifiedReport:
    """Stratified report over every method; methods with a distinct Ĉ_A get an extra ``<method>_A`` entry."""
    bins = assign_bins(d, boundaries)
    rows = []
    for name in results:
        batch = results[name]
        rows.extend(stratify(name, batch.c_hat, batch.point_pred, labels, bins, q, batch.kappa_censored))
        # Ĉ_A is always H-gated, so the no-H variants share the H-guarded Ĉ_A
        if name.startswith("admit") and "_no_h" not in name:
            rows.extend(stratify(name + "_A", batch.c_hat_A, batch.point_pred, labels, bins, q, batch.kappa_censored))
    m = dict(meta or {})
    m["distance_boundaries"] = [float(b) for b in boundaries]
    return StratifiedReport(rows, m)


def evaluate_records(records: list[dict], labels_by_id: dict[str, int], boundaries, meta: dict | None = None) -> StratifiedReport:
    """Evaluate prediction JSONL records (as written by the CLI) against gold labels."""
    ids = [r["id"] for r in records]
    missing = [i for i in ids if labels_by_id.get(i) is None]
    if missing:
        raise DataError(f"no gold label for {len(missing)} prediction ids (e.g. {missing[0]!r})")
    extra = set(labels_by_id) - set(ids)
    if extra:
        raise DataError(f"{len(extra)} labeled ids have no prediction (e.g. {sorted(extra)[0]!r})")
    labels = np.array([labels_by_id[i] for i in ids])
    C = int(meta.get("num_classes")) if meta and "num_classes" in meta else int(labels.max()) + 1
    d = np.array([r["d_t"] for r in records])
    q = np.array([r["q_t"] for r in records], dtype=bool)
    methods = list(records[0]["methods"]) if records else []
    results = {}
    for m in methods:
        n = len(records)
        c_hat = np.zeros((n, C), dtype=bool)
        c_hat_A = np.zeros((n, C), dtype=bool)
        pred = np.zeros(n, dtype=np.int64)
        cens = np.zeros(n, dtype=bool)
        for i, r in enumerate(records):
            e = r["methods"][m]
            c_hat[i, e["c_hat"]] = True
            c_hat_A[i, e["c_hat_A"]] = True
            pred[i] = e["point_pred"]
            cens[i] = e["kappa_censored"]
        z = np.zeros((n, C))
        results[m] = SetBatch(tuple(ids), c_hat, c_hat_A, pred, np.zeros(n, bool), cens, np.zeros(n, np.int64), z, z)
    return evaluate(results, labels, d, q, boundaries, meta)


def _loo_baseline(cal_probs, cal_labels, alpha) -> np.ndarray:
    """Baseline sets for each calibration point with the threshold built from the other points."""
    scores = true_class_scores(cal_probs, cal_labels)
    J = scores.size
    order = np.sort(scores)
    m = quantile_index(J - 1, alpha)
    # removing one score shifts the m-th smallest of the rest by at most one position
    rank = np.searchsorted(order, scores, side="left")
    l_hat = np.where(rank < m, order[m], order[m - 1])
    tau = 1.0 - l_hat
    pred = np.argmax(cal_probs, axis=1)
    sets = cal_probs >= tau[:, None]
    sets[np.arange(J), pred] = True
    return sets, pred


def loo_calibration_audit(pipe, alpha: float | None = None, kappa: int | None = None, num_bins: int | None = None) -> StratifiedReport:
    """Treat each calibration point as a test point against the remaining calibration.

    The combination weights, band and thresholds for point j all exclude j.
    Uses the pipeline's fitted KNN, temperature and band radius.
    """
    cfg = pipe.config
    alpha = cfg.alpha if alpha is None else alpha
    kappa = cfg.kappa if kappa is None else kappa
    cal = pipe.cal
    J = len(cal)
    if J < 2:
        raise DataError("leave-one-out audit needs at least 2 calibration points")
    dists = pairwise_distances(pipe.cal_index, pipe.bundle.calibration.exemplars)
    not_self = ~np.eye(J, dtype=bool)
    full = forward_from_distances(pipe.knnknn, dists, not_self)
    bmask = band_mask(cal.d, cal.q, pipe.band.omega, cal.d, cal.q) & not_self
    banded = forward_from_distances(pipe.knnknn, dists, bmask)
    h = heuristic_h(full.pred, cal.knn_pred, banded.pred, cal.q)

    base_sets, base_pred = _loo_baseline(cal.knn_probs, cal.labels, alpha)
    z = np.zeros((J, cal.knn_probs.shape[1]))
    zero = np.zeros(J, dtype=bool)
    results = {
        "conformal": SetBatch(cal.ids, base_sets, base_sets.copy(), base_pred, h, zero, np.full(J, J - 1), z, z),
        "admit" if cfg.use_h_guard else "admit_no_h": admit_sets(
            cal.ids, cal.d, cal.q, full.probs, full.pred, h, CalibrationPool.from_contexts(cal),
            pipe.band.omega, alpha, kappa, cfg.use_h_guard, exclude=np.arange(J),
        ),
    }
    bounds = distance_quantile_bins(cal.d, num_bins or cfg.num_bins)
    return evaluate(results, cal.labels, cal.d, cal.q, bounds, {"audit": "leave-one-out", "alpha": alpha, "kappa": kappa})
