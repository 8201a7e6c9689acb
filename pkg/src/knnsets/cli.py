"""Batch command-line driver: synth, fit, predict, evaluate.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .constraints import BandUndefined
from .datamodel import DataError, NumericalError, RunConfig, file_sha256, load_bundle, save_bundle
from .evaluation import evaluate_records
from .knn_approx import KnnModel
from .pipeline import Pipeline
from .synth import SynthSpec, generate

log = logging.getLogger("knnsets")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    scales = _floats(args.scales)
    spec = SynthSpec(
        num_classes=args.num_classes,
        dim=args.dim,
        n_train=args.n_train,
        n_cal=args.n_cal,
        n_test=args.n_test,
        separation=args.separation,
        scales=scales[0] if len(scales) == 1 else scales,
        class_probs=_floats(args.class_probs) if args.class_probs else None,
        test_class_probs=_floats(args.test_class_probs) if args.test_class_probs else None,
        logit_noise=args.logit_noise,
        test_shift=args.test_shift,
        shift_toward=args.shift_toward,
        seed=args.seed,
    )
    bundle = generate(spec)
    save_bundle(bundle, args.out, args.schema)
    log.info("wrote %s (%d/%d/%d)", args.out, len(bundle.train), len(bundle.calibration), len(bundle.test))
    return 0


def _config_from_args(args, base: dict | None = None) -> RunConfig:
    cfg = dict(base or {})
    for key in ("alpha", "delta", "kappa", "k_neighbors", "k_sample", "activation", "seed", "num_bins",
                "knn_epochs", "knn_lr", "knnknn_epochs", "knnknn_lr", "knnknn_max_fit_points"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "no_h", False):
        cfg["use_h_guard"] = False
    if getattr(args, "resample", False):
        cfg["resample"] = True
    try:
        return RunConfig(**cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    bundle = load_bundle(args.bundle, args.schema)
    t_load = time.perf_counter() - t0
    config = _config_from_args(args)
    pipe = Pipeline(bundle, config, threads=args.threads)
    pipe.fit(transductive=args.allow_transductive)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "knn_model.json").write_text(_dump(pipe.knn.to_dict()))
    (out / "knnknn_model.json").write_text(_dump(pipe.knnknn.to_dict()))
    pipe.cal.to_jsonl(out / "contexts_calibration.jsonl")
    pipe.test.to_jsonl(out / "contexts_test.jsonl")
    manifest = {
        "tool": f"knnsets {__version__}",
        "command": "fit",
        "bundle_path": str(Path(args.bundle).resolve()),
        "bundle_schema": args.schema,
        "bundle_file_sha256": file_sha256(args.bundle),
        "bundle_hash": bundle.content_hash(),
        "config": config.to_dict(),
        "transductive": bool(args.allow_transductive),
        "s_hat": pipe.band.s_hat,
        "omega": pipe.band.omega,
        "knn_fit": pipe.knn.meta,
        "knnknn_fit": pipe.knnknn.meta,
        "timings_s": {"load": t_load, **pipe.timings},
    }
    (out / "manifest.json").write_text(_dump(manifest))
    log.info("knn held-out agreement %.4f, combination agreement %.4f",
             pipe.knn.meta["heldout_agreement"], pipe.knnknn.meta["agreement"])
    return 0


def _load_fitted(artifacts: Path, bundle_path: str | None, schema: str | None, config: RunConfig, threads: int):
    manifest = json.loads((artifacts / "manifest.json").read_text())
    path = bundle_path or manifest["bundle_path"]
    bundle = load_bundle(path, schema or manifest.get("bundle_schema"))
    if bundle.content_hash() != manifest["bundle_hash"]:
        raise DataError(f"bundle {path} does not match the one the models were fit on")
    knn = KnnModel.from_dict(json.loads((artifacts / "knn_model.json").read_text()))
    kk = json.loads((artifacts / "knnknn_model.json").read_text())
    pipe = Pipeline(bundle, config, threads=threads)
    pipe.load_models(knn, kk["tau"], kk.get("meta"))
    return pipe, manifest


def _record(i, pipe, results) -> dict:
    t = pipe.test
    return {
        "id": t.ids[i],
        "d_t": float(t.d[i]),
        "q_t": bool(t.q[i]),
        "methods": {name: batch[i].to_dict() for name, batch in results.items()},
    }


def cmd_predict(args) -> int:
    if args.resample and args.k_sample is None:
        raise UsageError("--resample requires --k-sample")
    if args.resample and not args.allow_transductive:
        raise UsageError("--resample uses the test batch; pass --allow-transductive to acknowledge")
    artifacts = Path(args.artifacts)
    manifest = json.loads((artifacts / "manifest.json").read_text())
    config = _config_from_args(args, manifest["config"])
    t0 = time.perf_counter()
    pipe, manifest = _load_fitted(artifacts, args.bundle, args.schema, config, args.threads)
    results, extra = pipe.predict_all()
    meta = pipe.run_meta()
    meta.update(extra)
    meta["transductive_fit"] = manifest.get("transductive")
    meta["kappa_censored_fraction"] = {k: float(v.kappa_censored.mean()) if len(v) else 0.0 for k, v in results.items()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for i in range(len(pipe.test)):
            fh.write(json.dumps(_record(i, pipe, results), sort_keys=True) + "\n")
    if config.resample:
        pipe._last_resample.write_audit(out.with_name(out.name + ".resample_audit.jsonl"), pipe.test.ids, pipe.cal.ids)
    run_manifest = {
        "command": "predict",
        "artifacts": str(artifacts.resolve()),
        "fit_manifest": manifest,
        "config": config.to_dict(),
        "s_hat": pipe.band.s_hat,
        "omega": pipe.band.omega,
        "kappa_censored_fraction": meta["kappa_censored_fraction"],
        "predictions_sha256": file_sha256(out),
        "timings_s": {**pipe.timings, "total": time.perf_counter() - t0},
    }
    out.with_name(out.name + ".manifest.json").write_text(_dump(run_manifest))
    if "k_sample_report" in extra and extra["k_sample_report"]["n"]:
        r = extra["k_sample_report"]
        log.info("half of the band-restricted combination weight is reached at mean depth %.1f (median %.0f)",
                 r["mean"], r["median"])
    return 0


def read_predictions(path) -> tuple[dict, list[dict]]:
    meta, records = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "meta" in rec and "id" not in rec:
                meta = rec["meta"]
            else:
                records.append(rec)
    return meta, records


def cmd_evaluate(args) -> int:
    meta, records = read_predictions(args.predictions)
    bundle = load_bundle(args.bundle, args.schema)
    part = bundle.split(args.split)
    labels = {i: (None if l < 0 else int(l)) for i, l in zip(part.ids, part.labels)}
    bins = meta.get("distance_bins", {})
    key = str(args.bins or meta.get("config", {}).get("num_bins", 4))
    if key not in bins:
        raise UsageError(f"predictions carry distance bins for {sorted(bins)} only")
    report = evaluate_records(
        records, labels, np.array(bins[key]),
        {"num_classes": bundle.num_classes, "predictions_sha256": file_sha256(args.predictions), "alpha": meta.get("config", {}).get("alpha")},
    )
    report.write(args.out_dir)
    for m in report.methods():
        r = report.row(m)
        log.info("%-22s coverage %.4f  |C| %.3f  n=%d", m, r.coverage, r.mean_cardinality, r.n)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knnsets", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--schema", choices=["jsonl", "binary"])
    s.add_argument("--num-classes", type=int, default=2)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-cal", type=int, default=2000)
    s.add_argument("--n-test", type=int, default=5000)
    s.add_argument("--separation", type=float, default=3.0)
    s.add_argument("--scales", default="1.0", help="comma-separated per-class std (or one value)")
    s.add_argument("--class-probs")
    s.add_argument("--test-class-probs")
    s.add_argument("--logit-noise", type=float, default=0.5)
    s.add_argument("--test-shift", type=float)
    s.add_argument("--shift-toward", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit the KNN and the combination temperature")
    f.add_argument("bundle")
    f.add_argument("--out", required=True, help="artifact directory")
    f.add_argument("--schema", choices=["jsonl", "binary"])
    f.add_argument("--seed", type=int)
    f.add_argument("--k-neighbors", type=int)
    f.add_argument("--activation", choices=["tanh", "identity"])
    f.add_argument("--delta", type=float)
    f.add_argument("--knn-epochs", type=int)
    f.add_argument("--knn-lr", type=float)
    f.add_argument("--knnknn-epochs", type=int)
    f.add_argument("--knnknn-lr", type=float)
    f.add_argument("--knnknn-max-fit-points", type=int)
    f.add_argument("--allow-transductive", action="store_true",
                   help="fit the combination temperature on the (unlabeled) test batch")
    f.add_argument("--threads", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("predict", help="build prediction sets for the test split")
    r.add_argument("artifacts")
    r.add_argument("--out", required=True, help="prediction JSONL path")
    r.add_argument("--bundle", help="override the bundle path recorded at fit time")
    r.add_argument("--schema", choices=["jsonl", "binary"])
    r.add_argument("--alpha", type=float)
    r.add_argument("--delta", type=float)
    r.add_argument("--kappa", type=int)
    r.add_argument("--k-sample", type=int)
    r.add_argument("--resample", action="store_true")
    r.add_argument("--no-h", action="store_true", help="emit only the ADMIT variant without the H guard on Ĉ (Ĉ_A stays guarded)")
    r.add_argument("--allow-transductive", action="store_true")
    r.add_argument("--bins", dest="num_bins", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="stratified coverage report")
    e.add_argument("predictions")
    e.add_argument("--bundle", required=True)
    e.add_argument("--schema", choices=["jsonl", "binary"])
    e.add_argument("--split", default="test", choices=["test", "calibration"])
    e.add_argument("--out-dir", required=True)
    e.add_argument("--bins", type=int)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BandUndefined, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
