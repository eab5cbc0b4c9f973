"""Command-line entry point: ``orthobo run|probe|report|bench``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .acquisition import DEFAULT_LOG_FLOOR, CvConfig
from .diagnostics import variance_probe
from .harness import (
    SEED_ENV,
    ExperimentSpec,
    apply_seed_env,
    bench,
    initial_state,
    probe_summary,
    render_bench,
    report,
    report_exit_code,
    run_experiment,
)


def _cv_from_args(args) -> dict:
    cv = {}
    if getattr(args, "cv_ridge", None) is not None:
        cv["ridge"] = args.cv_ridge
    if getattr(args, "cv_crossfit", False):
        cv["cross_fit"] = True
    return cv


def _cmd_run(args) -> int:
    spec = apply_seed_env(ExperimentSpec.from_toml(args.spec))
    overrides = {}
    for key, attr in [
        ("mc_samples", "mc_samples"),
        ("log_floor", "log_floor"),
        ("tpe_quantile", "tpe_quantile"),
        ("tpe_bootstrap", "tpe_bootstrap"),
    ]:
        val = getattr(args, attr)
        if val is not None:
            overrides[key] = val
    cv = _cv_from_args(args)
    if overrides or cv:
        cells = []
        for cell in spec.cells:
            ov = dict(cell.overrides)
            ov.update(overrides)
            if cv:
                merged = dict(ov.get("cv", {}))
                merged.update(cv)
                ov["cv"] = merged
            cells.append(replace(cell, overrides=ov))
        spec = replace(spec, cells=tuple(cells))
    out = args.out or spec.out_dir
    manifest = run_experiment(spec, out, args.jobs)
    failed = sum(r["status"] != "ok" for c in manifest["cells"] for r in c["runs"])
    total = sum(len(c["runs"]) for c in manifest["cells"])
    print(f"{total - failed}/{total} runs completed; manifest: {Path(out) / 'manifest.json'}")
    return 0 if failed == 0 else 2


def _cmd_probe(args) -> int:
    seed = int(os.environ.get(SEED_ENV, args.seed))
    estimators = [e.strip() for e in args.estimator.split(",") if e.strip()]
    if args.kernel == "tpe":
        estimators = [{"mc-ei": "tpe-mc", "orth-ei": "tpe-orth"}.get(e, e) for e in estimators]
    cfg = CvConfig(ridge=args.cv_ridge if args.cv_ridge is not None else 1e-8, cross_fit=args.cv_crossfit)
    state = initial_state(args.objective, args.kernel, args.n_init, seed)
    rep = variance_probe(state, estimators, args.probes, args.repeats, args.mc_samples, seed, cfg)
    rep.log_floor = args.log_floor
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe_report.json").write_text(json.dumps(rep.to_json(), indent=1))
    with open(out / "probe_values.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_id", "repeat_id", "estimator", "value"])
        for row in rep.rows():
            w.writerow([row[0], row[1], row[2], repr(row[3])])
    probes = []
    raw = next((e for e in estimators if e in ("mc-ei", "tpe-mc")), None)
    orth = next((e for e in estimators if e in ("orth-ei", "tpe-orth")), None)
    for e in estimators:
        print(f"{e}: mean probe variance {rep.mean_probe_variance(e):.6g}")
    if raw and orth:
        summary = probe_summary(rep, raw, orth, args.top_k)
        probes.append(summary)
        print(
            f"change {summary['percent_change']:+.2f}%  top1 {summary['raw_top1']:.3f} -> {summary['orth_top1']:.3f}"
            f"  flip rate {summary['raw_flip_rate']:.3f} -> {summary['orth_flip_rate']:.3f}"
        )
    manifest = {"version": __version__, "cells": [], "probes": probes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    path = Path(args.manifest)
    manifest = json.loads(path.read_text())
    rep = report(manifest, path.parent)
    print(rep.render(), end="")
    return report_exit_code(rep)


def _cmd_bench(args) -> int:
    samples = [int(s) for s in args.mc_samples.split(",")]
    rows = bench(args.objective, samples, args.history, tuple(args.models.split(",")), args.seed)
    print(render_bench(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orthobo", description=__doc__)
    p.add_argument("--version", action="version", version=f"orthobo {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def cv_flags(sp):
        sp.add_argument("--cv-ridge", type=float, default=None)
        sp.add_argument("--cv-crossfit", action="store_true")
        sp.add_argument("--log-floor", type=float, default=None if sp.prog.endswith("run") else DEFAULT_LOG_FLOOR)

    r = sub.add_parser("run", help="run an experiment spec (TOML)")
    r.add_argument("spec")
    r.add_argument("--out", default=None)
    r.add_argument("--jobs", type=int, default=None)
    r.add_argument("--mc-samples", type=int, default=None)
    r.add_argument("--tpe-quantile", type=float, default=None)
    r.add_argument("--tpe-bootstrap", type=int, default=None)
    cv_flags(r)
    r.set_defaults(func=_cmd_run)

    pr = sub.add_parser("probe", help="variance / ranking probe on a frozen surrogate")
    pr.add_argument("--objective", required=True)
    pr.add_argument("--kernel", default="matern52-ard")
    pr.add_argument("--estimator", default="mc-ei,orth-ei", help="comma-separated estimator names")
    pr.add_argument("--mc-samples", type=int, default=32)
    pr.add_argument("--repeats", type=int, default=16)
    pr.add_argument("--probes", type=int, default=64)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--n-init", type=int, default=32)
    pr.add_argument("--top-k", type=int, default=8)
    pr.add_argument("--out", default="probe")
    cv_flags(pr)
    pr.set_defaults(func=_cmd_probe)

    rp = sub.add_parser("report", help="summarize a manifest")
    rp.add_argument("manifest")
    rp.set_defaults(func=_cmd_report)

    b = sub.add_parser("bench", help="per-step timing of raw vs orthogonalized EI")
    b.add_argument("--objective", default="levy:16")
    b.add_argument("--mc-samples", default="64,512")
    b.add_argument("--history", type=int, default=64)
    b.add_argument("--models", default="matern52-ard")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
