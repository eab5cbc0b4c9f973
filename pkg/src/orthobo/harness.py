"""Experiment orchestration: specs, replications, persisted results, reports.

An experiment is a list of cells (method x objective x config overrides)
run for a number of replications. Replication ``r`` of every cell uses
seed ``base_seed + r``, so cells that differ only in the method share
their initial designs. Each run writes one trace JSON; each cell gets an
aggregate regret CSV; a manifest records everything needed to replay any
run bit-identically.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import __version__
from .acquisition import CvConfig
from .benchmarks import make_objective
from .diagnostics import GpState, TpeState, percent_change, ranking_stability
from .engine import RunConfig, RunTrace, run_bo
from .errors import MissingRuns
from .gp import ObservationSet, fit_map, laplace_posterior
from .kernels import KernelSpec
from .mathcore import make_rng, sobol_points

log = logging.getLogger(__name__)

SEED_ENV = "ORTHOBO_SEED"
_CONFIG_FIELDS = set(RunConfig.__dataclass_fields__)


# ---------------------------------------------------------------------------
# spec


@dataclass(frozen=True)
class Cell:
    name: str
    method: str
    objective: str
    overrides: dict = field(default_factory=dict)

    def config(self, seed: int) -> RunConfig:
        kw = dict(self.overrides)
        kw.update(objective=self.objective, method=self.method, seed=seed)
        return RunConfig.from_dict(kw)


@dataclass(frozen=True)
class ExperimentSpec:
    cells: tuple[Cell, ...]
    replications: int = 16
    base_seed: int = 0
    out_dir: str = "results"
    jobs: int = 1

    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.replications)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        defaults = _normalize_overrides(d.get("defaults", {}))
        cells = []
        for i, c in enumerate(d.get("cells", [])):
            c = dict(c)
            method = c.pop("method")
            objective = c.pop("objective")
            name = c.pop("name", None) or f"{i:02d}-{method}-{objective.replace(':', '')}"
            extra = c.pop("overrides", {})
            ov = dict(defaults)
            ov.update(_normalize_overrides(c))
            ov.update(_normalize_overrides(extra))
            cells.append(Cell(name, method, objective, ov))
        names = [c.name for c in cells]
        if len(set(names)) != len(names):
            raise ValueError("cell names must be unique")
        spec = cls(
            tuple(cells),
            int(d.get("replications", 16)),
            int(d.get("base_seed", 0)),
            str(d.get("out", d.get("out_dir", "results"))),
            int(d.get("jobs", 1)),
        )
        for cell in spec.cells:  # resolve every cell up front
            cell.config(spec.base_seed)
        return spec

    @classmethod
    def from_toml(cls, path: str | os.PathLike) -> "ExperimentSpec":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def _normalize_overrides(d: dict) -> dict:
    """Map TOML tables (``cv``, ``ensemble``) onto RunConfig fields."""
    out: dict[str, Any] = {}
    for key, val in d.items():
        if key == "ensemble":
            for k, v in val.items():
                target = {"models": "models", "tau": "temperature", "floor": "floor"}.get(k)
                if target is None:
                    raise ValueError(f"unknown ensemble key {k!r}")
                out[target] = tuple(v) if target == "models" else v
        elif key == "cv":
            out["cv"] = dict(val)
        elif key in _CONFIG_FIELDS:
            out[key] = tuple(val) if key == "models" else val
        else:
            raise ValueError(f"unknown config key {key!r}")
    return out


def apply_seed_env(spec: ExperimentSpec) -> ExperimentSpec:
    val = os.environ.get(SEED_ENV)
    if val is None or val == "":
        return spec
    return ExperimentSpec(spec.cells, spec.replications, int(val), spec.out_dir, spec.jobs)


# ---------------------------------------------------------------------------
# running


def _run_one(payload: tuple[dict, str]) -> dict:
    cfg_dict, path = payload
    cfg = RunConfig.from_dict(cfg_dict)
    t0 = time.perf_counter()
    try:
        trace = run_bo(cfg)
    except Exception as exc:  # recorded in the manifest, never fatal
        log.error("run failed: %s", exc)
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}
    Path(path).write_text(trace.dumps())
    return {
        "status": "ok",
        "final_regret": trace.final_regret,
        "step_ms": [round(v, 3) for v in trace.step_ms],
        "model_ms": [[round(v, 3) for v in row] for row in trace.model_ms],
        "failed_draws": trace.failed_draws,
        "wall_s": round(time.perf_counter() - t0, 3),
    }


def aggregate_regret(curves: list[np.ndarray]) -> list[tuple[int, float, float, int]]:
    """Mean best-so-far regret per iteration with a normal-approximation 95% CI."""
    R = np.vstack(curves)
    n = R.shape[0]
    mean = R.mean(axis=0)
    sd = R.std(axis=0, ddof=1) if n > 1 else np.zeros(R.shape[1])
    ci = 1.96 * sd / math.sqrt(n)
    return [(t, float(mean[t]), float(ci[t]), n) for t in range(R.shape[1])]


def write_aggregate_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_regret", "ci95", "n_runs"])
        for t, m, c, n in rows:
            w.writerow([t, repr(m), repr(c), n])


def _curve_from_trace(path: Path, n_init: int) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    r = np.array([it["regret"] for it in data["iterations"]])
    return r[n_init - 1 :]


def run_experiment(spec: ExperimentSpec, out_dir: str | os.PathLike | None = None, jobs: int | None = None) -> dict:
    """Run every cell and replication; returns (and writes) the manifest."""
    out = Path(out_dir or spec.out_dir)
    jobs = jobs or spec.jobs
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "aggregates").mkdir(parents=True, exist_ok=True)
    tasks, index = [], []
    for cell in spec.cells:
        (out / "traces" / cell.name).mkdir(parents=True, exist_ok=True)
        for r, seed in enumerate(spec.seeds()):
            cfg = cell.config(seed)
            path = out / "traces" / cell.name / f"rep{r:03d}.json"
            tasks.append((cfg.to_dict(), str(path)))
            index.append((cell, r, seed, cfg, path))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]

    cells_out = []
    for cell in spec.cells:
        runs = []
        curves = []
        for (c, r, seed, cfg, path), res in zip(index, results):
            if c is not cell:
                continue
            entry = {
                "replication": r,
                "seed": seed,
                "path": os.path.relpath(path, out),
                "config": cfg.to_dict(),
            }
            entry.update({k: v for k, v in res.items() if k != "trace"})
            runs.append(entry)
            if res["status"] == "ok":
                curves.append(_curve_from_trace(path, cfg.n_init))
        agg_path = None
        if curves:
            agg_path = out / "aggregates" / f"{cell.name}.csv"
            write_aggregate_csv(agg_path, aggregate_regret(curves))
        cells_out.append(
            {
                "name": cell.name,
                "method": cell.method,
                "objective": cell.objective,
                "overrides": _jsonable(cell.overrides),
                "aggregate_csv": None if agg_path is None else os.path.relpath(agg_path, out),
                "runs": runs,
            }
        )
    manifest = {
        "version": __version__,
        "spec": {
            "replications": spec.replications,
            "base_seed": spec.base_seed,
            "jobs": jobs,
            "seed_rule": "base_seed + replication",
        },
        "cells": cells_out,
        "probes": [],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, CvConfig):
        return {"ridge": obj.ridge, "cross_fit": obj.cross_fit, "enabled": obj.enabled}
    return obj


def replay_run(manifest: dict, cell_name: str, replication: int) -> RunTrace:
    """Re-execute one run from its recorded configuration."""
    for cell in manifest["cells"]:
        if cell["name"] == cell_name:
            for run in cell["runs"]:
                if run["replication"] == replication:
                    return run_bo(RunConfig.from_dict(run["config"]))
    raise KeyError(f"no run {cell_name!r}/{replication} in manifest")


# ---------------------------------------------------------------------------
# frozen probe states


def initial_state(objective: str, kernel: str = "matern52-ard", n_init: int = 32, seed: int = 0):
    """Frozen surrogate on an initial design, as used by the probe protocol.

    GP states are fitted on the first ``n_init`` points of the unscrambled
    Sobol sequence after the origin. TPE states use ``n_init`` uniform
    random points drawn from ``seed``.
    """
    obj = make_objective(objective)
    if kernel == "tpe":
        X = make_rng(seed, 11).random((n_init, obj.dim))
        return TpeState(ObservationSet(X, obj.evaluate_many(X)), label=f"{objective}/tpe")
    X = sobol_points(obj.dim, n_init, skip=1)
    data = ObservationSet(X, obj.evaluate_many(X))
    fit = fit_map(data, KernelSpec(kernel, obj.dim), rng=make_rng(seed, 12))
    return GpState(fit, laplace_posterior(fit), label=f"{objective}/{kernel}")


def probe_summary(report, raw: str, orth: str, K: int = 8) -> dict:
    vr, vo = report.mean_probe_variance(raw), report.mean_probe_variance(orth)
    ar, fr = ranking_stability(report.values[raw], K)
    ao, fo = ranking_stability(report.values[orth], K)
    return {
        "label": report.label,
        "S": report.S,
        "repeats": report.R,
        "raw_estimator": raw,
        "orth_estimator": orth,
        "raw_variance": vr,
        "orth_variance": vo,
        "percent_change": percent_change(vr, vo) if vr > 0 else 0.0,
        "raw_log_variance": report.mean_log_probe_variance(raw),
        "orth_log_variance": report.mean_log_probe_variance(orth),
        "raw_sample_variance": report.mean_sample_variance(raw),
        "orth_sample_variance": report.mean_sample_variance(orth),
        "raw_top1": ar,
        "orth_top1": ao,
        "raw_flip_rate": fr,
        "orth_flip_rate": fo,
    }


# ---------------------------------------------------------------------------
# reporting


def format_percent(pct: float) -> str:
    return f"({pct:.2f}%)"


def _table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


@dataclass
class Report:
    regret_rows: list[list]
    variance_rows: list[list]
    ranking_rows: list[list]
    missing: list[str]

    REGRET_HEADERS = ["cell", "method", "objective", "runs", "mean_final_regret", "ci95"]
    VARIANCE_HEADERS = ["state", "S", "raw_variance", "orth_variance", "change"]
    RANKING_HEADERS = ["state", "S", "estimator", "top1_agreement", "flip_rate", "probe_variance"]

    @property
    def empty(self) -> bool:
        return not (self.regret_rows or self.variance_rows or self.ranking_rows)

    def render(self) -> str:
        out = io.StringIO()
        out.write("Final regret\n")
        out.write(_table(self.REGRET_HEADERS, self.regret_rows) + "\n\n")
        out.write("Variance reduction\n")
        out.write(_table(self.VARIANCE_HEADERS, self.variance_rows) + "\n\n")
        out.write("Ranking stability\n")
        out.write(_table(self.RANKING_HEADERS, self.ranking_rows) + "\n")
        if self.missing:
            out.write("\nMissing runs:\n")
            for m in self.missing:
                out.write(f"  {m}\n")
        return out.getvalue()


def report(manifest: dict, base_dir: str | os.PathLike = ".") -> Report:
    """Summary tables from a manifest; missing runs are listed, not fatal."""
    base = Path(base_dir)
    regret_rows, missing = [], []
    for cell in manifest.get("cells", []):
        finals = []
        for run in cell.get("runs", []):
            path = base / run["path"]
            if run.get("status") != "ok" or not path.exists():
                missing.append(f"{cell['name']}/rep{run['replication']:03d}")
                continue
            data = json.loads(path.read_text())
            finals.append(data["iterations"][-1]["regret"])
        if finals:
            f = np.array(finals)
            ci = 1.96 * f.std(ddof=1) / math.sqrt(f.size) if f.size > 1 else 0.0
            regret_rows.append([cell["name"], cell["method"], cell["objective"], f.size, f"{f.mean():.6g}", f"{ci:.3g}"])
    variance_rows, ranking_rows = [], []
    for p in manifest.get("probes", []):
        variance_rows.append(
            [p["label"], p["S"], f"{p['raw_variance']:.4g}", f"{p['orth_variance']:.4g}", format_percent(p["percent_change"])]
        )
        for kind in ("raw", "orth"):
            ranking_rows.append(
                [
                    p["label"],
                    p["S"],
                    p[f"{kind}_estimator"],
                    f"{p[f'{kind}_top1']:.3f}",
                    f"{p[f'{kind}_flip_rate']:.3f}",
                    f"{p[f'{kind}_variance']:.4g}",
                ]
            )
    return Report(regret_rows, variance_rows, ranking_rows, missing)


def report_exit_code(rep: Report) -> int:
    """0 on success, 1 for an empty manifest, 2 when runs are missing."""
    if rep.empty:
        return 1
    if rep.missing:
        return 2
    return 0


def require_complete(rep: Report) -> None:
    if rep.missing:
        raise MissingRuns(", ".join(rep.missing))


# ---------------------------------------------------------------------------
# timing


def time_step(
    objective: str,
    method: str,
    S: int,
    history: int,
    models: tuple[str, ...] = ("matern52-ard",),
    seed: int = 0,
    **overrides,
) -> float:
    """Wall clock (ms) of one full loop iteration at a given history size."""
    cfg = RunConfig(objective, 1, method, n_init=history, mc_samples=S, models=models, seed=seed, **overrides)
    return run_bo(cfg).step_ms[0]


def bench(
    objective: str = "levy:16",
    samples=(64, 512),
    history: int = 64,
    models: tuple[str, ...] = ("matern52-ard",),
    seed: int = 0,
) -> list[dict]:
    rows = []
    for S in samples:
        mc = time_step(objective, "mc-ei", S, history, models, seed)
        orth = time_step(objective, "orth-ei", S, history, models, seed)
        rows.append({"objective": objective, "S": S, "history": history, "mc_ms": mc, "orth_ms": orth, "ratio": orth / mc})
    return rows


def render_bench(rows: list[dict]) -> str:
    return _table(
        ["objective", "S", "history", "mc_ms", "orth_ms", "ratio"],
        [[r["objective"], r["S"], r["history"], f"{r['mc_ms']:.1f}", f"{r['orth_ms']:.1f}", f"{r['ratio']:.2f}"] for r in rows],
    )
