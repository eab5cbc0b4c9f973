"""The Bayesian-optimization loop.

Each iteration fits every surrogate in the menu to the history, updates the
ensemble weights with the previous step's observation, builds a frozen
acquisition per surrogate (one set of posterior or bootstrap draws shared
by every candidate), aggregates with the weights, applies the outer log and
maximizes with Sobol screening plus batched compass search.

Random streams are keyed by purpose and iteration, so two runs that differ
only in the estimator share their initial design and surrogate fits, and
disabling the control variate replays the raw estimator exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .acquisition import CvConfig, DEFAULT_LOG_FLOOR, GpMarginalEI, outer_log
from .benchmarks import Objective, inject_outliers, make_objective
from .ensemble import EnsembleState, aggregate_arrays, update_weights
from .errors import OrthoBOError, SurrogateFailure
from .gp import ObservationSet, fit_map, laplace_posterior, predict_map, predictive_log_score
from .kernels import FAMILIES, KernelSpec
from .mathcore import make_rng, sobol_points, sub_seed
from .tpe import tpe_bootstrap, tpe_fit, tpe_log_score

log = logging.getLogger(__name__)

METHODS = ("sobol-random", "mc-ei", "orth-ei", "lcb", "tpe-mc", "tpe-orth")
LCB_BETA = 2.0

# stream identifiers for make_rng(seed, stream, iteration, model)
_INIT, _FIT, _ACQ, _OPT, _OUTLIER = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class RunConfig:
    objective: str
    budget: int
    method: str = "orth-ei"
    n_init: int = 32
    mc_samples: int = 512
    models: tuple[str, ...] | None = None
    cv: CvConfig = CvConfig()
    temperature: float = 1.0
    floor: float = 1e-3
    raw_samples: int = 512
    restarts: int = 8
    local_budget: int = 128
    seed: int = 0
    outlier_prob: float = 0.0
    tpe_quantile: float = 0.2
    tpe_bootstrap: int = 32
    log_floor: float = DEFAULT_LOG_FLOOR
    fixed_noise: float | None = None
    fit_restarts: int = 4
    fit_budget: int = 200
    scramble_init: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.budget < 0 or self.n_init < 1 or self.mc_samples < 1:
            raise ValueError("need budget >= 0, n_init >= 1, mc_samples >= 1")
        if not 1 <= self.restarts <= self.raw_samples:
            raise ValueError("need 1 <= restarts <= raw_samples")
        if self.local_budget < 0:
            raise ValueError("local_budget must be >= 0")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must be in [0, 1]")
        if isinstance(self.cv, dict):
            object.__setattr__(self, "cv", CvConfig(**self.cv))
        models = self.models
        if models is None:
            models = ("tpe",) if self.method.startswith("tpe") else ("matern52-ard",)
        models = tuple(models)
        for m in models:
            if m != "tpe" and m not in FAMILIES:
                raise ValueError(f"unknown surrogate {m!r}")
        if self.method == "lcb" and "tpe" in models:
            raise ValueError("lcb needs GP surrogates only")
        object.__setattr__(self, "models", models)
        make_objective(self.objective)  # resolve early

    @property
    def orthogonalized(self) -> bool:
        return self.method in ("orth-ei", "tpe-orth")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["models"] = list(self.models)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "cv" in d and isinstance(d["cv"], dict):
            d["cv"] = CvConfig(**d["cv"])
        if d.get("models") is not None:
            d["models"] = tuple(d["models"])
        return cls(**d)


@dataclass
class IterationRecord:
    t: int
    lam: list[float]
    y_raw: float
    corrupted: bool
    f_star: float
    regret: float
    weights: list[float]
    acq_value: float | None
    fallback: bool = False

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "lambda": self.lam,
            "y_raw": self.y_raw,
            "corrupted": self.corrupted,
            "f_star": self.f_star,
            "regret": self.regret,
            "weights": self.weights,
            "acq_value": self.acq_value,
            # wall-clock timings live in the result manifest so traces stay
            # byte-identical across reruns
            "step_ms": None,
        }


@dataclass
class RunTrace:
    config: RunConfig
    records: list[IterationRecord]
    best_lambda: list[float]
    best_y: float
    step_ms: list[float] = field(default_factory=list)
    model_ms: list[list[float]] = field(default_factory=list)
    failed_draws: int = 0

    @property
    def regret(self) -> np.ndarray:
        """Best-so-far regret after the initial design and each iteration."""
        r = np.array([rec.regret for rec in self.records])
        n0 = self.config.n_init
        return r[n0 - 1 :]

    @property
    def final_regret(self) -> float:
        return float(self.records[-1].regret)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "iterations": [r.to_json() for r in self.records],
            "best": {"lambda": self.best_lambda, "y": self.best_y},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def best_so_far(values: Sequence[float], f_opt: float) -> np.ndarray:
    """Running minimum of ``values`` minus the known optimum."""
    v = np.asarray(values, dtype=float)
    return np.minimum.accumulate(v) - f_opt


# ---------------------------------------------------------------------------
# acquisition maximization


def optimize_acquisition(
    score: Callable[[np.ndarray], np.ndarray],
    d: int,
    raw_samples: int = 512,
    restarts: int = 8,
    local_budget: int = 128,
    rng: np.random.Generator | None = None,
    init_step: float = 0.1,
    min_step: float = 1e-3,
    return_value: bool = False,
):
    """Maximize a batched score over ``[0, 1]^d``.

    ``score`` maps an ``(m, d)`` array to ``m`` values and must be
    deterministic (freeze any Monte Carlo draws before calling). The
    ``raw_samples`` screening points come from a Sobol sequence scrambled
    with a seed drawn from ``rng`` (unscrambled when ``rng`` is None). The
    best ``restarts`` of them seed a compass search: each sweep evaluates
    all ``2d`` axis moves of every active start in one batch, moves each
    start to its best improving neighbour, and halves the step of starts
    without improvement. A start stops when its step drops below
    ``min_step`` or it has used ``local_budget`` evaluations.
    """
    if not 1 <= restarts <= raw_samples:
        raise ValueError("need 1 <= restarts <= raw_samples")
    scramble = None if rng is None else sub_seed(rng)
    cand = sobol_points(d, raw_samples, scramble_seed=scramble)
    vals = np.asarray(score(cand), dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    top = np.argsort(-vals, kind="stable")[:restarts]
    X = cand[top].copy()
    F = vals[top].copy()
    step = np.full(restarts, init_step)
    used = np.zeros(restarts, dtype=int)
    moves = np.vstack([np.eye(d), -np.eye(d)])
    while True:
        active = np.flatnonzero((step >= min_step) & (used + 2 * d <= local_budget))
        if active.size == 0:
            break
        nbrs = np.clip(X[active, None, :] + step[active, None, None] * moves[None], 0.0, 1.0)
        nv = np.asarray(score(nbrs.reshape(-1, d)), dtype=float).reshape(active.size, 2 * d)
        nv = np.where(np.isfinite(nv), nv, -np.inf)
        used[active] += 2 * d
        j = np.argmax(nv, axis=1)
        best = nv[np.arange(active.size), j]
        improved = best > F[active]
        up = active[improved]
        X[up] = nbrs[improved, j[improved]]
        F[up] = best[improved]
        step[active[~improved]] *= 0.5
    k = int(np.argmax(F))
    return (X[k].copy(), float(F[k])) if return_value else X[k].copy()


# ---------------------------------------------------------------------------
# surrogates inside the loop


@dataclass
class _GpState:
    fit: object
    q: object


@dataclass
class _TpeState:
    model: object
    data: ObservationSet


def _fit_models(config: RunConfig, data: ObservationSet, t: int) -> tuple[list, list[float]]:
    states, times = [], []
    for m, name in enumerate(config.models):
        t0 = time.perf_counter()
        try:
            if name == "tpe":
                states.append(_TpeState(tpe_fit(data, config.tpe_quantile), data))
            else:
                spec = KernelSpec(name, data.dim, config.fixed_noise)
                fit = fit_map(
                    data,
                    spec,
                    restarts=config.fit_restarts,
                    rng=make_rng(config.seed, _FIT, t, m),
                    budget=config.fit_budget,
                )
                states.append(_GpState(fit, laplace_posterior(fit)))
        except (OrthoBOError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise SurrogateFailure(f"{name}: {exc}") from exc
        times.append(1e3 * (time.perf_counter() - t0))
    return states, times


def _log_scores(states: list, x: np.ndarray, y_raw: float) -> np.ndarray:
    out = []
    for st in states:
        if isinstance(st, _TpeState):
            out.append(tpe_log_score(st.model, x))
        else:
            data = st.fit.data
            out.append(predictive_log_score(st.fit, x, float(data.standardize_y(y_raw))))
    return np.array(out)


def _build_score(config: RunConfig, states: list, data: ObservationSet, weights: np.ndarray, t: int):
    """Frozen outer-logged ensemble acquisition ``X -> (m,)`` plus draw-failure count."""
    parts = []
    failed = 0
    for m, st in enumerate(states):
        rng = make_rng(config.seed, _ACQ, t, m)
        if config.method == "lcb":
            fit = st.fit

            def part(X, fit=fit):
                mu, var = predict_map(fit, X)
                return -(mu - LCB_BETA * np.sqrt(var))

        elif isinstance(st, _TpeState):
            ens = tpe_bootstrap(st.data, config.tpe_bootstrap, config.tpe_quantile, rng)
            est = "tpe-orth" if config.orthogonalized else "tpe-mc"

            def part(X, ens=ens, est=est):
                return ens.values(X, est, config.cv)

        else:
            acq = GpMarginalEI(st.fit, st.q, config.mc_samples, rng)
            failed += acq.failed_samples
            est = "orth-ei" if config.orthogonalized else "mc-ei"

            def part(X, acq=acq, est=est):
                return acq.values(X, est, config.cv)

        parts.append(part)

    def score(X: np.ndarray) -> np.ndarray:
        agg = aggregate_arrays([p(X) for p in parts], weights)
        if config.method == "lcb":
            return agg
        return outer_log(agg, config.log_floor)

    return score, failed


# ---------------------------------------------------------------------------
# the loop


def run_bo(config: RunConfig, objective: Objective | None = None) -> RunTrace:
    obj = objective or make_objective(config.objective)
    d = obj.dim
    n0 = config.n_init
    # replications get independent scrambled designs; the unscrambled
    # sequence would give every seed the same design (including the cube
    # centre, which is the optimum of some benchmarks)
    scramble = sub_seed(make_rng(config.seed, _INIT)) if config.scramble_init else None
    design = sobol_points(d, n0 + config.budget, skip=1, scramble_seed=scramble)
    X = design[:n0].copy()
    y_clean = obj.evaluate_many(X)
    y_used = y_clean.copy()
    records: list[IterationRecord] = []
    for i in range(n0):
        records.append(
            IterationRecord(
                0,
                X[i].tolist(),
                float(y_used[i]),
                False,
                float(np.min(y_used[: i + 1])),
                float(np.min(y_clean[: i + 1]) - obj.f_opt),
                [],
                None,
            )
        )

    ens = EnsembleState.uniform(len(config.models), config.temperature, config.floor)
    prev_states: list | None = None
    step_ms: list[float] = []
    model_ms: list[list[float]] = []
    failed_draws = 0

    for t in range(1, config.budget + 1):
        t_start = time.perf_counter()
        acq_value = None
        fallback = False
        fit_times: list[float] = []
        if config.method == "sobol-random":
            x_next = design[n0 + t - 1]
        else:
            data = ObservationSet(X, y_used)
            try:
                states, fit_times = _fit_models(config, data, t)
                if prev_states is not None:
                    ens = update_weights(ens, _log_scores(prev_states, X[-1], float(y_used[-1])))
                score, failed = _build_score(config, states, data, ens.weights, t)
                failed_draws += failed
                x_next, acq_value = optimize_acquisition(
                    score,
                    d,
                    config.raw_samples,
                    config.restarts,
                    config.local_budget,
                    make_rng(config.seed, _OPT, t),
                    return_value=True,
                )
                prev_states = states
            except (SurrogateFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.warning("iteration %d: surrogate failure (%s); using the next Sobol point", t, exc)
                x_next = design[n0 + t - 1]
                fallback = True
                prev_states = None
        y_c = obj.evaluate(x_next)
        y_u, corrupted = inject_outliers(
            y_c, config.outlier_prob, make_rng(config.seed, _OUTLIER, t), y_used
        )
        X = np.vstack([X, x_next[None, :]])
        y_clean = np.append(y_clean, y_c)
        y_used = np.append(y_used, y_u)
        records.append(
            IterationRecord(
                t,
                np.asarray(x_next, dtype=float).tolist(),
                float(y_u),
                bool(corrupted),
                float(np.min(y_used)),
                float(np.min(y_clean) - obj.f_opt),
                ens.weights.tolist() if config.method != "sobol-random" else [],
                None if acq_value is None or not np.isfinite(acq_value) else float(acq_value),
                fallback,
            )
        )
        step_ms.append(1e3 * (time.perf_counter() - t_start))
        model_ms.append(fit_times)

    k = int(np.argmin(y_used))
    return RunTrace(config, records, X[k].tolist(), float(y_used[k]), step_ms, model_ms, failed_draws)
