"""Probe protocols for estimator quality.

A *state* is a frozen surrogate from which paired samples can be drawn:
``state.draw(X, S, rng)`` returns the per-draw acquisition values
``(S, m)`` at the probe points and the matching control variates
``(S, d_c)``. The probe protocol rebuilds the acquisition ``R`` times with
fresh draws on a fixed probe set and never touches the fitted state, so
only Monte Carlo noise differs between repeats.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .acquisition import CvConfig, DEFAULT_LOG_FLOOR, GpMarginalEI, orthogonalize
from .errors import InsufficientRepeats, NonpositiveGap
from .gp import GpFit, ObservationSet, ParamPosterior, score
from .mathcore import make_rng, sobol_points
from .tpe import DEFAULT_QUANTILE, tpe_bootstrap

DEFAULT_TOP_K = 8
ORACLE_SAMPLES = 2**15


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class GpState:
    """Frozen GP fit with its hyperparameter posterior."""

    fit: GpFit
    q: ParamPosterior
    label: str = "gp"

    @property
    def dim(self) -> int:
        return self.fit.data.dim

    def draw(self, X, S: int, rng):
        acq = GpMarginalEI(self.fit, self.q, S, rng)
        return acq.samples(X), acq.scores

    def fingerprint(self) -> str:
        return _digest(self.fit.theta, self.fit.chol, self.fit.alpha, self.q.mean, self.q.cov)


@dataclass(frozen=True)
class TpeState:
    """TPE history; each draw is a fresh bootstrap ensemble."""

    data: ObservationSet
    quantile: float = DEFAULT_QUANTILE
    label: str = "tpe"

    @property
    def dim(self) -> int:
        return self.data.dim

    def draw(self, X, S: int, rng):
        ens = tpe_bootstrap(self.data, S, self.quantile, rng)
        return ens.samples(X), ens.control_variates

    def fingerprint(self) -> str:
        return _digest(self.data.X, self.data.y_raw)


@dataclass(frozen=True)
class LinearGaussianState:
    """``h(theta) = a^T theta + c`` under a Gaussian ``q``, with the score as control variate.

    The acquisition does not depend on the probe location; every probe
    column carries the same draws.
    """

    a: np.ndarray
    c: float
    q: ParamPosterior
    label: str = "linear-gaussian"

    @property
    def dim(self) -> int:
        return 1

    def draw(self, X, S: int, rng):
        theta = self.q.sample(rng, S)
        h = theta @ np.asarray(self.a, dtype=float) + self.c
        m = np.atleast_2d(X).shape[0]
        return np.repeat(h[:, None], m, axis=1), score(self.q, theta)

    @property
    def population_gamma(self) -> np.ndarray:
        """``Sigma_g^{-1} Cov(g, h) = -Sigma_q a``."""
        return -self.q.cov @ np.asarray(self.a, dtype=float)

    def fingerprint(self) -> str:
        return _digest(self.a, [self.c], self.q.mean, self.q.cov)


_RAW = {"mc-ei", "tpe-mc", "raw"}
_ORTH = {"orth-ei", "tpe-orth", "orth"}


def _apply(estimator: str, h: np.ndarray, cv: np.ndarray, cfg: CvConfig):
    """Return ``(values (m,), per-draw adjusted samples (S, m))``."""
    if estimator in _RAW:
        return h.mean(axis=0), h
    if estimator in _ORTH:
        vals, gamma, _ = orthogonalize(h, cv, cfg)
        # with cross-fitting gamma is the average of the two fold coefficients
        return vals, h - cv @ gamma
    raise ValueError(f"unknown estimator {estimator!r}")


@dataclass
class ProbeReport:
    """Repeated estimates on a fixed probe set.

    ``values[est]`` has shape ``(n_p, R)``; ``sample_var[est]`` holds the
    per-repeat variance of the per-draw (adjusted) samples, same shape.
    """

    probes: np.ndarray
    values: dict[str, np.ndarray]
    sample_var: dict[str, np.ndarray]
    S: int
    seeds: list[int]
    label: str
    state_hash: str
    log_floor: float = DEFAULT_LOG_FLOOR
    extra: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return next(iter(self.values.values())).shape[1]

    def probe_variance(self, estimator: str) -> np.ndarray:
        return np.var(self.values[estimator], axis=1, ddof=1)

    def mean_probe_variance(self, estimator: str) -> float:
        return float(np.mean(self.probe_variance(estimator)))

    def mean_log_probe_variance(self, estimator: str) -> float:
        v = np.log(np.maximum(self.values[estimator], self.log_floor))
        return float(np.mean(np.var(v, axis=1, ddof=1)))

    def mean_sample_variance(self, estimator: str) -> float:
        return float(np.mean(self.sample_var[estimator]))

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "S": self.S,
            "seeds": self.seeds,
            "state_hash": self.state_hash,
            "probes": self.probes.tolist(),
            "estimators": {
                est: {
                    "values": v.tolist(),
                    "mean_probe_variance": self.mean_probe_variance(est),
                    "mean_log_probe_variance": self.mean_log_probe_variance(est),
                    "mean_sample_variance": self.mean_sample_variance(est),
                }
                for est, v in self.values.items()
            },
        }

    def rows(self):
        """Flat ``(probe_id, repeat_id, estimator, value)`` rows."""
        for est, v in self.values.items():
            for i in range(v.shape[0]):
                for r in range(v.shape[1]):
                    yield i, r, est, float(v[i, r])


def probe_points(dim: int, n_probes: int, seed: int) -> np.ndarray:
    return sobol_points(dim, n_probes, scramble_seed=seed)


def variance_probe(
    state,
    estimators: Sequence[str] = ("mc-ei", "orth-ei"),
    n_probes: int = 64,
    repeats: int = 16,
    S: int = 32,
    seed: int = 0,
    cfg: CvConfig = CvConfig(),
    repeat_seeds: Sequence[int] | None = None,
    probes: np.ndarray | None = None,
) -> ProbeReport:
    """Rebuild the acquisition ``repeats`` times on a fixed probe set.

    All estimators are evaluated on the same draws within a repeat. Repeat
    ``r`` uses ``make_rng(repeat_seeds[r])``; by default the seeds are
    ``seed * 1000 + r + 1`` so they never collide with the probe seed.
    """
    if isinstance(estimators, str):
        estimators = (estimators,)
    before = state.fingerprint()
    P = probe_points(state.dim, n_probes, seed) if probes is None else np.atleast_2d(probes)
    seeds = list(repeat_seeds) if repeat_seeds is not None else [seed * 1000 + r + 1 for r in range(repeats)]
    vals = {e: np.empty((P.shape[0], len(seeds))) for e in estimators}
    svar = {e: np.empty((P.shape[0], len(seeds))) for e in estimators}
    for r, s in enumerate(seeds):
        h, cv = state.draw(P, S, make_rng(s))
        for e in estimators:
            v, adj = _apply(e, h, cv, cfg)
            vals[e][:, r] = v
            svar[e][:, r] = np.var(adj, axis=0, ddof=1) if S > 1 else 0.0
    if state.fingerprint() != before:
        raise RuntimeError("probe protocol modified the surrogate state")
    return ProbeReport(P, vals, svar, S, seeds, getattr(state, "label", ""), before)


def percent_change(raw: float, orth: float) -> float:
    """``100 (orth / raw - 1)``: negative numbers are reductions."""
    return 100.0 * (orth / raw - 1.0)


# ---------------------------------------------------------------------------
# ranking


def ranking_stability(values, K: int = DEFAULT_TOP_K) -> tuple[float, float]:
    """Top-1 agreement and adjacent-pair flip rate for an ``(n_p, R)`` matrix.

    ``values`` may also be a ``(ProbeReport, estimator)`` pair.
    """
    if isinstance(values, tuple):
        report, est = values
        values = report.values[est]
    V = np.asarray(values, dtype=float)
    n_p, R = V.shape
    if R < 2:
        raise InsufficientRepeats("need at least 2 repeats")
    argmax = np.argmax(V, axis=0)
    modal = int(np.argmax(np.bincount(argmax, minlength=n_p)))
    agreement = float(np.mean(argmax == modal))
    order = np.argsort(-V.mean(axis=1), kind="stable")[: min(K, n_p)]
    if order.size < 2:
        return agreement, 0.0
    hi, lo = V[order[:-1]], V[order[1:]]
    flips = float(np.mean(hi < lo))
    return agreement, flips


class CantelliResult(NamedTuple):
    bound: float
    satisfied: bool


def cantelli_bound(var: float, delta: float) -> float:
    if delta <= 0:
        raise NonpositiveGap("the gap must be positive")
    if var <= 0:
        return 0.0
    return float(var / (var + delta * delta))


def cantelli_check(delta: float, var: float, flips: int, repeats: int) -> CantelliResult:
    """Compare the empirical flip frequency with ``var / (var + delta^2)``.

    Satisfied when ``flips / repeats <= bound + 3 sqrt(bound (1 - bound) / repeats)``.
    """
    bound = cantelli_bound(var, delta)
    if repeats < 1:
        raise InsufficientRepeats("need at least one repeat")
    slack = 3.0 * math.sqrt(bound * (1.0 - bound) / repeats)
    return CantelliResult(bound, bool(flips / repeats <= bound + slack + 1e-12))


def oracle_values(state, X, S: int = ORACLE_SAMPLES, seed: int = 0, chunk: int = 4096) -> np.ndarray:
    """High-budget raw Monte Carlo means at ``X`` (chunked to bound memory)."""
    X = np.atleast_2d(X)
    total = np.zeros(X.shape[0])
    done = 0
    k = 0
    while done < S:
        b = min(chunk, S - done)
        h, _ = state.draw(X, b, make_rng(seed, 77, k))
        total += h.sum(axis=0)
        done += b
        k += 1
    return total / S


@dataclass
class PairCheck:
    i: int
    j: int
    delta: float
    var: dict
    flips: dict
    result: dict


def pairwise_cantelli(
    state,
    probes: np.ndarray,
    oracle: np.ndarray,
    estimators: Sequence[str] = ("mc-ei", "orth-ei"),
    K: int = DEFAULT_TOP_K,
    repeats: int = 16,
    S: int = 32,
    seed: int = 0,
    cfg: CvConfig = CvConfig(),
) -> list[PairCheck]:
    """Cantelli checks on every pair among the oracle's top ``K`` probes.

    Each pair is oriented so the oracle gap is positive. Differences are
    estimated on common draws with one coefficient for the difference.
    """
    top = np.argsort(-oracle, kind="stable")[:K]
    pairs = [(int(top[a]), int(top[b])) for a in range(len(top)) for b in range(a + 1, len(top))]
    pairs = [(i, j) for i, j in pairs if oracle[i] - oracle[j] > 0]
    est = {e: np.empty((len(pairs), repeats)) for e in estimators}
    sub = probes[top]
    pos = {int(p): k for k, p in enumerate(top)}
    for r in range(repeats):
        h, cv = state.draw(sub, S, make_rng(seed * 1000 + r + 1))
        for n, (i, j) in enumerate(pairs):
            diff = (h[:, pos[i]] - h[:, pos[j]])[:, None]
            for e in estimators:
                est[e][n, r] = _apply(e, diff, cv, cfg)[0][0]
    out = []
    for n, (i, j) in enumerate(pairs):
        delta = float(oracle[i] - oracle[j])
        var = {e: float(np.var(est[e][n], ddof=1)) for e in estimators}
        flips = {e: int(np.sum(est[e][n] <= 0)) for e in estimators}
        res = {e: cantelli_check(delta, var[e], flips[e], repeats) for e in estimators}
        out.append(PairCheck(i, j, delta, var, flips, res))
    return out


# ---------------------------------------------------------------------------
# tilt


class TiltResult(NamedTuple):
    orth_derivative: float
    raw_derivative: float
    orth_se: float
    raw_se: float


def _tilted_mean(a: np.ndarray, u: np.ndarray, eps: float) -> float:
    z = eps * u
    w = np.exp(z - z.max())
    return float(np.sum(w * a) / np.sum(w))


def tilt_from_samples(h: np.ndarray, cv: np.ndarray, b: np.ndarray, eps: float = 1e-3, cfg: CvConfig = CvConfig()) -> TiltResult:
    """Central-difference sensitivity of raw and orthogonalized means to a score tilt.

    Draws are reweighted by ``exp(+-eps b^T g)`` and self-normalized; the
    coefficient stays at its untilted value. Standard errors are those of
    the sample covariance that the derivative approximates.
    """
    if not 0.0 < eps <= 0.05:
        raise ValueError("eps must be in (0, 0.05]")
    h = np.asarray(h, dtype=float).ravel()
    cv = np.atleast_2d(np.asarray(cv, dtype=float))
    b = np.asarray(b, dtype=float)
    S = h.size
    _, gamma, _ = orthogonalize(h[:, None], cv, cfg)
    adj = h - cv @ gamma[:, 0]
    u = cv @ b
    out = []
    for a in (adj, h):
        dv = (_tilted_mean(a, u, eps) - _tilted_mean(a, u, -eps)) / (2 * eps)
        prod = (a - a.mean()) * (u - u.mean())
        out.append((dv, float(np.std(prod, ddof=1) / math.sqrt(S)) if S > 1 else 0.0))
    return TiltResult(out[0][0], out[1][0], out[0][1], out[1][1])


def tilt_check(state, x, b, eps: float = 1e-3, S: int = 4096, rng=None, cfg: CvConfig = CvConfig()) -> TiltResult:
    """Tilt sensitivity at one candidate ``x`` on one fixed set of draws."""
    rng = rng if rng is not None else make_rng(0)
    h, cv = state.draw(np.atleast_2d(np.asarray(x, dtype=float)), S, rng)
    return tilt_from_samples(h[:, 0], cv, b, eps, cfg)
