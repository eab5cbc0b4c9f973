"""Gaussian-process surrogate.

MAP hyperparameter fitting by pattern search, a Laplace approximation of
the hyperparameter posterior, predictive moments under arbitrary (stacks
of) hyperparameters, and the Gaussian score of that posterior.

Responses are standardized to zero mean and unit variance before fitting
and the GP prior mean is the constant 0 on that scale. Everything returned
by :func:`predict` and friends lives on the standardized scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalFailure
from .kernels import KernelSpec, cross_batch, diag_batch, gram_batch
from .mathcore import LOG_2PI, batch_cholesky, cholesky, make_rng

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
HESSIAN_STEP = 1e-3
FALLBACK_VAR_MIN = 1e-6
FALLBACK_VAR_MAX = 4.0

# box for the MAP search (log scale); posterior draws may leave it
_LOG_LS_BOUNDS = (math.log(1e-3), math.log(1e3))
_LOG_AMP_BOUNDS = (math.log(1e-3), math.log(1e3))
_LOG_NOISE_BOUNDS = (math.log(1e-4), math.log(10.0))


@dataclass(frozen=True)
class ObservationSet:
    """Configurations in the unit cube with raw responses.

    ``y`` is the standardized response vector used by the GP; ``y_raw``
    keeps the original scale (best-observed values and regret are always
    computed from it).
    """

    X: np.ndarray
    y_raw: np.ndarray
    standardize: bool = True

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y_raw, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        if X.shape[0] < 1:
            raise ValueError("need at least one observation")
        if np.any(X < 0.0) or np.any(X > 1.0):
            raise ValueError("configurations must lie in the unit cube")
        if not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y_raw", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def y_mean(self) -> float:
        return float(np.mean(self.y_raw)) if self.standardize else 0.0

    @property
    def y_scale(self) -> float:
        if not self.standardize:
            return 1.0
        s = float(np.std(self.y_raw))
        return s if s > 0.0 else 1.0

    def standardize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def destandardize_y(self, z):
        return np.asarray(z, dtype=float) * self.y_scale + self.y_mean

    @property
    def y(self) -> np.ndarray:
        return self.standardize_y(self.y_raw)

    @property
    def f_star(self) -> float:
        """Best observed value on the standardized scale."""
        return float(np.min(self.y))

    @property
    def f_star_raw(self) -> float:
        return float(np.min(self.y_raw))

    def append(self, x, y) -> "ObservationSet":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return ObservationSet(
            np.vstack([self.X, x]), np.append(self.y_raw, float(y)), self.standardize
        )


@dataclass(frozen=True)
class GpPrior:
    """Independent normal priors on the log-hyperparameters."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def default(cls, spec: KernelSpec) -> "GpPrior":
        mean, sd = [], []
        for name in spec.layout:
            if name.startswith("log_lengthscale"):
                mean.append(math.log(0.3))
            elif name == "log_amplitude":
                mean.append(0.0)
            else:
                mean.append(math.log(0.1))
            sd.append(1.0)
        return cls(np.array(mean), np.array(sd))

    def logpdf(self, thetas: np.ndarray) -> np.ndarray:
        z = (np.asarray(thetas, dtype=float) - self.mean) / self.sd
        return -0.5 * np.sum(z * z + LOG_2PI, axis=-1) - np.sum(np.log(self.sd))


def _bounds(spec: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = [], []
    for name in spec.layout:
        b = (
            _LOG_LS_BOUNDS
            if name.startswith("log_lengthscale")
            else _LOG_AMP_BOUNDS
            if name == "log_amplitude"
            else _LOG_NOISE_BOUNDS
        )
        lo.append(b[0])
        hi.append(b[1])
    return np.array(lo), np.array(hi)


# ---------------------------------------------------------------------------
# evidence


def _noisy_gram(spec: KernelSpec, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    K = gram_batch(spec, thetas, X)
    nv = spec.noise_var(thetas)
    idx = np.arange(X.shape[0])
    K[:, idx, idx] += nv[:, None]
    return K


def lml_batch(data: ObservationSet, spec: KernelSpec, thetas: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Log marginal likelihood for each row of ``thetas``; ``-inf`` on failure."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    y = data.y
    n = data.n
    out = np.empty(thetas.shape[0])
    for start in range(0, thetas.shape[0], chunk):
        th = thetas[start : start + chunk]
        Ky = _noisy_gram(spec, th, data.X)
        L, _, ok = batch_cholesky(Ky)
        a = np.linalg.solve(L, np.broadcast_to(y, (th.shape[0], n))[..., None])[..., 0]
        val = -0.5 * np.sum(a * a, axis=-1)
        val -= np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        val -= 0.5 * n * LOG_2PI
        val[~ok | ~np.isfinite(val)] = -np.inf
        out[start : start + chunk] = val
    return out


def log_marginal_likelihood(data: ObservationSet, spec: KernelSpec, theta: np.ndarray) -> float:
    """``-1/2 r^T K_y^{-1} r - 1/2 log|K_y| - n/2 log 2 pi`` with ``r = y - 0``."""
    theta = np.asarray(theta, dtype=float)
    Ky = _noisy_gram(spec, theta[None, :], data.X)[0]
    try:
        L, _ = cholesky(Ky)
    except Exception as exc:  # NotPositiveDefinite or non-finite entries
        raise NumericalFailure(str(exc)) from exc
    a = np.linalg.solve(L, data.y)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * data.n * LOG_2PI)


def lml_gradient(data: ObservationSet, spec: KernelSpec, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the log marginal likelihood."""
    theta = np.asarray(theta, dtype=float)
    E = np.eye(theta.size) * step
    vals = lml_batch(data, spec, np.vstack([theta + E, theta - E]))
    return (vals[: theta.size] - vals[theta.size :]) / (2 * step)


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class GpFit:
    spec: KernelSpec
    data: ObservationSet
    theta: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    prior: GpPrior
    log_joint: float
    restart_values: tuple[float, ...] = ()
    mean_const: float = 0.0
    fallback: bool = False

    @property
    def noise_var(self) -> float:
        return float(self.spec.noise_var(self.theta))


def build_fit(
    data: ObservationSet,
    spec: KernelSpec,
    theta: np.ndarray,
    prior: GpPrior | None = None,
    **extra,
) -> GpFit:
    """Factorize the noisy Gram matrix at ``theta`` and cache the solve."""
    prior = prior or GpPrior.default(spec)
    theta = np.asarray(theta, dtype=float).copy()
    Ky = _noisy_gram(spec, theta[None, :], data.X)[0]
    try:
        L, jitter = cholesky(Ky)
    except Exception as exc:
        raise NumericalFailure(str(exc)) from exc
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, data.y))
    lj = float(lml_batch(data, spec, theta[None, :])[0] + prior.logpdf(theta))
    return GpFit(spec, data, theta, L, alpha, jitter, prior, lj, **extra)


def _pattern_search(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    budget: int,
    step: float = 0.5,
    min_step: float = 1e-4,
) -> tuple[np.ndarray, float, int]:
    """Hooke-Jeeves maximization in a box. Returns ``(x, f(x), evaluations)``."""
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    fx = f(x)
    used = 1
    while used < budget and step >= min_step:
        base = x.copy()
        for i in range(x.size):
            for sign in (1.0, -1.0):
                if used >= budget:
                    break
                cand = x.copy()
                cand[i] = min(max(cand[i] + sign * step, lo[i]), hi[i])
                if cand[i] == x[i]:
                    continue
                fc = f(cand)
                used += 1
                if fc > fx:
                    x, fx = cand, fc
                    break
        if np.array_equal(x, base):
            step *= 0.5
            continue
        # pattern move along the accepted direction
        if used < budget:
            cand = np.clip(x + (x - base), lo, hi)
            fc = f(cand)
            used += 1
            if fc > fx:
                x, fx = cand, fc
    return x, fx, used


def fit_map(
    data: ObservationSet,
    spec: KernelSpec,
    prior: GpPrior | None = None,
    restarts: int = 4,
    rng: np.random.Generator | None = None,
    budget: int = 200,
    init: np.ndarray | None = None,
) -> GpFit:
    """Maximize log evidence + log prior with multi-start pattern search.

    Restart 0 starts at ``init`` (if given) or the prior mean, later
    restarts at prior draws. The best endpoint wins; if every restart
    fails the prior mean is used.
    """
    if data.dim != spec.dim:
        raise ValueError("data and kernel dimensions differ")
    prior = prior or GpPrior.default(spec)
    rng = rng if rng is not None else make_rng(0)
    lo, hi = _bounds(spec)

    def objective(th: np.ndarray) -> float:
        v = lml_batch(data, spec, th[None, :])[0]
        return float(v + prior.logpdf(th)) if np.isfinite(v) else -np.inf

    starts = [prior.mean.copy() if init is None else np.asarray(init, dtype=float)]
    if init is not None and restarts > 1:
        starts.append(prior.mean.copy())
    while len(starts) < max(restarts, 1):
        starts.append(prior.mean + prior.sd * rng.standard_normal(prior.mean.size))
    best_x, best_f, values = None, -np.inf, []
    for x0 in starts[: max(restarts, 1)]:
        x, fx, _ = _pattern_search(objective, x0, lo, hi, budget)
        values.append(fx)
        if fx > best_f:
            best_x, best_f = x, fx
    if best_x is None or not np.isfinite(best_f):
        log.warning("all MAP restarts failed; using prior mean")
        return build_fit(data, spec, prior.mean, prior, fallback=True, restart_values=tuple(values))
    return build_fit(data, spec, best_x, prior, restart_values=tuple(values))


# ---------------------------------------------------------------------------
# hyperparameter posterior


@dataclass(frozen=True)
class ParamPosterior:
    """Gaussian ``q(theta) = N(mean, cov)`` over log-hyperparameters."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    precision: np.ndarray
    diagonal_fallback: bool = False

    @classmethod
    def from_cov(cls, mean, cov, diagonal_fallback: bool = False) -> "ParamPosterior":
        mean = np.asarray(mean, dtype=float).copy()
        cov = np.asarray(cov, dtype=float)
        cov = 0.5 * (cov + cov.T)
        if not np.any(cov):
            z = np.zeros_like(cov)
            return cls(mean, z, z.copy(), z.copy(), diagonal_fallback)
        L, _ = cholesky(cov)
        P = np.linalg.inv(cov)
        return cls(mean, cov, L, 0.5 * (P + P.T), diagonal_fallback)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def degenerate(self) -> bool:
        return not np.any(self.cov)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.dim))
        return self.mean + z @ self.chol.T


def score(q: ParamPosterior, theta: np.ndarray) -> np.ndarray:
    """Gradient of ``log q`` at ``theta`` (rows of a stack or one vector)."""
    d = np.asarray(theta, dtype=float) - q.mean
    return -d @ q.precision.T


def laplace_approx(
    log_joint: Callable[[np.ndarray], np.ndarray],
    mode: np.ndarray,
    step: float = HESSIAN_STEP,
) -> ParamPosterior:
    """Gaussian at ``mode`` with covariance ``(-H)^{-1}``.

    ``log_joint`` maps a ``(B, p)`` stack to ``(B,)`` values. ``H`` is the
    central finite-difference Hessian. If ``-H`` is not positive definite
    the diagonal ``1/|H_ii|`` clipped to ``[1e-6, 4]`` is used instead.
    """
    mode = np.asarray(mode, dtype=float)
    p = mode.size
    E = np.eye(p) * step
    pts = [mode]
    for i in range(p):
        pts += [mode + E[i], mode - E[i]]
    pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
    for i, j in pairs:
        pts += [
            mode + E[i] + E[j],
            mode + E[i] - E[j],
            mode - E[i] + E[j],
            mode - E[i] - E[j],
        ]
    vals = np.asarray(log_joint(np.array(pts)), dtype=float)
    f0 = vals[0]
    H = np.zeros((p, p))
    for i in range(p):
        H[i, i] = (vals[1 + 2 * i] - 2 * f0 + vals[2 + 2 * i]) / step**2
    base = 1 + 2 * p
    for k, (i, j) in enumerate(pairs):
        pp, pm, mp, mm = vals[base + 4 * k : base + 4 * k + 4]
        H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * step**2)
    negH = -H
    if np.all(np.isfinite(negH)):
        try:
            Ln = np.linalg.cholesky(negH)
            Linv = np.linalg.inv(Ln)
            return ParamPosterior.from_cov(mode, Linv.T @ Linv)
        except np.linalg.LinAlgError:
            pass
    h = np.abs(np.diag(H))
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(np.isfinite(h) & (h > 0), 1.0 / h, FALLBACK_VAR_MAX)
    var = np.clip(var, FALLBACK_VAR_MIN, FALLBACK_VAR_MAX)
    return ParamPosterior.from_cov(mode, np.diag(var), diagonal_fallback=True)


def laplace_posterior(fit: GpFit, data: ObservationSet | None = None) -> ParamPosterior:
    data = data or fit.data

    def log_joint(thetas):
        return lml_batch(data, fit.spec, thetas) + fit.prior.logpdf(thetas)

    return laplace_approx(log_joint, fit.theta)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class SampleCache:
    """Factorizations of the noisy Gram matrix for a stack of hyperparameters.

    Rows whose factorization failed are replaced by the MAP factorization
    (``replaced`` counts them); the stack is otherwise immutable.
    """

    spec: KernelSpec
    data: ObservationSet
    thetas: np.ndarray
    linv: np.ndarray
    alpha: np.ndarray
    replaced: int = 0
    eval_thetas: np.ndarray = field(default=None)

    def predict(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance, each ``(B, m)``."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        th = self.eval_thetas
        Ks = cross_batch(self.spec, th, Xq, self.data.X)
        mu = np.einsum("bmn,bn->bm", Ks, self.alpha)
        V = Ks @ np.swapaxes(self.linv, -1, -2)
        var = diag_batch(self.spec, th, Xq) - np.sum(V * V, axis=-1)
        return mu, np.maximum(var, VAR_FLOOR)


def build_cache(fit: GpFit, thetas: np.ndarray) -> SampleCache:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    data, spec = fit.data, fit.spec
    Ky = _noisy_gram(spec, thetas, data.X)
    bad = ~np.all(np.isfinite(Ky), axis=(1, 2))
    Ky[bad] = np.eye(data.n)
    L, _, ok = batch_cholesky(Ky)
    ok &= ~bad
    eval_thetas = thetas.copy()
    replaced = int(np.sum(~ok))
    if replaced:
        log.debug("%d hyperparameter draws failed to factorize; using MAP", replaced)
        L[~ok] = fit.chol
        eval_thetas[~ok] = fit.theta
    linv = np.linalg.inv(L)
    a = np.einsum("bij,j->bi", linv, data.y)
    alpha = np.einsum("bji,bj->bi", linv, a)
    return SampleCache(spec, data, thetas, linv, alpha, replaced, eval_thetas)


def predict(fit: GpFit, theta: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    """Predictive mean and variance of ``f(x)`` under hyperparameters ``theta``."""
    cache = build_cache(fit, np.asarray(theta, dtype=float)[None, :])
    if cache.replaced:
        raise NumericalFailure("factorization failed at the requested hyperparameters")
    mu, var = cache.predict(np.asarray(x, dtype=float)[None, :])
    return float(mu[0, 0]), float(var[0, 0])


def predict_map(fit: GpFit, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized prediction at the MAP hyperparameters."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    th = fit.theta[None, :]
    Ks = cross_batch(fit.spec, th, Xq, fit.data.X)[0]
    mu = fit.mean_const + Ks @ fit.alpha
    V = np.linalg.solve(fit.chol, Ks.T)
    var = diag_batch(fit.spec, th, Xq)[0] - np.sum(V * V, axis=0)
    return mu, np.maximum(var, VAR_FLOOR)


def predictive_log_score(fit: GpFit, x: np.ndarray, y: float) -> float:
    """Log density of standardized ``y`` under ``N(mu(x), sigma^2(x) + noise)``."""
    mu, var = predict_map(fit, np.asarray(x, dtype=float)[None, :])
    total = float(var[0]) + fit.noise_var
    return float(-0.5 * (LOG_2PI + math.log(total) + (y - mu[0]) ** 2 / total))
