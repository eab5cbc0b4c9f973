"""Expected improvement and its Monte Carlo estimators.

The raw estimator averages closed-form EI over hyperparameter draws. The
orthogonalized estimator subtracts ``gamma^T g`` where ``g`` is a zero-mean
control variate evaluated at the same draws (the posterior score for the
GP) and ``gamma`` is the least-squares coefficient estimated from those
draws. Both estimators share the draws, so they can be compared sample by
sample.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .gp import GpFit, ParamPosterior, SampleCache, build_cache, score
from .mathcore import normal_cdf, normal_pdf

log = logging.getLogger(__name__)

DEFAULT_LOG_FLOOR = 1e-25
ESTIMATORS = ("mc-ei", "orth-ei")

# relative ridge used when there are too few draws (S < d + 2) for a
# full-rank covariance estimate: the coefficient is shrunk toward zero
SMALL_SAMPLE_RIDGE = 1.0

# candidate chunking keeps (S, m, n) temporaries near this many floats
_CHUNK_FLOATS = 2_000_000


@dataclass(frozen=True)
class CvConfig:
    """Control-variate options.

    ridge
        Relative Tikhonov term added to the sample control-variate
        covariance, scaled by its mean diagonal.
    cross_fit
        Estimate the coefficient on one half of the draws and apply it to
        the other half (and vice versa), then average the two halves.
    enabled
        When False the estimator reduces to the raw Monte Carlo mean.
    """

    ridge: float = 1e-8
    cross_fit: bool = False
    enabled: bool = True

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class AcquisitionEstimate:
    value: float
    per_sample_h: np.ndarray
    per_sample_cv: np.ndarray
    gamma: np.ndarray
    std_error: float
    S: int

    @property
    def adjusted(self) -> np.ndarray:
        return self.per_sample_h - self.per_sample_cv @ self.gamma

    @property
    def raw_sample_var(self) -> float:
        return float(np.var(self.per_sample_h, ddof=1)) if self.S > 1 else 0.0

    @property
    def adjusted_sample_var(self) -> float:
        return float(np.var(self.adjusted, ddof=1)) if self.S > 1 else 0.0


def ei_closed_form(mu, sigma, f_star):
    """``E[(f* - f)_+]`` for ``f ~ N(mu, sigma^2)``; vectorized."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = f_star - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, imp / np.where(sigma > 0, sigma, 1.0), 0.0)
    val = imp * normal_cdf(z) + sigma * normal_pdf(z)
    val = np.where(sigma > 0, np.maximum(val, 0.0), np.maximum(imp, 0.0))
    return val if val.ndim else float(val)


def outer_log(value, floor: float = DEFAULT_LOG_FLOOR):
    if floor <= 0:
        raise ValueError("floor must be positive")
    out = np.log(np.maximum(np.asarray(value, dtype=float), floor))
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# control-variate coefficient


def _solve_gamma(cv: np.ndarray, h: np.ndarray, ridge: float) -> np.ndarray:
    """Coefficients for every column of ``h`` (``(S, m)``) on ``cv`` (``(S, d)``)."""
    S, d = cv.shape
    if S < 2 or d == 0:
        return np.zeros((d, h.shape[1]))
    cvc = cv - cv.mean(axis=0)
    hc = h - h.mean(axis=0)
    C = cvc.T @ cvc / (S - 1)
    tr = float(np.trace(C))
    if not np.isfinite(tr) or tr <= 0.0:
        return np.zeros((d, h.shape[1]))
    if S < d + 2:
        ridge = max(ridge, SMALL_SAMPLE_RIDGE)
    C = C + ridge * (tr / d) * np.eye(d)
    b = cvc.T @ hc / (S - 1)
    try:
        return np.linalg.solve(C, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(C, b, rcond=None)[0]


def gamma_plugin(per_sample_h, per_sample_cv, cfg: CvConfig = CvConfig()) -> np.ndarray:
    """Least-squares control-variate coefficient from paired samples.

    Solves ``(C + ridge * tr(C)/d * I) gamma = Cov(cv, h)`` with ``C`` the
    sample covariance of the control variates. With fewer than ``d + 2``
    samples the ridge is raised to ``SMALL_SAMPLE_RIDGE`` so the
    coefficient shrinks toward zero instead of interpolating the draws.
    ``h`` may be ``(S,)`` or
    ``(S, m)`` (one coefficient column per candidate). Returns zeros when
    there are fewer than two samples or the control variates do not vary.
    """
    h = np.asarray(per_sample_h, dtype=float)
    cv = np.asarray(per_sample_cv, dtype=float)
    if cv.ndim == 1:
        cv = cv[:, None]
    squeeze = h.ndim == 1
    H = h[:, None] if squeeze else h
    if not cfg.enabled:
        g = np.zeros((cv.shape[1], H.shape[1]))
    elif cfg.cross_fit:
        half = cv.shape[0] // 2
        ga = _solve_gamma(cv[:half], H[:half], cfg.ridge)
        gb = _solve_gamma(cv[half:], H[half:], cfg.ridge)
        g = 0.5 * (ga + gb)
    else:
        g = _solve_gamma(cv, H, cfg.ridge)
    return g[:, 0] if squeeze else g


def orthogonalize(h: np.ndarray, cv: np.ndarray, cfg: CvConfig = CvConfig()):
    """Orthogonalized means for each column of ``h``.

    Returns ``(values, gamma, std_error)`` with shapes ``(m,)``,
    ``(d, m)``, ``(m,)``.
    """
    h = np.asarray(h, dtype=float)
    cv = np.asarray(cv, dtype=float)
    S = h.shape[0]
    d = cv.shape[1]
    if not cfg.enabled or d == 0 or S < 2:
        gamma = np.zeros((d, h.shape[1]))
        values = h.mean(axis=0)
        se = h.std(axis=0, ddof=1) / math.sqrt(S) if S > 1 else np.zeros(h.shape[1])
        return values, gamma, se
    if cfg.cross_fit and S >= 4:
        half = S // 2
        ga = _solve_gamma(cv[:half], h[:half], cfg.ridge)
        gb = _solve_gamma(cv[half:], h[half:], cfg.ridge)
        adj_b = h[half:] - cv[half:] @ ga
        adj_a = h[:half] - cv[:half] @ gb
        values = 0.5 * (adj_a.mean(axis=0) + adj_b.mean(axis=0))
        adj = np.vstack([adj_a, adj_b])
        se = adj.std(axis=0, ddof=1) / math.sqrt(S)
        return values, 0.5 * (ga + gb), se
    gamma = _solve_gamma(cv, h, cfg.ridge)
    adj = h - cv @ gamma
    return adj.mean(axis=0), gamma, adj.std(axis=0, ddof=1) / math.sqrt(S)


# ---------------------------------------------------------------------------
# GP marginal EI


class GpMarginalEI:
    """One acquisition build: ``S`` hyperparameter draws frozen with their caches.

    Every candidate evaluated through the same object sees the same draws,
    so the acquisition surface is deterministic during inner optimization
    and raw and orthogonalized estimates are sample-paired.
    """

    def __init__(self, fit: GpFit, q: ParamPosterior, S: int, rng: np.random.Generator):
        if S < 1:
            raise ValueError("S must be >= 1")
        self.fit = fit
        self.q = q
        self.S = S
        self.thetas = q.sample(rng, S)
        self.cache: SampleCache = build_cache(fit, self.thetas)
        self.scores = score(q, self.thetas)
        self.f_star = fit.data.f_star

    @property
    def failed_samples(self) -> int:
        return self.cache.replaced

    def samples(self, Xq: np.ndarray) -> np.ndarray:
        """EI under each draw: ``(S, m)``."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        n = self.fit.data.n
        step = max(1, _CHUNK_FLOATS // max(1, self.S * n))
        out = np.empty((self.S, Xq.shape[0]))
        for i in range(0, Xq.shape[0], step):
            mu, var = self.cache.predict(Xq[i : i + step])
            out[:, i : i + step] = ei_closed_form(mu, np.sqrt(var), self.f_star)
        return out

    def values(self, Xq: np.ndarray, estimator: str = "orth-ei", cfg: CvConfig = CvConfig()) -> np.ndarray:
        h = self.samples(Xq)
        if estimator == "mc-ei":
            return h.mean(axis=0)
        if estimator != "orth-ei":
            raise ValueError(f"unknown estimator {estimator!r}")
        return orthogonalize(h, self.scores, cfg)[0]

    def estimate(self, x: np.ndarray, estimator: str = "orth-ei", cfg: CvConfig = CvConfig()) -> AcquisitionEstimate:
        h = self.samples(np.asarray(x, dtype=float)[None, :])
        use = cfg if estimator == "orth-ei" else CvConfig(enabled=False)
        val, gamma, se = orthogonalize(h, self.scores, use)
        return AcquisitionEstimate(
            float(val[0]), h[:, 0].copy(), self.scores.copy(), gamma[:, 0].copy(), float(se[0]), self.S
        )


def ei_mc(fit: GpFit, q: ParamPosterior, x, S: int, rng: np.random.Generator) -> AcquisitionEstimate:
    """Raw Monte Carlo marginal EI at a single point."""
    return GpMarginalEI(fit, q, S, rng).estimate(x, "mc-ei")


def ei_orth(
    fit: GpFit, q: ParamPosterior, x, S: int, cfg: CvConfig, rng: np.random.Generator
) -> AcquisitionEstimate:
    """Score-orthogonalized marginal EI at a single point."""
    return GpMarginalEI(fit, q, S, rng).estimate(x, "orth-ei", cfg)


def diff_from_samples(h_a: np.ndarray, h_b: np.ndarray, cv: np.ndarray, cfg: CvConfig):
    """Orthogonalize the paired difference ``h_a - h_b`` with one coefficient."""
    diff = np.asarray(h_a, dtype=float) - np.asarray(h_b, dtype=float)
    val, _, se = orthogonalize(diff[:, None], cv, cfg)
    return float(val[0]), float(se[0]) ** 2


def diff_estimate(
    fit: GpFit, q: ParamPosterior, x, x2, S: int, cfg: CvConfig, rng: np.random.Generator
) -> tuple[float, float]:
    """Estimate ``EI(x) - EI(x2)`` on common draws; returns ``(delta, variance)``."""
    acq = GpMarginalEI(fit, q, S, rng)
    h = acq.samples(np.vstack([np.asarray(x, float), np.asarray(x2, float)]))
    return diff_from_samples(h[:, 0], h[:, 1], acq.scores, cfg)
