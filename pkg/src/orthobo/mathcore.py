"""Deterministic numerical primitives.

Dense Cholesky with jitter escalation, standard normal functions, Sobol
points, unbiased (cross-)covariances and seeded Gaussian sampling. Every
random draw goes through an explicit ``numpy.random.Generator`` so results
are reproducible given the seed and call order.
"""

from __future__ import annotations

import math
import warnings
from typing import Sequence

import numpy as np
from scipy import special
from scipy.stats import qmc

from .errors import DimensionUnsupported, InsufficientSamples, NotPositiveDefinite

SOBOL_MAX_DIM = 32

JITTER_START = 1e-10
JITTER_GROWTH = 10.0
JITTER_MAX = 1e-4

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# random streams


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``seed`` and an optional stream path.

    ``make_rng(7, 3, 1)`` and ``make_rng(7, 3, 2)`` are statistically
    independent, and both are stable across runs and platforms.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.default_rng(np.random.SeedSequence(key))


def sub_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer to seed a child stream."""
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# linear algebra


def _check_symmetric(A: np.ndarray) -> None:
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {A.shape}")
    scale = max(float(np.max(np.abs(A))), 1e-300) if A.size else 1.0
    asym = float(np.max(np.abs(A - np.swapaxes(A, -1, -2)))) if A.size else 0.0
    if asym > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(
    A: np.ndarray,
    jitter_start: float = JITTER_START,
    jitter_growth: float = JITTER_GROWTH,
    jitter_max: float = JITTER_MAX,
) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + j I`` with escalating jitter.

    Jitter levels are relative to the mean diagonal: the first retry adds
    ``jitter_start * mean(diag(A))``, each further retry multiplies by
    ``jitter_growth``, and the last allowed level is ``jitter_max``.

    Returns
    -------
    L : ndarray
        Lower triangular factor.
    jitter : float
        Absolute jitter that was added (0.0 if none was needed).
    """
    A = np.asarray(A, dtype=float)
    _check_symmetric(A)
    n = A.shape[0]
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    mean_diag = float(np.mean(np.diag(A))) if n else 0.0
    if not np.isfinite(mean_diag) or mean_diag <= 0.0:
        mean_diag = 1.0
    rel = jitter_start
    eye = np.eye(n)
    while rel <= jitter_max * (1 + 1e-12):
        j = rel * mean_diag
        try:
            return np.linalg.cholesky(A + j * eye), j
        except np.linalg.LinAlgError:
            rel *= jitter_growth
    raise NotPositiveDefinite(
        f"Cholesky failed with jitter up to {jitter_max:g} x mean diagonal"
    )


def batch_cholesky(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cholesky of a stack ``(B, n, n)``; failing slices retry with jitter.

    Returns ``(L, jitter, ok)``. Slices that fail at maximal jitter have
    ``ok=False`` and an identity placeholder factor.
    """
    A = np.asarray(A, dtype=float)
    B, n = A.shape[0], A.shape[-1]
    jitter = np.zeros(B)
    ok = np.ones(B, dtype=bool)
    try:
        return np.linalg.cholesky(A), jitter, ok
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(A)
    for b in range(B):
        try:
            L[b], jitter[b] = cholesky(A[b])
        except (NotPositiveDefinite, ValueError):
            L[b] = np.eye(n)
            ok[b] = False
    return L, jitter, ok


# ---------------------------------------------------------------------------
# normal distribution


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return out if out.ndim else float(out)


def normal_cdf(z):
    # ndtr is erfc-based in both tails, relative accuracy near machine epsilon
    out = special.ndtr(np.asarray(z, dtype=float))
    return out if np.ndim(out) else float(out)


def normal_logpdf(x, mean=0.0, var=1.0):
    x = np.asarray(x, dtype=float)
    out = -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# quasi-random points


def sobol_points(
    dim: int, n: int, skip: int = 0, scramble_seed: int | None = None
) -> np.ndarray:
    """First ``n`` Sobol points in ``[0, 1)^dim`` after discarding ``skip``.

    Unscrambled by default, so the sequence starts at the origin. With
    ``scramble_seed`` set, an Owen-scrambled sequence keyed by the seed is
    returned instead.
    """
    if dim < 1 or dim > SOBOL_MAX_DIM:
        raise DimensionUnsupported(f"Sobol dimension must be in [1, {SOBOL_MAX_DIM}]")
    if n < 1:
        raise ValueError("n must be >= 1")
    if skip < 0:
        raise ValueError("skip must be >= 0")
    if scramble_seed is None:
        eng = qmc.Sobol(d=dim, scramble=False)
    else:
        eng = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng(scramble_seed))
    if skip:
        eng.fast_forward(skip)
    # scipy warns on non power-of-two sizes; balance properties are not needed
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=UserWarning)
        return np.ascontiguousarray(eng.random(n))


# ---------------------------------------------------------------------------
# moments and sampling


def empirical_cov(X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    """Unbiased cross-covariance of paired samples (rows are samples).

    ``X`` has shape ``(S, d)`` (or ``(S,)``), ``Y`` has shape ``(S, e)``.
    Returns ``(d, e)``; with ``Y`` omitted returns the ``(d, d)``
    self-covariance, exactly symmetric.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    S = X.shape[0]
    if S < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {S}")
    Xc = X - X.mean(axis=0)
    if Y is None:
        C = Xc.T @ Xc / (S - 1)
        return 0.5 * (C + C.T)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != S:
        raise ValueError("X and Y must have the same number of samples")
    Yc = Y - Y.mean(axis=0)
    return Xc.T @ Yc / (S - 1)


def mvn_sample(
    mean: Sequence[float] | np.ndarray,
    chol_cov: np.ndarray,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal.

    Returns a single ``(d,)`` vector when ``size`` is None, else ``(size, d)``.
    """
    mean = np.asarray(mean, dtype=float)
    L = np.asarray(chol_cov, dtype=float)
    d = mean.shape[0]
    if size is None:
        z = rng.standard_normal(d)
        return mean + L @ z
    z = rng.standard_normal((size, d))
    return mean + z @ L.T
