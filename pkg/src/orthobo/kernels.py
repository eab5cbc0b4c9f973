"""Covariance kernels with log-space hyperparameter layouts.

A hyperparameter vector ``theta`` is ordered as

    (log lengthscale(s), log signal amplitude, log noise std)

where the lengthscale block has 1 entry for isotropic families, ``d`` for
ARD families and 0 for the linear kernel. When the kernel is built with a
fixed noise level the noise entry is dropped from the layout.

All batch functions accept a stack of hyperparameter vectors with shape
``(B, n_theta)`` and return arrays with a leading batch axis, so a set of
posterior draws can be pushed through the GP equations in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

FAMILIES = ("rbf-iso", "rbf-ard", "matern52-iso", "matern52-ard", "linear")
LINEAR_CENTER = 0.5
_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    family: str
    dim: int
    fixed_noise: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.fixed_noise is not None and self.fixed_noise <= 0:
            raise ValueError("fixed_noise must be positive")

    @property
    def stationary(self) -> bool:
        return self.family != "linear"

    @property
    def n_lengthscales(self) -> int:
        if self.family == "linear":
            return 0
        return self.dim if self.family.endswith("-ard") else 1

    @property
    def fits_noise(self) -> bool:
        return self.fixed_noise is None

    @property
    def n_theta(self) -> int:
        return self.n_lengthscales + 1 + int(self.fits_noise)

    @property
    def layout(self) -> tuple[str, ...]:
        names = [f"log_lengthscale_{i}" for i in range(self.n_lengthscales)]
        names.append("log_amplitude")
        if self.fits_noise:
            names.append("log_noise")
        return tuple(names)

    def split(self, theta: np.ndarray):
        """Return ``(lengthscales, amplitude, noise_std)`` on the natural scale.

        Works on a single vector or a ``(B, n_theta)`` stack.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_theta:
            raise DimensionMismatch(
                f"theta has {theta.shape[-1]} entries, layout needs {self.n_theta}"
            )
        k = self.n_lengthscales
        ls = np.exp(theta[..., :k])
        amp = np.exp(theta[..., k])
        if self.fits_noise:
            noise = np.exp(theta[..., k + 1])
        else:
            noise = np.full(np.shape(amp), float(self.fixed_noise))
        return ls, amp, noise

    def noise_var(self, theta: np.ndarray) -> np.ndarray:
        return self.split(theta)[2] ** 2


def kernel_from_name(name: str, dim: int, fixed_noise: float | None = None) -> KernelSpec:
    return KernelSpec(name, dim, fixed_noise)


def _sq_diffs(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    return (X[:, None, :] - Z[None, :, :]) ** 2


def _scaled_sqdist(spec: KernelSpec, ls: np.ndarray, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # ls has shape (B, n_ls); result (B, m, n)
    D2 = _sq_diffs(X, Z)
    m, n, d = D2.shape
    inv = 1.0 / ls**2
    if spec.n_lengthscales == 1:
        return D2.sum(axis=-1)[None, :, :] * inv[:, 0][:, None, None]
    r2 = D2.reshape(m * n, d) @ inv.T
    return r2.T.reshape(-1, m, n)


def _profile(family: str, r2: np.ndarray) -> np.ndarray:
    if family.startswith("rbf"):
        return np.exp(-0.5 * r2)
    r = np.sqrt(np.maximum(r2, 0.0))
    return (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)


def cross_batch(spec: KernelSpec, thetas: np.ndarray, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Cross-covariance ``k(X, Z)`` for each hyperparameter row: ``(B, m, n)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if X.shape[1] != spec.dim or Z.shape[1] != spec.dim:
        raise DimensionMismatch(f"inputs must have {spec.dim} columns")
    ls, amp, _ = spec.split(thetas)
    amp2 = (amp**2)[:, None, None]
    if not spec.stationary:
        lin = (X - LINEAR_CENTER) @ (Z - LINEAR_CENTER).T
        return amp2 * lin[None, :, :]
    return amp2 * _profile(spec.family, _scaled_sqdist(spec, ls, X, Z))


def diag_batch(spec: KernelSpec, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Prior variances ``k(x, x)`` for each hyperparameter row: ``(B, m)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, amp, _ = spec.split(thetas)
    amp2 = (amp**2)[:, None]
    if not spec.stationary:
        v = np.sum((X - LINEAR_CENTER) ** 2, axis=1)
        return amp2 * v[None, :]
    return np.broadcast_to(amp2, (thetas.shape[0], X.shape[0])).copy()


def gram_batch(spec: KernelSpec, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Symmetric Gram matrices ``K(X, X)`` for each hyperparameter row."""
    K = cross_batch(spec, thetas, X, X)
    return 0.5 * (K + np.swapaxes(K, -1, -2))


def gram(spec: KernelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gram matrix ``K(X, X)`` (without the noise term)."""
    return gram_batch(spec, np.asarray(theta, dtype=float)[None, :], X)[0]


def kernel_eval(spec: KernelSpec, theta: np.ndarray, x: np.ndarray, x2: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape[0] != spec.dim or x2.shape[0] != spec.dim:
        raise DimensionMismatch(f"points must have dimension {spec.dim}")
    return float(cross_batch(spec, np.asarray(theta)[None, :], x[None, :], x2[None, :])[0, 0, 0])
