"""Synthetic objectives with known global minima.

Each objective is evaluated at unit-cube coordinates, which are mapped
affinely onto its native box. Outlier injection mimics corrupted
evaluations by reporting a large pessimistic value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import sindg

HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_A = np.array(
    [
        [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
        [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
        [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
        [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
    ]
)
HARTMANN6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)
HARTMANN6_ARGMIN = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])
HARTMANN6_MIN = -3.32237

MICHALEWICZ_STEEPNESS = 10


def hartmann6(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    inner = np.einsum("ij,nij->ni", HARTMANN6_A, (x[:, None, :] - HARTMANN6_P[None]) ** 2)
    return -np.exp(-inner) @ HARTMANN6_ALPHA


def ackley(x: np.ndarray, a: float = 20.0, b: float = 0.2, c: float = 2 * math.pi) -> np.ndarray:
    x = np.atleast_2d(x)
    d = x.shape[1]
    s1 = np.sqrt(np.sum(x * x, axis=1) / d)
    s2 = np.sum(np.cos(c * x), axis=1) / d
    # grouped so that both brackets cancel exactly at the origin
    return (a - a * np.exp(-b * s1)) + (math.e - np.exp(s2))


def michalewicz(x: np.ndarray, m: int = MICHALEWICZ_STEEPNESS) -> np.ndarray:
    x = np.atleast_2d(x)
    i = np.arange(1, x.shape[1] + 1)
    return -np.sum(np.sin(x) * np.sin(i * x * x / math.pi) ** (2 * m), axis=1)


def levy(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    w = 1.0 + (x - 1.0) / 4.0
    # sin(pi w) via degrees so integer w gives an exact zero
    head = sindg(180.0 * w[:, 0]) ** 2
    mid = np.sum((w[:, :-1] - 1) ** 2 * (1 + 10 * np.sin(math.pi * w[:, :-1] + 1) ** 2), axis=1)
    tail = (w[:, -1] - 1) ** 2 * (1 + sindg(360.0 * w[:, -1]) ** 2)
    return head + mid + tail


def quadratic(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return np.sum((x - 0.3) ** 2, axis=1)


def michalewicz_coordinate_min(i: int, m: int = MICHALEWICZ_STEEPNESS, grid: int = 20001) -> tuple[float, float]:
    """Minimize the ``i``-th (1-based) Michalewicz term on ``[0, pi]``.

    Dense grid followed by golden-section refinement around the best cell.
    Returns ``(argmin, min)``.
    """

    def term(t):
        return -np.sin(t) * np.sin(i * t * t / math.pi) ** (2 * m)

    t = np.linspace(0.0, math.pi, grid)
    k = int(np.argmin(term(t)))
    h = t[1] - t[0]
    lo, hi = max(0.0, t[k] - h), min(math.pi, t[k] + h)
    phi = (math.sqrt(5) - 1) / 2
    for _ in range(200):
        a = hi - phi * (hi - lo)
        b = lo + phi * (hi - lo)
        if term(a) < term(b):
            hi = b
        else:
            lo = a
    x = 0.5 * (lo + hi)
    return x, float(term(x))


@dataclass(frozen=True)
class Objective:
    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    fn: Callable[[np.ndarray], np.ndarray]
    f_opt: float
    argmin: np.ndarray | None = None

    def to_native(self, u: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def evaluate(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float).ravel()
        if u.shape[0] != self.dim:
            raise ValueError(f"{self.name} expects {self.dim} coordinates")
        return float(self.fn(self.to_native(u)[None, :])[0])

    def evaluate_many(self, U: np.ndarray) -> np.ndarray:
        return self.fn(self.to_native(np.atleast_2d(U)))


def _box(lo: float, hi: float, d: int):
    return np.full(d, lo, dtype=float), np.full(d, hi, dtype=float)


def make_objective(name: str) -> Objective:
    """Registry lookup: ``hartmann6``, ``ackley:8``, ``michalewicz:10``, ``levy:16``, ``quadratic:d``."""
    base, _, dim_s = name.partition(":")
    base = base.strip().lower()
    if base == "hartmann6":
        lo, hi = _box(0.0, 1.0, 6)
        return Objective("hartmann6", 6, lo, hi, hartmann6, HARTMANN6_MIN, HARTMANN6_ARGMIN.copy())
    defaults = {"ackley": 8, "michalewicz": 10, "levy": 16, "quadratic": 1}
    if base not in defaults:
        raise KeyError(f"unknown objective {name!r}")
    d = int(dim_s) if dim_s else defaults[base]
    if base == "ackley":
        lo, hi = _box(-32.768, 32.768, d)
        return Objective(f"ackley:{d}", d, lo, hi, ackley, 0.0, np.zeros(d))
    if base == "levy":
        lo, hi = _box(-10.0, 10.0, d)
        return Objective(f"levy:{d}", d, lo, hi, levy, 0.0, np.ones(d))
    if base == "quadratic":
        lo, hi = _box(0.0, 1.0, d)
        return Objective(f"quadratic:{d}", d, lo, hi, quadratic, 0.0, np.full(d, 0.3))
    lo, hi = _box(0.0, math.pi, d)
    mins = [michalewicz_coordinate_min(i) for i in range(1, d + 1)]
    argmin = np.array([m[0] for m in mins])
    return Objective(f"michalewicz:{d}", d, lo, hi, michalewicz, float(sum(m[1] for m in mins)), argmin)


def inject_outliers(
    y: float, p: float, rng: np.random.Generator, history
) -> tuple[float, bool]:
    """With probability ``p`` replace ``y`` by ``worst + 3 * max(range, 1)``.

    ``history`` holds the raw values observed so far. One uniform draw is
    consumed per call regardless of ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    u = rng.random()
    if u >= p:
        return float(y), False
    hist = np.asarray(list(history) + [y], dtype=float)
    spread = max(float(hist.max() - hist.min()), 1.0)
    return float(hist.max() + 3.0 * spread), True
