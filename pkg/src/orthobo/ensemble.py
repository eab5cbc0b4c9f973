"""Weighted model ensembles with a tempered exponential-weights update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import LengthMismatch

DEFAULT_TEMPERATURE = 1.0
DEFAULT_FLOOR = 1e-3
SCORE_CLAMP = 50.0


@dataclass(frozen=True)
class EnsembleState:
    weights: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    floor: float = DEFAULT_FLOOR
    last_scores: np.ndarray | None = field(default=None)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must lie on the simplex")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 < self.floor < 1.0 / w.size:
            raise ValueError("floor must be in (0, 1/M)")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, M: int, temperature: float = DEFAULT_TEMPERATURE, floor: float = DEFAULT_FLOOR) -> "EnsembleState":
        return cls(np.full(M, 1.0 / M), temperature, floor)

    @property
    def M(self) -> int:
        return self.weights.size

    @property
    def min_weight_bound(self) -> float:
        return self.floor / (1.0 + self.M * self.floor)


def _values(estimates) -> np.ndarray:
    return np.array([getattr(e, "value", e) for e in estimates], dtype=float)


def aggregate(estimates: Sequence, weights) -> float:
    """``sum_m pi_m * value_m``; entries may be estimates or plain numbers."""
    w = np.asarray(weights, dtype=float)
    v = _values(estimates)
    if v.size != w.size:
        raise LengthMismatch(f"{v.size} estimates but {w.size} weights")
    return float(v @ w)


def aggregate_arrays(values: Sequence[np.ndarray], weights) -> np.ndarray:
    """Candidate-wise aggregation of per-model value vectors."""
    w = np.asarray(weights, dtype=float)
    if len(values) != w.size:
        raise LengthMismatch(f"{len(values)} value arrays but {w.size} weights")
    return np.tensordot(w, np.vstack(values), axes=1)


def update_weights(state: EnsembleState, log_scores) -> EnsembleState:
    """Tempered exponential-weights step with a weight floor.

    The tempered weights ``pi * exp(l / tau)`` are normalized, floored at
    ``delta``, and normalized again; this keeps every weight at or above
    ``delta / (1 + M delta)``.
    """
    ell = np.asarray(log_scores, dtype=float)
    if ell.size != state.M:
        raise LengthMismatch(f"{ell.size} scores for {state.M} models")
    ell = np.clip(np.nan_to_num(ell, nan=-SCORE_CLAMP), -SCORE_CLAMP, SCORE_CLAMP)
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights) + ell / state.temperature
    w = np.exp(logw - logsumexp(logw))
    w = np.maximum(w, state.floor)
    w = w / w.sum()
    return replace(state, weights=w, last_scores=ell)


def entropy(weights) -> float:
    w = np.asarray(weights, dtype=float)
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz))) if nz.size else 0.0


def uniform_entropy(M: int) -> float:
    return math.log(M)
