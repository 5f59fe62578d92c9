"""Hedge (multiplicative weights) over a finite policy class, in log space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BOUND_TOL = 1e-9


def _softmax(log_weights: np.ndarray) -> np.ndarray:
    z = np.exp(log_weights - log_weights.max())
    return z / z.sum()


def _check_rewards(u: np.ndarray, reward_bound: float):
    lo, hi = float(u.min()), float(u.max())
    if lo < 0 or hi > reward_bound * (1 + BOUND_TOL):
        raise ValueError(f"Hedge rewards must lie in [0, {reward_bound:g}], got range [{lo:g}, {hi:g}]")


@dataclass(frozen=True)
class WeightVector:
    """Immutable Hedge state; ``eta * reward_bound <= 1`` is enforced."""

    log_weights: np.ndarray
    eta: float
    reward_bound: float

    def __post_init__(self):
        if not self.eta > 0 or not self.reward_bound > 0:
            raise ValueError("eta and reward_bound must be positive")
        if self.eta * self.reward_bound > 1 + BOUND_TOL:
            raise ValueError(f"eta={self.eta:g} exceeds 1/R={1 / self.reward_bound:g}")

    @classmethod
    def uniform(cls, n: int, eta: float, reward_bound: float) -> "WeightVector":
        return cls(np.zeros(n), eta, reward_bound)

    def probabilities(self) -> np.ndarray:
        return _softmax(self.log_weights)


def hedge_step(w: WeightVector, u, check_bounds: bool = True) -> WeightVector:
    """One exponential-weights update with gains ``u``; returns a new state."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != w.log_weights.shape:
        raise ValueError("reward vector does not match the number of experts")
    if check_bounds:
        _check_rewards(u, w.reward_bound)
    lw = w.log_weights + w.eta * u
    return WeightVector(lw - lw.max(), w.eta, w.reward_bound)


def sample_policy(w: WeightVector, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from the induced probabilities using one uniform."""
    cdf = np.cumsum(w.probabilities())
    return _inverse_cdf(cdf, rng.random())


def _inverse_cdf(cdf: np.ndarray, u: float) -> int:
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(i, cdf.size - 1)


class Hedge:
    """Mutable Hedge learner for long loops.

    Same update rule as :func:`hedge_step`, but specialised to the reward
    vectors the two-phase algorithms produce, which are nonzero on a known
    subset of experts.  The sampling CDF is cached between updates.
    """

    def __init__(self, n: int, eta: float, reward_bound: float):
        WeightVector.uniform(n, eta, reward_bound)  # validates eta * R <= 1
        self.eta = eta
        self.reward_bound = reward_bound
        self.log_weights = np.zeros(n)
        self._cdf = None

    def probabilities(self) -> np.ndarray:
        return _softmax(self.log_weights)

    def update(self, u: np.ndarray):
        _check_rewards(u, self.reward_bound)
        self.log_weights += self.eta * u
        self.log_weights -= self.log_weights.max()
        self._cdf = None

    def update_on(self, members: np.ndarray, value: float):
        """Add gain ``value`` to the experts listed in ``members`` and 0 elsewhere."""
        if not 0 <= value <= self.reward_bound * (1 + BOUND_TOL):
            raise ValueError(f"Hedge reward {value:g} outside [0, {self.reward_bound:g}]")
        if value == 0 or members.size == 0:
            return
        self.log_weights[members] += self.eta * value
        self.log_weights -= self.log_weights.max()
        self._cdf = None

    def sample(self, u: float) -> int:
        if self._cdf is None:
            self._cdf = np.cumsum(np.exp(self.log_weights))
        return _inverse_cdf(self._cdf, u)

    def state(self) -> WeightVector:
        return WeightVector(self.log_weights.copy(), self.eta, self.reward_bound)


def hedge_regret_gap(u_sequence, eta: float, p_star, reward_bound: float) -> float:
    """Replay Hedge on ``u_sequence`` and return the slack in the constant-regret bound.

    Returns ``sum_t u_t.p* - (1 + eta R) sum_t u_t.p_t - log|Pi| / eta``,
    which is never positive when every ``u_t`` lies in ``[0, R]`` and
    ``eta <= 1/R``.
    """
    u_sequence = np.atleast_2d(np.asarray(u_sequence, dtype=np.float64))
    p_star = np.asarray(p_star, dtype=np.float64)
    n = u_sequence.shape[1]
    w = WeightVector.uniform(n, eta, reward_bound)
    learner_total = 0.0
    for u in u_sequence:
        learner_total += float(u @ w.probabilities())
        w = hedge_step(w, u)
    comparator = float(u_sequence.sum(axis=0) @ p_star)
    return comparator - (1 + eta * reward_bound) * learner_total - math.log(n) / eta
