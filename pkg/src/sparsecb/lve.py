"""Two-phase low-variance exploration with Hedge for sparse-reward contextual bandits.

Phase I runs Hedge over the policy class on importance-style rewards whose
denominators shrink as an action gets covered, and freezes the empirical
distribution of the sampled policies as the exploration distribution.
Phase II plays a gamma-mixture of uniform actions and that distribution,
and returns the importance-weighted empirical best policy.

Random draws per run (each from its own child stream of the run's stream):

* ``phase1/env``     T uniforms (joint inverse CDF over the environment)
* ``phase1/actions`` T integers in [0, A)
* ``phase1/policy``  T uniforms (Hedge sampling)
* ``phase2/env``     n uniforms
* ``phase2/mix``     n uniforms (uniform-action coin)
* ``phase2/actions`` n integers in [0, A)
* ``phase2/policy``  n uniforms (draws from the exploration distribution)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    Environment,
    PolicyClass,
    RngStream,
    RoundTape,
    action_marginals,
    best_policy_value,
    draw_rounds,
    empirical_distribution,
    policy_values_exact,
)
from .mwu import Hedge
from .report import RunReport

GAMMA_FLOOR = 1e-6
T_MULTIPLIER = 8.0
N_MULTIPLIER = 16.0


@dataclass(frozen=True)
class LveConfig:
    T: int
    n: int
    eta: float
    gamma: float = 0.5
    T_multiplier: float = T_MULTIPLIER
    n_multiplier: float = N_MULTIPLIER

    def __post_init__(self):
        if self.T < 1 or self.n < 1:
            raise ValueError(f"phase lengths must be positive, got T={self.T}, n={self.n}")
        if not 0 < self.gamma <= 0.5:
            raise ValueError(f"gamma must lie in (0, 1/2], got {self.gamma}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    @classmethod
    def from_theory(cls, A: int, Pi_size: int, s: float, eps: float, delta: float,
                    gamma: float = 0.5, T_multiplier: float = T_MULTIPLIER,
                    n_multiplier: float = N_MULTIPLIER, scale: float = 1.0) -> "LveConfig":
        """Phase lengths from the sample-complexity rate, with explicit log factors.

        ``T = T_mult (A/eps) L``, ``n = n_mult (A/eps + s/eps^2) L`` with
        ``L = log(|Pi|/delta) log(1/eps)``; ``scale`` multiplies both.
        """
        if not (0 < eps < 1 and 0 < delta < 1):
            raise ValueError("eps and delta must lie in (0, 1)")
        gamma = _floor_gamma(gamma)
        L = math.log(Pi_size / delta) * math.log(1 / eps)
        T = max(1, math.ceil(scale * T_multiplier * (A / eps) * L))
        n = max(1, math.ceil(scale * n_multiplier * (A / eps + s / eps**2) * L))
        return cls(T, n, gamma / A, gamma, T_multiplier, n_multiplier)


def _floor_gamma(gamma: float) -> float:
    if gamma < GAMMA_FLOOR:
        warnings.warn(f"gamma={gamma:g} is below {GAMMA_FLOOR:g}; flooring it", RuntimeWarning)
        return GAMMA_FLOOR
    return gamma


@dataclass(frozen=True)
class ExplorationDistribution:
    """Empirical law of the policies sampled in Phase I."""

    selected: np.ndarray
    n_policies: int

    @property
    def T(self) -> int:
        return self.selected.size

    @property
    def p_hat(self) -> np.ndarray:
        return empirical_distribution(self.selected, self.n_policies)

    def counts(self) -> np.ndarray:
        return np.bincount(self.selected, minlength=self.n_policies)


@dataclass(frozen=True)
class RoundLog:
    t: int
    context: int
    action: object
    reward: object
    policy: int


@dataclass
class Phase1Trace:
    """Per-round record of Phase I, holding only the revealed feedback."""

    contexts: np.ndarray
    actions: np.ndarray
    observed: np.ndarray
    selected: np.ndarray
    gains: np.ndarray

    def rounds(self):
        for t in range(self.contexts.size):
            yield RoundLog(t, int(self.contexts[t]), self.actions[t], self.observed[t], int(self.selected[t]))


def _members(Pi: PolicyClass):
    """Lazily built lists of policies choosing ``a`` at ``x``."""
    cache: dict[tuple[int, int], np.ndarray] = {}
    table = Pi.table

    def get(x: int, a: int) -> np.ndarray:
        key = (x, a)
        if key not in cache:
            cache[key] = np.flatnonzero(table[:, x] == a)
        return cache[key]

    return get


def phase1(env: Environment, Pi: PolicyClass, cfg: LveConfig, rng: RngStream,
           tape: RoundTape | None = None) -> tuple[ExplorationDistribution, Phase1Trace]:
    Pi.check_compatible(env)
    if env.is_semibandit:
        raise ValueError("use ccsb.phase1_ccsb for subset actions")
    A, X, T = env.n_actions, env.n_contexts, cfg.T
    gamma = _floor_gamma(cfg.gamma)
    if tape is None:
        tape = draw_rounds(env, T, rng.spawn("phase1/env"))
    actions = rng.spawn("phase1/actions").generator().integers(0, A, size=T)
    unif = rng.spawn("phase1/policy").generator().random(T)
    contexts = tape.contexts[:T]
    observed = tape.pull(np.arange(T), actions)

    hedge = Hedge(Pi.size, cfg.eta, A / gamma)
    members = _members(Pi)
    table = Pi.table
    counts = np.zeros((X, A))
    xs = np.arange(X)
    floor, slope = gamma / A, (1 - gamma) / T
    selected = np.empty(T, dtype=np.int64)
    gains = np.zeros(T)
    for t in range(T):
        x, a, r = int(contexts[t]), int(actions[t]), float(observed[t])
        # u_t(pi) = gains[t] on {pi : pi(x_t) = a_t}, zero elsewhere
        if r > 0:
            gains[t] = r * r / (floor + slope * counts[x, a])
        i = hedge.sample(unif[t])
        hedge.update_on(members(x, a), gains[t])
        selected[t] = i
        counts[xs, table[i]] += 1
    ed = ExplorationDistribution(selected, Pi.size)
    return ed, Phase1Trace(contexts, actions, observed, selected, gains)


def variance_by_policy(env: Environment, Pi: PolicyClass, ed: ExplorationDistribution,
                       gamma: float) -> np.ndarray:
    """Exact second-moment proxy E[sum_a r(a)^2 1{pi(x)=a} / (gamma/A + (1-gamma) Q(x,a))] for every pi."""
    A = env.n_actions
    den = gamma / A + (1 - gamma) * action_marginals(ed.p_hat, Pi)
    return np.einsum("x,pxa,xa->p", env.context_probs, Pi.incidence(), env.second_moments / den)


def estimator_variance_exact(env: Environment, Pi: PolicyClass, ed: ExplorationDistribution,
                             gamma: float, pi) -> float:
    A = env.n_actions
    row = Pi.table[pi] if isinstance(pi, (int, np.integer)) else np.asarray(getattr(pi, "action_of", pi))
    den = gamma / A + (1 - gamma) * action_marginals(ed.p_hat, Pi)
    xs = np.arange(env.n_contexts)
    return float(env.context_probs @ (env.second_moments[xs, row] / den[xs, row]))


def expected_estimate_exact(env: Environment, Pi: PolicyClass, p_hat, gamma: float, pi) -> float:
    """Exact mean of one Phase-II importance-weighted estimate of ``pi``.

    The action law of Phase II is rebuilt here by walking the support of
    ``p_hat`` policy by policy, independently of :func:`core.action_marginals`.
    """
    A, X = env.n_actions, env.n_contexts
    p_hat = np.asarray(p_hat, dtype=np.float64)
    row = Pi.table[pi]
    play = np.full((X, A), gamma / A)
    for j in np.flatnonzero(p_hat):
        for x in range(X):
            play[x, Pi.table[j, x]] += (1 - gamma) * p_hat[j]
    total = 0.0
    for x in range(X):
        a = row[x]
        q = sum(p_hat[j] for j in range(Pi.size) if Pi.table[j, x] == a)
        den = gamma / A + (1 - gamma) * q
        for p_r, r in zip(env.support_probs[x], env.support_rewards[x]):
            total += env.context_probs[x] * p_r * play[x, a] * r[a] / den
    return total


def phase2(env: Environment, Pi: PolicyClass, ed: ExplorationDistribution, cfg: LveConfig,
           rng: RngStream, tape: RoundTape | None = None) -> tuple[int, np.ndarray]:
    Pi.check_compatible(env)
    A, X, n = env.n_actions, env.n_contexts, cfg.n
    if n < 1:
        raise ValueError("Phase II needs at least one round")
    gamma = _floor_gamma(cfg.gamma)
    if tape is None:
        tape = draw_rounds(env, n, rng.spawn("phase2/env"))
    x = tape.contexts[:n]
    explore = rng.spawn("phase2/mix").generator().random(n) < gamma
    uniform_a = rng.spawn("phase2/actions").generator().integers(0, A, size=n)
    cdf = np.cumsum(ed.p_hat)
    u = rng.spawn("phase2/policy").generator().random(n)
    pol = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), Pi.size - 1)
    a = np.where(explore, uniform_a, Pi.table[pol, x])
    obs = tape.pull(np.arange(n), a)

    Q = action_marginals(ed.p_hat, Pi)
    weights = obs / (gamma / A + (1 - gamma) * Q[x, a])
    W = np.bincount(x * A + a, weights=weights, minlength=X * A).reshape(X, A)
    sums = W[np.arange(X), Pi.table].sum(axis=1)
    estimates = sums / n
    return int(np.argmax(sums)), estimates


def run_lve(env: Environment, Pi: PolicyClass, eps: float, delta: float, rng: RngStream,
            overrides: LveConfig | None = None, scale: float = 1.0) -> RunReport:
    """Both phases with theory-derived parameters; reports exact suboptimality."""
    Pi.check_compatible(env)
    cfg = overrides or LveConfig.from_theory(env.n_actions, Pi.size, env.sparsity.s, eps, delta, scale=scale)
    stream = rng.spawn("lve")
    ed, _ = phase1(env, Pi, cfg, stream)
    chosen, _ = phase2(env, Pi, ed, cfg, stream)
    best, _ = best_policy_value(env, Pi)
    value = float(policy_values_exact(env, Pi)[chosen])
    return RunReport(
        algorithm="lve",
        config={**asdict(cfg), "eps": eps, "delta": delta, "scale": scale},
        samples_total=cfg.T + cfg.n,
        chosen_policy=chosen,
        suboptimality=best - value,
        variance_by_policy=variance_by_policy(env, Pi, ed, cfg.gamma).tolist(),
        seed=rng.seed,
        stream_id=rng.stream_id,
    )
