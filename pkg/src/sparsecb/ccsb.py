"""Low-variance exploration for contextual combinatorial semi-bandits over m-subsets.

Mirrors :mod:`sparsecb.lve` with subset actions and per-coordinate
feedback.  Phase I gains use the revealed rewards ``r_t(j)`` to the first
power (the plain-bandit variant squares them).  Draw accounting matches
:mod:`sparsecb.lve`, except that each subset costs ``m`` integers (one per
partial Fisher-Yates step) in the ``*/actions`` streams.  With ``m = 1`` and
binary rewards the two modules consume identical draws and return identical
results.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    L1,
    Environment,
    PolicyClass,
    RngStream,
    RoundTape,
    action_marginals,
    as_generator,
    best_policy_value,
    draw_rounds,
    policy_values_exact,
)
from .lve import N_MULTIPLIER, T_MULTIPLIER, ExplorationDistribution, Phase1Trace, _floor_gamma
from .mwu import Hedge
from .report import RunReport


@dataclass(frozen=True)
class SubsetAction:
    members: tuple

    def __post_init__(self):
        if len(set(self.members)) != len(self.members) or list(self.members) != sorted(self.members):
            raise ValueError("subset members must be sorted and distinct")


@dataclass(frozen=True)
class CcsbConfig:
    T: int
    n: int
    eta: float
    gamma: float
    K: int
    m: int
    s: float
    T_multiplier: float = T_MULTIPLIER
    n_multiplier: float = N_MULTIPLIER

    def __post_init__(self):
        if self.T < 1 or self.n < 1:
            raise ValueError(f"phase lengths must be positive, got T={self.T}, n={self.n}")
        if not 0 < self.gamma <= 0.5:
            raise ValueError(f"gamma must lie in (0, 1/2], got {self.gamma}")
        if not 1 <= self.m <= self.K:
            raise ValueError(f"m={self.m} out of range for K={self.K}")

    @property
    def reward_bound(self) -> float:
        return self.K * min(self.s, self.m) / (self.gamma * self.m)

    @classmethod
    def from_theory(cls, K: int, m: int, s: float, Pi_size: int, eps: float, delta: float,
                    gamma: float = 0.5, T_multiplier: float = T_MULTIPLIER,
                    n_multiplier: float = N_MULTIPLIER, scale: float = 1.0) -> "CcsbConfig":
        if not (0 < eps < 1 and 0 < delta < 1):
            raise ValueError("eps and delta must lie in (0, 1)")
        gamma = _floor_gamma(gamma)
        c = min(s, m)
        L = math.log(Pi_size / delta) * math.log(1 / eps)
        T = max(1, math.ceil(scale * T_multiplier * (K * c / (m * eps)) * L))
        n = max(1, math.ceil(scale * n_multiplier * (K * c / (m * eps) + s * c / eps**2) * L))
        return cls(T, n, gamma * m / (K * c), gamma, K, m, s, T_multiplier, n_multiplier)


def uniform_msubsets(K: int, m: int, size: int, rng) -> np.ndarray:
    """``size`` independent uniform m-subsets of range(K), rows sorted.

    Partial Fisher-Yates: step ``i`` swaps position ``i`` with a uniform
    position in ``[i, K)``, consuming one integer per step per row.
    """
    if not 1 <= m <= K:
        raise ValueError(f"m={m} out of range for K={K}")
    gen = as_generator(rng)
    perm = np.tile(np.arange(K, dtype=np.int64), (size, 1))
    rows = np.arange(size)
    for i in range(m):
        j = gen.integers(i, K, size=size)
        head = perm[rows, i].copy()
        perm[rows, i] = perm[rows, j]
        perm[rows, j] = head
    return np.sort(perm[:, :m], axis=1)


def uniform_msubset(K: int, m: int, rng) -> SubsetAction:
    return SubsetAction(tuple(int(j) for j in uniform_msubsets(K, m, 1, rng)[0]))


def _check_env(env: Environment, Pi: PolicyClass):
    Pi.check_compatible(env)
    if not env.is_semibandit:
        raise ValueError("environment is not in semi-bandit mode")
    if env.sparsity.mode != L1:
        raise ValueError("semi-bandit gains are bounded only under an L1 sparsity certificate")


def phase1_ccsb(env: Environment, Pi: PolicyClass, cfg: CcsbConfig, rng: RngStream,
                tape: RoundTape | None = None) -> tuple[ExplorationDistribution, Phase1Trace]:
    _check_env(env, Pi)
    K, m, X, T = env.n_actions, env.subset_size, env.n_contexts, cfg.T
    gamma = _floor_gamma(cfg.gamma)
    if tape is None:
        tape = draw_rounds(env, T, rng.spawn("phase1/env"))
    subsets = uniform_msubsets(K, m, T, rng.spawn("phase1/actions"))
    unif = rng.spawn("phase1/policy").generator().random(T)
    contexts = tape.contexts[:T]
    observed = tape.pull_subsets(np.arange(T), subsets)

    hedge = Hedge(Pi.size, cfg.eta, cfg.reward_bound)
    inc = Pi.incidence().astype(np.float64)
    table = Pi.table
    counts = np.zeros((X, K))
    xs = np.arange(X)[:, None]
    floor, slope = gamma * m / K, (1 - gamma) / T
    selected = np.empty(T, dtype=np.int64)
    gains = np.zeros((T, m))
    for t in range(T):
        x, a, r = int(contexts[t]), subsets[t], observed[t]
        active = r > 0
        i = hedge.sample(unif[t])
        if active.any():
            c = np.where(active, r, 0.0) / (floor + slope * counts[x, a])
            gains[t] = c
            hedge.update(inc[:, x, a] @ c)
        selected[t] = i
        counts[xs, table[i]] += 1
    ed = ExplorationDistribution(selected, Pi.size)
    return ed, Phase1Trace(contexts, subsets, observed, selected, gains)


def variance_by_policy_ccsb(env: Environment, Pi: PolicyClass, ed: ExplorationDistribution,
                            gamma: float) -> np.ndarray:
    K, m = env.n_actions, env.subset_size
    den = gamma * m / K + (1 - gamma) * action_marginals(ed.p_hat, Pi)
    return np.einsum("x,pxj,xj->p", env.context_probs, Pi.incidence(), env.mean_rewards / den)


def estimator_variance_ccsb_exact(env: Environment, Pi: PolicyClass, ed: ExplorationDistribution,
                                  gamma: float, pi) -> float:
    return float(variance_by_policy_ccsb(env, Pi, ed, gamma)[pi])


def inclusion_probabilities(K: int, m: int) -> np.ndarray:
    """Per-coordinate inclusion law of a uniform m-subset, by enumeration when small."""
    if math.comb(K, m) <= 10**4:
        from itertools import combinations

        hits = np.zeros(K)
        total = 0
        for sub in combinations(range(K), m):
            hits[list(sub)] += 1
            total += 1
        return hits / total
    return np.full(K, m / K)


def expected_estimate_ccsb_exact(env: Environment, Pi: PolicyClass, p_hat, gamma: float, pi) -> float:
    """Exact mean of one Phase-II estimate of ``pi``, with the action law rebuilt by enumeration."""
    K, m, X = env.n_actions, env.subset_size, env.n_contexts
    p_hat = np.asarray(p_hat, dtype=np.float64)
    uniform_incl = inclusion_probabilities(K, m)
    incl = np.tile(gamma * uniform_incl, (X, 1))
    for j in np.flatnonzero(p_hat):
        for x in range(X):
            incl[x, Pi.table[j, x]] += (1 - gamma) * p_hat[j]
    total = 0.0
    for x in range(X):
        for c in Pi.table[pi, x]:
            q = sum(p_hat[j] for j in range(Pi.size) if c in Pi.table[j, x])
            alpha = 1.0 / (gamma * m / K + (1 - gamma) * q)
            total += env.context_probs[x] * incl[x, c] * env.mean_rewards[x, c] * alpha
    return total


def phase2_ccsb(env: Environment, Pi: PolicyClass, ed: ExplorationDistribution, cfg: CcsbConfig,
                rng: RngStream, tape: RoundTape | None = None) -> tuple[int, np.ndarray]:
    _check_env(env, Pi)
    K, m, X, n = env.n_actions, env.subset_size, env.n_contexts, cfg.n
    gamma = _floor_gamma(cfg.gamma)
    if tape is None:
        tape = draw_rounds(env, n, rng.spawn("phase2/env"))
    x = tape.contexts[:n]
    explore = rng.spawn("phase2/mix").generator().random(n) < gamma
    uniform_a = uniform_msubsets(K, m, n, rng.spawn("phase2/actions"))
    cdf = np.cumsum(ed.p_hat)
    u = rng.spawn("phase2/policy").generator().random(n)
    pol = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), Pi.size - 1)
    a = np.where(explore[:, None], uniform_a, Pi.table[pol, x])
    obs = tape.pull_subsets(np.arange(n), a)

    Q = action_marginals(ed.p_hat, Pi)
    alpha = 1.0 / (gamma * m / K + (1 - gamma) * Q[x[:, None], a])
    W = np.bincount((x[:, None] * K + a).ravel(), weights=(obs * alpha).ravel(),
                    minlength=X * K).reshape(X, K)
    sums = W[np.arange(X)[:, None], Pi.table].sum(axis=(1, 2))
    return int(np.argmax(sums)), sums / n


def run_ccsb(env: Environment, Pi: PolicyClass, eps: float, delta: float, rng: RngStream,
             overrides: CcsbConfig | None = None, scale: float = 1.0) -> RunReport:
    _check_env(env, Pi)
    K, m = env.n_actions, env.subset_size
    cfg = overrides or CcsbConfig.from_theory(K, m, env.sparsity.s, Pi.size, eps, delta, scale=scale)
    stream = rng.spawn("ccsb")
    ed, _ = phase1_ccsb(env, Pi, cfg, stream)
    chosen, _ = phase2_ccsb(env, Pi, ed, cfg, stream)
    best, _ = best_policy_value(env, Pi)
    value = float(policy_values_exact(env, Pi)[chosen])
    return RunReport(
        algorithm="ccsb",
        config={**asdict(cfg), "eps": eps, "delta": delta, "scale": scale},
        samples_total=cfg.T + cfg.n,
        chosen_policy=chosen,
        suboptimality=best - value,
        variance_by_policy=variance_by_policy_ccsb(env, Pi, ed, cfg.gamma).tolist(),
        seed=rng.seed,
        stream_id=rng.stream_id,
        extra={"K": K, "m": m},
    )
