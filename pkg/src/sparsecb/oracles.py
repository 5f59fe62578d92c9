"""Executable checks for the supporting inequalities.

Deterministic inequalities are fuzzed and report their worst slack.  The
multiplicative Freedman bounds hold only with probability ``1 - delta``, so
they are checked as empirical coverage over many simulated martingales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import as_generator
from .exo import hellinger_variance_gap
from .mwu import hedge_regret_gap

GAP_TOL = 1e-9


def harmonic_bound_gap(a_seq) -> float:
    """``2 log(1 + sum a) - sum_i a_i / (1 + sum_{j<i} a_j)`` for entries in [0, 1]."""
    a = np.asarray(a_seq, dtype=np.float64)
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ValueError("entries must lie in [0, 1]")
    prefix = np.concatenate([[0.0], np.cumsum(a)[:-1]]) if a.size else a
    lhs = float(np.sum(a / (1 + prefix)))
    return 2 * math.log1p(float(a.sum())) - lhs


def _harmonic_gaps_batch(a: np.ndarray) -> np.ndarray:
    # rows are zero-padded sequences; padding contributes nothing to either side
    prefix = np.cumsum(a, axis=1) - a
    lhs = (a / (1 + prefix)).sum(axis=1)
    return 2 * np.log1p(a.sum(axis=1)) - lhs


def fuzz_harmonic(n_sequences: int, rng, max_len: int = 500, batch: int = 2000) -> float:
    """Worst harmonic gap over random sequences of random length up to ``max_len``."""
    gen = as_generator(rng)
    worst = math.inf
    done = 0
    while done < n_sequences:
        m = min(batch, n_sequences - done)
        lengths = gen.integers(1, max_len + 1, size=m)
        style = gen.integers(4, size=m)[:, None]
        a = gen.random((m, max_len))
        a = np.where(style == 1, a**8, a)  # mostly tiny entries
        a = np.where(style == 2, (a < 0.1).astype(float), a)  # sparse ones
        a = np.where(style == 3, 1.0, a)  # all ones
        a[np.arange(max_len)[None, :] >= lengths[:, None]] = 0.0
        worst = min(worst, float(_harmonic_gaps_batch(a).min()))
        done += m
    return worst


def fuzz_hedge(n_runs: int, rng, max_T: int = 200, max_R: float = 8.0, max_n: int = 32) -> float:
    """Worst Hedge regret gap (should be <= 0) over random bounded reward sequences."""
    gen = as_generator(rng)
    worst = -math.inf
    for _ in range(n_runs):
        T = int(gen.integers(1, max_T + 1))
        n = int(gen.integers(1, max_n + 1))
        R = float(gen.uniform(0.1, max_R))
        eta = float(gen.uniform(0.05, 1.0)) / R
        style = int(gen.integers(3))
        if style == 0:
            u = gen.uniform(0, R, size=(T, n))
        elif style == 1:
            u = R * (gen.random((T, n)) < 0.05)
        else:
            # one expert is consistently good, the rest noisy
            u = gen.uniform(0, 0.5 * R, size=(T, n))
            u[:, int(gen.integers(n))] = R
        totals = u.sum(axis=0)
        p_star = np.zeros(n)
        p_star[int(np.argmax(totals))] = 1.0
        worst = max(worst, hedge_regret_gap(u, eta, p_star, R))
    return worst


def fuzz_hellinger(n_triples: int, rng, max_support: int = 10) -> float:
    """Worst Hellinger-variance gap (should be >= 0)."""
    gen = as_generator(rng)
    worst = math.inf
    for _ in range(n_triples):
        k = int(gen.integers(2, max_support + 1))
        alpha = float(gen.choice([0.05, 0.5, 1.0, 5.0]))
        P = gen.dirichlet(np.full(k, alpha))
        Q = gen.dirichlet(np.full(k, alpha)) if gen.random() < 0.8 else P.copy()
        f = gen.uniform(-1, 1, size=k) if gen.random() < 0.5 else gen.choice([-1.0, 1.0], size=k)
        worst = min(worst, hellinger_variance_gap(P, Q, f))
    return worst


# ---------------------------------------------------------------------------
# Coverage of the multiplicative Freedman bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageReport:
    trials: int
    violations: int
    delta: float
    passed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "passed", self.rate <= self.delta + 3 * math.sqrt(self.delta / self.trials))

    @property
    def rate(self) -> float:
        return self.violations / self.trials

    @property
    def slack(self) -> float:
        return 3 * math.sqrt(self.delta / self.trials)


class MartingaleGenerator:
    """Batch sampler of adapted sequences in [0, B] with known conditional means."""

    name = "base"

    def sample(self, gen: np.random.Generator, trials: int, T: int, B: float):
        raise NotImplementedError


class ConstantSequence(MartingaleGenerator):
    name = "deterministic"

    def __init__(self, c: float = 0.5):
        self.c = c

    def sample(self, gen, trials, T, B):
        X = np.full((trials, T), self.c * B)
        return X, X.copy()


class BernoulliSequence(MartingaleGenerator):
    name = "iid-bernoulli"

    def __init__(self, mean: float = 0.5):
        self.mean = mean

    def sample(self, gen, trials, T, B):
        X = B * (gen.random((trials, T)) < self.mean)
        return X, np.full((trials, T), self.mean * B)


class AdaptedSequence(MartingaleGenerator):
    """Success probability follows the running success fraction (a Polya-urn drift).

    ``mu_t = 0.05 + 0.9 * (1 + hits_{<t}) / (2 + t - 1)``, so early luck
    compounds and the conditional means wander far from any fixed value.
    """

    name = "adapted"

    def sample(self, gen, trials, T, B):
        u = gen.random((trials, T))
        X = np.empty((trials, T))
        means = np.empty((trials, T))
        hits = np.zeros(trials)
        for t in range(T):
            mu = 0.05 + 0.9 * (1 + hits) / (2 + t)
            means[:, t] = mu * B
            x = u[:, t] < mu
            X[:, t] = B * x
            hits += x
        return X, means


class RareSpikeSequence(MartingaleGenerator):
    """Mostly zero, occasionally the full range B."""

    name = "rare-spike"

    def __init__(self, mean: float = 0.02):
        self.mean = mean

    def sample(self, gen, trials, T, B):
        X = B * (gen.random((trials, T)) < self.mean)
        return X, np.full((trials, T), self.mean * B)


SHIPPED_GENERATORS = (ConstantSequence(), BernoulliSequence(), AdaptedSequence(), RareSpikeSequence())


def freedman_mult_coverage(generator: MartingaleGenerator, B: float, a_or_b: float, delta: float,
                           trials: int, rng, T: int = 100, tail: str = "upper") -> CoverageReport:
    """Empirical violation rate of one tail of the multiplicative Freedman bound.

    ``upper``: sum X <= (1 + 1/a) sum E[X_t | past] + a B log(1/delta).
    ``lower``: sum X >= (1 - 1/b) sum E[X_t | past] - b B log(1/delta).
    """
    if a_or_b < 1:
        raise ValueError("a and b must be at least 1")
    if tail not in ("upper", "lower"):
        raise ValueError("tail must be 'upper' or 'lower'")
    X, means = generator.sample(as_generator(rng), trials, T, B)
    if X.min() < 0 or X.max() > B:
        raise ValueError(f"generator {generator.name} emitted values outside [0, {B:g}]")
    total, mean_total = X.sum(axis=1), means.sum(axis=1)
    slack = a_or_b * B * math.log(1 / delta)
    if tail == "upper":
        ok = total <= (1 + 1 / a_or_b) * mean_total + slack
    else:
        ok = total >= (1 - 1 / a_or_b) * mean_total - slack
    return CoverageReport(trials, int(np.count_nonzero(~ok)), delta)


# ---------------------------------------------------------------------------
# One entry point for every lemma
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LemmaCheck:
    name: str
    trials: int
    worst: float
    passed: bool

    def line(self) -> str:
        return f"{self.name:<40} trials={self.trials:<8} worst={self.worst:+.3e} {'PASS' if self.passed else 'FAIL'}"


def check_all_lemmas(rng, n_harmonic: int = 10**6, n_hedge: int = 10**4, n_hellinger: int = 10**5,
                     coverage_trials: int = 10**4, deltas=(0.01, 0.05, 0.1)) -> list[LemmaCheck]:
    gen = as_generator(rng)
    out = []
    w = fuzz_harmonic(n_harmonic, gen)
    out.append(LemmaCheck("harmonic", n_harmonic, w, w >= -GAP_TOL))
    w = fuzz_hedge(n_hedge, gen)
    out.append(LemmaCheck("hedge-constant-regret", n_hedge, w, w <= GAP_TOL))
    w = fuzz_hellinger(n_hellinger, gen)
    out.append(LemmaCheck("hellinger-variance", n_hellinger, w, w >= -GAP_TOL))
    for g in SHIPPED_GENERATORS:
        for delta in deltas:
            for tail in ("upper", "lower"):
                rep = freedman_mult_coverage(g, 1.0, 2.0, delta, coverage_trials, gen, tail=tail)
                out.append(LemmaCheck(f"freedman-mult/{g.name}/{tail}/delta={delta:g}",
                                      coverage_trials, rep.rate, rep.passed))
    return out
