"""Finite-support contextual bandit environments, policies, and exact oracles.

Everything here is immutable after construction.  Environments hold a finite
joint law over ``(context, reward vector)`` pairs, so every population
quantity (policy values, second moments, sparsity certificates) is computed
by summation rather than sampling.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

PROB_TOL = 1e-12
SPARSITY_TOL = 1e-12
L1 = "L1"
L2 = "L2"


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _derive_id(stream_id: int, label: str) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(stream_id).to_bytes(8, "little"))
    h.update(label.encode())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so two streams with the same key produce identical
    draws regardless of how many other streams exist or which process
    consumes them.  Child streams are derived by hashing a label into the
    stream id, never by consuming draws from the parent.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{name} must fit in 64 bits, got {v}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def spawn(self, label: str) -> "RngStream":
        return RngStream(self.seed, _derive_id(self.stream_id, label))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sparsity:
    mode: str
    s: float

    def __post_init__(self):
        if self.mode not in (L1, L2):
            raise ValueError(f"sparsity mode must be L1 or L2, got {self.mode!r}")
        if not self.s >= 1:
            raise ValueError(f"sparsity level must be >= 1, got {self.s}")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Environment:
    """Finite-support joint law over contexts and reward vectors.

    Parameters
    ----------
    context_probs : array_like, shape (X,)
        Marginal law of the context.
    reward_law : sequence of (probs, rewards)
        One entry per context.  ``probs`` has shape (k_x,) and ``rewards``
        shape (k_x, A); row ``i`` of ``rewards`` is drawn with probability
        ``probs[i]`` given the context.
    sparsity : Sparsity
        Certificate checked at construction.
    subset_size : int, optional
        ``m`` for combinatorial semi-bandit mode, where actions are m-subsets
        of the ``A`` base coordinates.
    """

    def __init__(self, context_probs, reward_law, sparsity: Sparsity, subset_size: int | None = None):
        self.context_probs = _frozen(context_probs)
        if self.context_probs.ndim != 1 or self.context_probs.size == 0:
            raise ValueError("context_probs must be a non-empty vector")
        if np.any(self.context_probs < 0) or abs(self.context_probs.sum() - 1.0) > PROB_TOL:
            raise ValueError("context_probs must be a probability vector")
        if len(reward_law) != self.context_probs.size:
            raise ValueError("reward_law needs one distribution per context")

        probs, rewards = [], []
        n_actions = None
        for x, (p, r) in enumerate(reward_law):
            p = _frozen(p)
            r = _frozen(np.atleast_2d(r))
            if p.ndim != 1 or r.shape[0] != p.size:
                raise ValueError(f"context {x}: support probabilities and rewards disagree in length")
            if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
                raise ValueError(f"context {x}: reward law is not a probability vector")
            if np.any(r < 0) or np.any(r > 1):
                raise ValueError(f"context {x}: rewards must lie in [0, 1]")
            if n_actions is None:
                n_actions = r.shape[1]
            elif r.shape[1] != n_actions:
                raise ValueError("all reward vectors must have the same length")
            probs.append(p)
            rewards.append(r)

        self.support_probs: tuple[np.ndarray, ...] = tuple(probs)
        self.support_rewards: tuple[np.ndarray, ...] = tuple(rewards)
        self.n_actions = int(n_actions)
        self.sparsity = sparsity
        if subset_size is not None and not 1 <= subset_size <= self.n_actions:
            raise ValueError(f"subset size m={subset_size} out of range for K={self.n_actions}")
        self.subset_size = subset_size

        self.mean_rewards = _frozen([p @ r for p, r in zip(probs, rewards)])
        self.second_moments = _frozen([p @ (r * r) for p, r in zip(probs, rewards)])

        # flattened joint law for single-uniform inverse-CDF sampling
        joint_p = np.concatenate([px * p for px, p in zip(self.context_probs, probs)])
        self._joint_cdf = np.cumsum(joint_p)
        self._joint_context = np.concatenate([np.full(p.size, x) for x, p in enumerate(probs)])
        self._joint_rewards = np.concatenate(rewards, axis=0)

        if not certificate_holds(self):
            raise ValueError(f"environment violates its sparsity certificate {sparsity}")

    @property
    def n_contexts(self) -> int:
        return self.context_probs.size

    @property
    def is_semibandit(self) -> bool:
        return self.subset_size is not None

    def __repr__(self):
        m = f", m={self.subset_size}" if self.is_semibandit else ""
        return (f"Environment(X={self.n_contexts}, A={self.n_actions}{m}, "
                f"sparsity={self.sparsity.mode}:{self.sparsity.s:g})")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = {
            "contexts": self.context_probs.tolist(),
            "rewards": [
                [{"p": float(pi), "r": ri.tolist()} for pi, ri in zip(p, r)]
                for p, r in zip(self.support_probs, self.support_rewards)
            ],
            "sparsity": {"mode": self.sparsity.mode, "s": self.sparsity.s},
            "actions": self.n_actions,
        }
        if self.is_semibandit:
            d["m"] = self.subset_size
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Environment":
        law = []
        for pairs in d["rewards"]:
            law.append(([e["p"] for e in pairs], [e["r"] for e in pairs]))
        env = cls(d["contexts"], law, Sparsity(d["sparsity"]["mode"], d["sparsity"]["s"]), d.get("m"))
        if env.n_actions != d["actions"]:
            raise ValueError("declared action count does not match reward vectors")
        return env

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))


def certificate_holds(env: Environment, tol: float = SPARSITY_TOL) -> bool:
    """Re-check the sparsity certificate by enumerating the support."""
    s = env.sparsity.s
    if env.sparsity.mode == L1:
        return all(float(r.sum(axis=1).max()) <= s + tol for r in env.support_rewards)
    return expected_sq_norm(env) <= s + tol


def expected_sq_norm(env: Environment) -> float:
    return float(env.context_probs @ env.second_moments.sum(axis=1))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_round(env: Environment, rng) -> tuple[int, np.ndarray]:
    """Draw one ``(context, reward vector)`` pair using a single uniform."""
    gen = as_generator(rng)
    k = int(np.searchsorted(env._joint_cdf, gen.random() * env._joint_cdf[-1], side="right"))
    k = min(k, env._joint_cdf.size - 1)
    return int(env._joint_context[k]), env._joint_rewards[k].copy()


class RoundTape:
    """A batch of environment draws exposing bandit feedback only.

    The full reward vectors are private.  Algorithms read them exclusively
    through :meth:`pull` (one coordinate per round) or :meth:`pull_subsets`
    (the coordinates of the chosen m-subset).
    """

    def __init__(self, contexts: np.ndarray, rewards: np.ndarray):
        self.contexts = contexts
        self._rewards = rewards

    def __len__(self):
        return self.contexts.size

    def pull(self, rounds, actions) -> np.ndarray:
        return self._rewards[rounds, actions]

    def pull_subsets(self, rounds, subsets) -> np.ndarray:
        rounds = np.asarray(rounds)
        return self._rewards[rounds[:, None], subsets]


class _DrawLedger:
    """Process-wide count of environment rounds drawn, for budget audits."""

    total = 0


def record_draws(n: int):
    _DrawLedger.total += int(n)


@contextmanager
def audit_draws():
    """Yield a one-element list that holds the rounds drawn inside the block on exit."""
    box = [0]
    start = _DrawLedger.total
    try:
        yield box
    finally:
        box[0] = _DrawLedger.total - start


def draw_rounds(env: Environment, n: int, rng) -> RoundTape:
    """Draw ``n`` i.i.d. rounds, consuming exactly ``n`` uniforms."""
    record_draws(n)
    gen = as_generator(rng)
    u = gen.random(n) * env._joint_cdf[-1]
    k = np.minimum(np.searchsorted(env._joint_cdf, u, side="right"), env._joint_cdf.size - 1)
    return RoundTape(env._joint_context[k], env._joint_rewards[k])


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Policy:
    """Deterministic map from context index to an action (or an m-subset)."""

    action_of: tuple

    def __call__(self, x: int):
        return self.action_of[x]


class PolicyClass:
    """Indexed finite policy class stored as an integer table.

    ``table`` has shape (P, X) for plain actions, or (P, X, m) with each
    last-axis row sorted for m-subset actions.
    """

    def __init__(self, table, n_actions: int, diagnostics: dict | None = None):
        table = np.array(table, dtype=np.int64, copy=True)
        if table.ndim not in (2, 3) or table.shape[0] < 1:
            raise ValueError("policy table must have shape (P, X) or (P, X, m) with P >= 1")
        if table.size and (table.min() < 0 or table.max() >= n_actions):
            raise ValueError("policy table references an action outside [0, A)")
        if table.ndim == 3:
            table.sort(axis=2)
            if table.shape[2] > 1 and np.any(np.diff(table, axis=2) == 0):
                raise ValueError("subset actions must have distinct members")
        table.setflags(write=False)
        self.table = table
        self.n_actions = int(n_actions)
        self.diagnostics = dict(diagnostics or {})
        self.diagnostics.setdefault("duplicates", self.count_duplicates())

    @classmethod
    def from_policies(cls, policies: Sequence[Policy], n_actions: int) -> "PolicyClass":
        return cls([p.action_of for p in policies], n_actions)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def __len__(self):
        return self.size

    @property
    def n_contexts(self) -> int:
        return self.table.shape[1]

    @property
    def subset_size(self) -> int | None:
        return self.table.shape[2] if self.table.ndim == 3 else None

    def __getitem__(self, i: int) -> Policy:
        row = self.table[i]
        if row.ndim == 1:
            return Policy(tuple(int(a) for a in row))
        return Policy(tuple(tuple(int(j) for j in sub) for sub in row))

    def __iter__(self):
        return (self[i] for i in range(self.size))

    def count_duplicates(self) -> int:
        flat = self.table.reshape(self.size, -1)
        return self.size - np.unique(flat, axis=0).shape[0]

    def incidence(self) -> np.ndarray:
        """Boolean array (P, X, A): does policy i pick (or include) action a at x."""
        P, X = self.table.shape[:2]
        out = np.zeros((P, X, self.n_actions), dtype=bool)
        idx = self.table if self.table.ndim == 3 else self.table[:, :, None]
        np.put_along_axis(out, idx, True, axis=2)
        return out

    def check_compatible(self, env: Environment):
        if self.n_actions != env.n_actions or self.n_contexts != env.n_contexts:
            raise ValueError(
                f"policy class over X={self.n_contexts}, A={self.n_actions} does not match {env!r}")
        if self.subset_size != env.subset_size:
            raise ValueError("policy class and environment disagree on the action type")


def _as_table_row(pi, Pi: PolicyClass | None = None) -> np.ndarray:
    if isinstance(pi, (int, np.integer)):
        return Pi.table[int(pi)]
    if isinstance(pi, Policy):
        return np.asarray(pi.action_of, dtype=np.int64)
    return np.asarray(pi, dtype=np.int64)


# ---------------------------------------------------------------------------
# Exact expectations
# ---------------------------------------------------------------------------


def policy_value_exact(env: Environment, pi) -> float:
    """Population reward of a deterministic policy, by exact summation."""
    row = _as_table_row(pi)
    X = env.n_contexts
    if row.ndim == 1:
        per_x = env.mean_rewards[np.arange(X), row]
    else:
        per_x = np.take_along_axis(env.mean_rewards, row, axis=1).sum(axis=1)
    return float(env.context_probs @ per_x)


def policy_values_exact(env: Environment, Pi: PolicyClass) -> np.ndarray:
    return np.einsum("x,pxa,xa->p", env.context_probs, Pi.incidence(), env.mean_rewards)


def best_policy_value(env: Environment, Pi: PolicyClass) -> tuple[float, int]:
    """Maximum exact value over the class; ties go to the lowest index."""
    values = policy_values_exact(env, Pi)
    i = int(np.argmax(values))
    return float(values[i]), i


def marginal_action_prob(p, Pi: PolicyClass, x: int, a: int) -> float:
    """Probability that a policy drawn from ``p`` picks (or includes) ``a`` at ``x``."""
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError("p must sum to one")
    col = Pi.table[:, x]
    hits = (col == a) if col.ndim == 1 else np.any(col == a, axis=1)
    return float(p @ hits)


def action_marginals(p, Pi: PolicyClass) -> np.ndarray:
    """All marginals at once, shape (X, A)."""
    p = np.asarray(p, dtype=np.float64)
    return np.einsum("p,pxa->xa", p, Pi.incidence())


def empirical_distribution(selected: np.ndarray, n_policies: int) -> np.ndarray:
    counts = np.bincount(selected, minlength=n_policies).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def make_lower_bound_env(A_size: int, eps: float, rng) -> tuple[Environment, PolicyClass, int]:
    """Two-context hard instance: rare context carries a one-hot reward.

    Context 0 has mass ``eps`` and rewards ``e_{a*}`` for a uniformly drawn
    ``a*``; context 1 has mass ``1 - eps`` and zero reward.  The class is all
    ``A_size**2`` maps, indexed as ``a0 * A_size + a1``.
    """
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if A_size < 2:
        raise ValueError("need at least two actions")
    a_star = int(as_generator(rng).integers(A_size))
    onehot = np.zeros((1, A_size))
    onehot[0, a_star] = 1.0
    env = Environment(
        [eps, 1.0 - eps],
        [([1.0], onehot), ([1.0], np.zeros((1, A_size)))],
        Sparsity(L1, 1.0),
    )
    grid = np.array(list(itertools.product(range(A_size), repeat=2)), dtype=np.int64)
    Pi = PolicyClass(grid, A_size, {"optimal_indices": [a_star * A_size + a for a in range(A_size)]})
    return env, Pi, a_star


@dataclass(frozen=True)
class SparseEnvSpec:
    X_size: int
    A_size: int
    s: float
    mode: str = L1
    reward_style: str = "one-hot"
    Pi_size: int = 20
    support_size: int = 4
    m: int | None = None


REWARD_STYLES = ("one-hot", "random-s-sparse-binary", "dense-scaled")


def _random_tables(gen, n_total: int, size: int, X: int, A: int) -> np.ndarray:
    if n_total <= 10**6:
        codes = gen.choice(n_total, size=size, replace=False)
        digits = np.empty((size, X), dtype=np.int64)
        for x in range(X - 1, -1, -1):
            digits[:, x] = codes % A
            codes = codes // A
        return digits
    seen, rows = set(), []
    while len(rows) < size:
        row = tuple(int(a) for a in gen.integers(A, size=X))
        if row not in seen:
            seen.add(row)
            rows.append(row)
    return np.array(rows, dtype=np.int64)


def _random_subsets(gen, size: int, X: int, K: int, m: int) -> np.ndarray:
    keys = gen.random((size, X, K))
    return np.sort(np.argsort(keys, axis=2)[:, :, :m], axis=2)


def make_sparse_env(spec: SparseEnvSpec, rng) -> tuple[Environment, PolicyClass]:
    """Random sparse-reward instance plus a random policy class.

    The class always contains a policy that is optimal over *all* maps
    ``X -> A`` (its index is recorded in ``Pi.diagnostics``).
    """
    gen = as_generator(rng)
    X, A, s = spec.X_size, spec.A_size, float(spec.s)
    if not 1 <= s <= A:
        raise ValueError(f"sparsity s={s} must satisfy 1 <= s <= A={A}")
    if spec.reward_style not in REWARD_STYLES:
        raise ValueError(f"unknown reward style {spec.reward_style!r}")
    m = spec.m
    if m is not None:
        n_total = math.comb(A, m) ** X
    else:
        n_total = A**X
    if spec.Pi_size > n_total:
        raise ValueError(f"requested |Pi|={spec.Pi_size} exceeds the {n_total} available maps")

    law = []
    for _ in range(X):
        if spec.reward_style == "one-hot":
            probs = gen.dirichlet(np.ones(A))
            keep = probs > 0
            law.append([probs[keep] / probs[keep].sum(), np.eye(A)[keep]])
        elif spec.reward_style == "random-s-sparse-binary":
            k = spec.support_size
            r = np.zeros((k, A))
            for i in range(k):
                ones = gen.integers(1, int(math.floor(s)) + 1)
                r[i, gen.choice(A, size=ones, replace=False)] = 1.0
            law.append([gen.dirichlet(np.ones(k)), r])
        else:
            k = spec.support_size
            r = gen.random((k, A))
            if spec.mode == L1:
                norms = r.sum(axis=1, keepdims=True)
                r = r * np.minimum(1.0, s / norms)
            law.append([gen.dirichlet(np.ones(k)), r])

    if spec.reward_style == "dense-scaled" and spec.mode == L2:
        ctx = gen.dirichlet(np.ones(X))
        sq = sum(c * (p @ (r * r).sum(axis=1)) for c, (p, r) in zip(ctx, law))
        scale = min(1.0, math.sqrt(s / sq)) * (1 - 1e-12)
        law = [[p, r * scale] for p, r in law]
    else:
        ctx = gen.dirichlet(np.ones(X))

    env = Environment(ctx, law, Sparsity(spec.mode, s), subset_size=m)

    if m is None:
        table = _random_tables(gen, n_total, spec.Pi_size, X, A)
        best = np.argmax(env.mean_rewards, axis=1)
        hit = np.all(table == best, axis=1)
    else:
        table = _random_subsets(gen, spec.Pi_size, X, A, m)
        best = np.sort(np.argsort(-env.mean_rewards, axis=1, kind="stable")[:, :m], axis=1)
        hit = np.all(table == best, axis=(1, 2))
    if not hit.any():
        table[int(gen.integers(spec.Pi_size))] = best
    Pi = PolicyClass(table, A)
    values = policy_values_exact(env, Pi)
    top = values.max()
    Pi.diagnostics["optimal_indices"] = [int(i) for i in np.flatnonzero(values >= top - 1e-12)]
    return env, Pi


def systematic_binary_law(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Finite joint law on {0,1}^A with marginals ``mu`` and few support points.

    Uses systematic sampling: one uniform U, coordinate ``a`` is on when
    ``U + j`` lands in ``[c_a, c_a + mu_a)`` for some integer ``j``, where
    ``c`` are the cumulative offsets.  Every draw then has either
    ``floor(sum mu)`` or ``ceil(sum mu)`` ones.
    """
    mu = np.asarray(mu, dtype=np.float64)
    starts = np.concatenate([[0.0], np.cumsum(mu)[:-1]])
    ends = starts + mu
    raw = np.sort(np.concatenate([np.mod(starts, 1.0), np.mod(ends, 1.0)]))
    # merge float-noise duplicates so no sliver interval mixes two patterns
    cuts = [0.0]
    for c in raw:
        if 1e-12 < c < 1.0 - 1e-12 and c - cuts[-1] > 1e-12:
            cuts.append(float(c))
    cuts.append(1.0)
    probs, rows = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        u = 0.5 * (lo + hi)
        lo_j = np.ceil(starts - u)
        row = ((u + lo_j) < ends) & (mu > 0)
        probs.append(hi - lo)
        rows.append(row.astype(np.float64))
    probs = np.array(probs)
    return probs / probs.sum(), np.array(rows)


def make_planted_env(A_size: int, s: int, gap: float, X_size: int, Pi_size: int, rng,
                     base: float = 0.25, overlap: float = 0.0) -> tuple[Environment, PolicyClass]:
    """Sparse instance whose difficulty is governed by ``s``.

    Each context plants ``k`` rewarding actions: one optimal action with mean
    ``base + gap`` and ``k - 1`` decoys with mean ``base``, where ``k`` is the
    largest count keeping the means summing to at most ``s``.  Rewards are
    binary with exactly these marginals and at most ``s`` ones per draw.
    One policy, at a random index, plays the optimal action everywhere;
    every other policy plays a decoy at every context (an unrewarded action
    when ``s`` leaves no room for decoys), so each of them is at least
    ``gap`` worse.  With ``overlap > 0`` each other policy instead plays the
    optimal action at each context independently with that probability, so
    the optimum is well covered by the class and the decoys carry the
    difficulty.
    """
    gen = as_generator(rng)
    top = base + gap
    if not 0 < top <= 1:
        raise ValueError("base + gap must lie in (0, 1]")
    k = min(A_size, 1 + int(math.floor((s - top) / base + 1e-12)))
    law, planted = [], []
    for _ in range(X_size):
        acts = gen.choice(A_size, size=k, replace=False)
        mu = np.zeros(A_size)
        mu[acts] = base
        mu[acts[0]] = top
        law.append(systematic_binary_law(mu))
        planted.append(acts)
    env = Environment(np.full(X_size, 1.0 / X_size), law, Sparsity(L1, float(s)))
    table = np.empty((Pi_size, X_size), dtype=np.int64)
    for x, acts in enumerate(planted):
        table[0, x] = acts[0]
        pool = acts[1:] if k > 1 else np.setdiff1d(np.arange(A_size), acts[:1])
        table[1:, x] = gen.choice(pool, size=Pi_size - 1, replace=True)
        if overlap > 0:
            table[1:, x] = np.where(gen.random(Pi_size - 1) < overlap, acts[0], table[1:, x])
    # hide the optimum at a random index so lowest-index ties give it no help
    star = int(gen.integers(Pi_size))
    table[[0, star]] = table[[star, 0]]
    optimal = np.flatnonzero((table == table[star]).all(axis=1)).tolist()
    Pi = PolicyClass(table, A_size, {"optimal_indices": optimal, "planted": k})
    return env, Pi
