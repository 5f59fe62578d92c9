"""Exploration-by-optimization for contextual bandits with structured observations.

The per-round problem is a min over (p, q, xi) of a sup over (model, a*) of
an exploitation gap minus ``gamma`` times an estimation term.  We solve it
in the perspective variables ``theta = gamma * q(a) * xi``, where every
objective is jointly convex, by projected subgradient descent with
best-iterate tracking.  The decision-estimation coefficient against a fixed
reference model is a max of affine functions of (p, q) and is solved
exactly as a linear program.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import linprog

from .core import Environment, PolicyClass, RngStream, Sparsity, as_generator, record_draws

PROB_TOL = 1e-12
XI_BOUND = 20.0
EXP_CLAMP = 40.0
Q_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Model:
    """Observation law per action plus the shared reward map on observations."""

    obs_dist: np.ndarray  # (A, O)
    reward_fn: np.ndarray  # (O,)

    def __post_init__(self):
        obs = np.array(self.obs_dist, dtype=np.float64)
        R = np.array(self.reward_fn, dtype=np.float64)
        if obs.ndim != 2 or R.ndim != 1 or obs.shape[1] != R.size:
            raise ValueError("obs_dist must be (A, O) and reward_fn (O,)")
        if np.any(obs < 0) or np.any(np.abs(obs.sum(axis=1) - 1) > PROB_TOL):
            raise ValueError("each obs_dist row must be a probability vector")
        if np.any(R < 0) or np.any(R > 1):
            raise ValueError("rewards of observations must lie in [0, 1]")
        obs.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "obs_dist", obs)
        object.__setattr__(self, "reward_fn", R)

    @property
    def n_actions(self) -> int:
        return self.obs_dist.shape[0]

    @property
    def values(self) -> np.ndarray:
        """Mean reward of each action."""
        return self.obs_dist @ self.reward_fn

    @property
    def second_moments(self) -> np.ndarray:
        return self.obs_dist @ self.reward_fn**2

    def best_action(self) -> int:
        return int(np.argmax(self.values))


class ModelClass:
    """Finite list of models sharing actions, observations and the reward map."""

    def __init__(self, models, s: float):
        models = list(models)
        if not models:
            raise ValueError("a model class needs at least one model")
        R = models[0].reward_fn
        shape = models[0].obs_dist.shape
        for M in models:
            if M.obs_dist.shape != shape or not np.array_equal(M.reward_fn, R):
                raise ValueError("all models must share actions, observations and reward map")
            if M.second_moments.sum() > s + PROB_TOL:
                raise ValueError(f"model violates the sparsity certificate sum_a E[R^2] <= {s:g}")
        self.models = models
        self.s = float(s)
        self.reward_fn = R
        self.obs = np.stack([M.obs_dist for M in models])  # (N, A, O)
        self.values = self.obs @ R  # (N, A)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, i) -> Model:
        return self.models[i]

    @property
    def n_actions(self) -> int:
        return self.obs.shape[1]

    @property
    def n_observations(self) -> int:
        return self.obs.shape[2]

    def to_dict(self) -> dict:
        return {
            "actions": self.n_actions,
            "observations": self.n_observations,
            "R": self.reward_fn.tolist(),
            "s": self.s,
            "models": [M.obs_dist.tolist() for M in self.models],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ModelClass":
        R = np.asarray(d["R"], dtype=np.float64)
        models = [Model(np.asarray(rows, dtype=np.float64), R) for rows in d["models"]]
        mc = cls(models, d["s"])
        if mc.n_actions != d["actions"] or mc.n_observations != d["observations"]:
            raise ValueError("declared sizes disagree with the model tables")
        return mc

    @classmethod
    def from_json(cls, text: str) -> "ModelClass":
        return cls.from_dict(json.loads(text))


def mixture(models, weights) -> Model:
    weights = np.asarray(weights, dtype=np.float64)
    obs = np.einsum("n,nao->ao", weights, np.stack([M.obs_dist for M in models]))
    obs /= obs.sum(axis=1, keepdims=True)
    return Model(obs, models[0].reward_fn)


def grid_model_class(A: int, step: float, s: float) -> ModelClass:
    """All Bernoulli-observation models with means on a grid and sum of means <= s.

    Observations are {0, 1} with reward R(o) = o, so E[R^2] equals the mean.
    """
    k = round(1 / step)
    if abs(k * step - 1) > 1e-12:
        raise ValueError("step must divide 1")
    R = np.array([0.0, 1.0])
    models = []
    for ticks in itertools.product(range(k + 1), repeat=A):
        if sum(ticks) <= s * k + 1e-9:
            mu = np.array(ticks) / k
            models.append(Model(np.stack([1 - mu, mu], axis=1), R))
    return ModelClass(models, s)


def random_sparse_model_class(A: int, O: int, n_models: int, s: float, rng) -> ModelClass:
    """Random model list obeying sum_a E[R^2] <= s.

    The reward map has R(0) = 0 so that over-budget models can be pulled
    toward observation 0 until the certificate holds.  Roughly half the
    models are near-deterministic (one observation per action), which makes
    the sup in the DEC harder to hide from.
    """
    gen = as_generator(rng)
    R = np.concatenate([[0.0], np.sort(gen.random(O - 1))]) if O > 1 else np.zeros(1)
    if O > 1:
        R[-1] = 1.0
    models = []
    for i in range(n_models):
        if i % 2:
            obs = np.eye(O)[gen.integers(O, size=A)]
        else:
            obs = gen.dirichlet(np.ones(O), size=A)
        load = float((obs @ R**2).sum())
        if load > s:
            lam = s / load * (1 - 1e-12)
            obs = lam * obs
            obs[:, 0] += 1 - lam
        obs /= obs.sum(axis=1, keepdims=True)
        models.append(Model(obs, R))
    return ModelClass(models, s)


@dataclass
class ModelEnvironment:
    """Contexts with a true model per context; realizable for any class containing those models."""

    context_probs: np.ndarray
    models: list

    def __post_init__(self):
        self.context_probs = np.asarray(self.context_probs, dtype=np.float64)
        if abs(self.context_probs.sum() - 1) > PROB_TOL or np.any(self.context_probs < 0):
            raise ValueError("context_probs must be a probability vector")
        if len(self.models) != self.context_probs.size:
            raise ValueError("need one model per context")

    @property
    def n_contexts(self) -> int:
        return self.context_probs.size

    @property
    def values(self) -> np.ndarray:
        """(X, A) table of mean rewards."""
        return np.stack([M.values for M in self.models])

    def to_environment(self, s: float) -> Environment:
        """Reward-vector view: each action's observation drawn independently."""
        law = []
        for M in self.models:
            A, O = M.obs_dist.shape
            probs, rows = [], []
            for outcome in itertools.product(range(O), repeat=A):
                pr = float(np.prod(M.obs_dist[np.arange(A), outcome]))
                if pr > 0:
                    probs.append(pr)
                    rows.append(M.reward_fn[list(outcome)])
            probs = np.array(probs)
            law.append((probs / probs.sum(), np.array(rows)))
        return Environment(self.context_probs, law, Sparsity("L2", s))


def policy_values_models(menv: ModelEnvironment, table: np.ndarray) -> np.ndarray:
    """Value of randomized policies given as (..., X, A) action distributions."""
    return np.einsum("x,...xa,xa->...", menv.context_probs, table, menv.values)


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def _check_prob(P, name, tol=1e-10):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 1 or np.any(P < 0) or abs(P.sum() - 1) > tol:
        raise ValueError(f"{name} must be a probability vector")
    return P


def hellinger_sq(P, Q) -> float:
    P, Q = _check_prob(P, "P"), _check_prob(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError("P and Q must have the same support size")
    return float(0.5 * np.sum((np.sqrt(P) - np.sqrt(Q)) ** 2))


def hellinger_variance_gap(P, Q, f) -> float:
    """RHS minus LHS of |E_P f - E_Q f| <= 4 sqrt(E_Q[f^2] H^2) + 4 H^2 (never negative)."""
    P, Q = _check_prob(P, "P"), _check_prob(Q, "Q")
    f = np.asarray(f, dtype=np.float64)
    if f.shape != P.shape or P.shape != Q.shape:
        raise ValueError("P, Q and f must share one support")
    if np.any(np.abs(f) > 1):
        raise ValueError("f must take values in [-1, 1]")
    h2 = hellinger_sq(P, Q)
    lhs = abs(P @ f - Q @ f)
    rhs = 4 * math.sqrt(float(Q @ f**2) * h2) + 4 * h2
    return rhs - lhs


# ---------------------------------------------------------------------------
# The ExO objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class XiTable:
    values: np.ndarray  # (A', A, O)
    bound: float = XI_BOUND

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise ValueError("xi must be indexed by (a', a, o)")
        if np.any(np.abs(v) > self.bound * (1 + 1e-12)):
            raise ValueError(f"xi entries must lie in [-{self.bound:g}, {self.bound:g}]")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, A: int, O: int, bound: float = XI_BOUND) -> "XiTable":
        return cls(np.zeros((A, A, O)), bound)


def _xi_array(xi) -> np.ndarray:
    return xi.values if isinstance(xi, XiTable) else np.asarray(xi, dtype=np.float64)


def gamma_objective(w, gamma: float, p, q, xi, M: Model, a_star: int,
                    diagnostics: dict | None = None) -> float:
    """Exploitation gap minus ``gamma`` times the estimation term for one (M, a*)."""
    w, p, q = (np.asarray(v, dtype=np.float64) for v in (w, p, q))
    xi = _xi_array(xi)
    f = M.values
    diff = xi - xi[a_star][None, :, :]  # (A', A, O)
    clipped = np.clip(diff, -EXP_CLAMP, EXP_CLAMP)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + int(np.count_nonzero(clipped != diff))
    inner = np.einsum("b,bao->ao", w, 1 - np.exp(clipped))
    estimation = float(np.einsum("a,ao,ao->", q, M.obs_dist, inner))
    return float(p @ (f[a_star] - f)) - gamma * estimation


def gamma_objective_tilde(w, gamma: float, p, q, xi_tilde, M: Model, a_star: int) -> float:
    """The same objective in the perspective variables xi_tilde = q * xi (jointly convex)."""
    w, p, q = (np.asarray(v, dtype=np.float64) for v in (w, p, q))
    xt = _xi_array(xi_tilde)
    f = M.values
    total = float(p @ (f[a_star] - f))
    for a in range(q.size):
        if q[a] <= 0:
            continue
        z = (xt[:, a, :] - xt[a_star, a, :][None, :]) / q[a]
        inner = w @ (1 - np.exp(z))
        total -= gamma * q[a] * float(M.obs_dist[a] @ inner)
    return total


def exo_objective(w, gamma: float, p, q, xi, Mclass: ModelClass) -> tuple[float, tuple[int, int]]:
    """Sup over the model list and a*; returns the value and the maximizing pair."""
    best, arg = -math.inf, (0, 0)
    for n, M in enumerate(Mclass.models):
        for a_star in range(Mclass.n_actions):
            v = gamma_objective(w, gamma, p, q, xi, M, a_star)
            if v > best:
                best, arg = v, (n, a_star)
    return best, arg


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _project_simplex(v, floor):
    n = v.size
    scale = 1.0 - n * floor
    u = np.sort((v - floor) / scale)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(n):
        css += u[i]
        t = (css - 1.0) / (i + 1)
        if u[i] - t > 0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        out[i] = floor + scale * max((v[i] - floor) / scale - theta, 0.0)
    return out


@numba.njit(cache=True)
def _recentre(th, gamma, q, bound):
    # xi is defined up to a per-(a, o) shift; centre, then cap |xi| <= bound
    A, _, O = th.shape
    for a in range(A):
        cap = bound * gamma * q[a]
        for o in range(O):
            lo = th[0, a, o]
            hi = th[0, a, o]
            for b in range(A):
                lo = min(lo, th[b, a, o])
                hi = max(hi, th[b, a, o])
            mid = 0.5 * (lo + hi)
            for b in range(A):
                th[b, a, o] = min(max(th[b, a, o] - mid, -cap), cap)


@numba.njit(cache=True)
def _solve_kernel(w, gamma, obs, f, iters, c, bound, p, q, th, q_floor):
    """Projected subgradient on (p, q, theta).

    With |xi| <= bound every exponent lies in [-2 bound, 2 bound], so
    exp(xi(b) - xi(a*)) factorises as E[b] / E[a*] with E = exp(xi) and
    each exponential is computed once per iteration.
    """
    N, A, O = obs.shape
    best_val = np.inf
    best_p = p.copy()
    best_q = q.copy()
    best_th = th.copy()
    best_k = 0
    mark = (9 * iters) // 10
    mark_val = np.inf
    step_norm = 0.0
    gp = np.empty(A)
    gq = np.empty(A)
    gth = np.empty((A, A, O))
    E = np.empty((A, A, O))
    S = np.empty((A, O))
    _recentre(th, gamma, q, bound)
    for k in range(iters + 1):
        for a in range(A):
            scale = gamma * q[a]
            for o in range(O):
                acc = 0.0
                for b in range(A):
                    E[b, a, o] = math.exp(th[b, a, o] / scale)
                    acc += w[b] * E[b, a, o]
                S[a, o] = acc
        top = -np.inf
        tn = 0
        ts = 0
        for n in range(N):
            base = 0.0
            for a in range(A):
                base -= p[a] * f[n, a]
                scale = gamma * q[a]
                for o in range(O):
                    base -= scale * obs[n, a, o]
            for s in range(A):
                v = base + f[n, s]
                for a in range(A):
                    scale = gamma * q[a]
                    for o in range(O):
                        v += scale * obs[n, a, o] * S[a, o] / E[s, a, o]
                if v > top:
                    top = v
                    tn = n
                    ts = s
        if top < best_val:
            best_val = top
            best_p[:] = p
            best_q[:] = q
            best_th[:] = th
            best_k = k
        if k == mark:
            mark_val = best_val
        if k == iters:
            break
        # subgradient of the active (model, a*) pair
        for a in range(A):
            gp[a] = f[tn, ts] - f[tn, a]
            gq[a] = 0.0
        gth[:] = 0.0
        for a in range(A):
            scale = gamma * q[a]
            for o in range(O):
                mo = obs[tn, a, o]
                if mo == 0.0:
                    continue
                es = E[ts, a, o]
                zs = th[ts, a, o] / scale
                for b in range(A):
                    if b == ts:
                        continue
                    ez = E[b, a, o] / es
                    z = th[b, a, o] / scale - zs
                    g = mo * w[b] * ez
                    gth[b, a, o] += g
                    gth[ts, a, o] -= g
                    gq[a] += gamma * mo * w[b] * ((ez - 1.0) - z * ez)
        norm = 0.0
        for a in range(A):
            norm += gp[a] * gp[a] + gq[a] * gq[a]
        for i in range(gth.size):
            norm += gth.flat[i] ** 2
        norm = math.sqrt(norm)
        eta = c / math.sqrt(k + 1.0) / max(1.0, norm)
        step_norm = eta * norm
        p = _project_simplex(p - eta * gp, 0.0)
        q = _project_simplex(q - eta * gq, q_floor)
        th = th - eta * gth
        _recentre(th, gamma, q, bound)
    return best_p, best_q, best_th, best_val, best_k, step_norm, mark_val


@dataclass
class SolverConfig:
    iterations: int = 2000
    step: float = 0.5
    xi_bound: float = XI_BOUND
    q_floor: float = Q_FLOOR
    reference_model: int = 0
    stall_tol: float = 1e-4


@dataclass
class ExoSolution:
    p: np.ndarray
    q: np.ndarray
    xi: XiTable
    objective_value: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "p": self.p.tolist(),
            "q": self.q.tolist(),
            "xi": self.xi.values.tolist(),
            "objective_value": self.objective_value,
            "diagnostics": self.diagnostics,
        }


def analytic_point(w, Mclass: ModelClass, reference_model: int = 0):
    """Point mass on the reference model's best action, uniform q, xi = 0."""
    A, O = Mclass.n_actions, Mclass.n_observations
    p = np.zeros(A)
    p[int(np.argmax(Mclass.values[reference_model]))] = 1.0
    return p, np.full(A, 1.0 / A), XiTable.zeros(A, O)


def ips_theta(Mclass: ModelClass) -> np.ndarray:
    """Warm start theta(a'; a, o) = 1{a' = a} R(o), i.e. xi = importance-weighted reward / gamma.

    It solves the large-gamma limit of the problem exactly, where the
    estimation term becomes linear in theta.
    """
    A = Mclass.n_actions
    return np.eye(A)[:, :, None] * Mclass.reward_fn[None, None, :]


def solve_exo(w, gamma: float, Mclass: ModelClass, solver_cfg: SolverConfig | None = None) -> ExoSolution:
    """Approximate minimizer of the sup-objective over (p, q, xi)."""
    cfg = solver_cfg or SolverConfig()
    w = _check_prob(w, "w")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    A, O = Mclass.n_actions, Mclass.n_observations
    if w.size != A:
        raise ValueError("w must be a distribution over actions")
    f = np.ascontiguousarray(Mclass.values)
    obs = np.ascontiguousarray(Mclass.obs)

    p0, q0, xi0 = analytic_point(w, Mclass, cfg.reference_model)
    anchor, _ = exo_objective(w, gamma, p0, q0, xi0, Mclass)

    bp, bq, bth, val, best_k, step_norm, mark_val = _solve_kernel(
        w, float(gamma), obs, f, int(cfg.iterations), float(cfg.step), float(cfg.xi_bound),
        w.copy(), np.full(A, 1.0 / A), ips_theta(Mclass), float(cfg.q_floor))
    xi = np.clip(bth / (gamma * bq[None, :, None]), -cfg.xi_bound, cfg.xi_bound)
    value, pair = exo_objective(w, gamma, bp, bq, xi, Mclass)
    diagnostics = {
        "iterations": int(cfg.iterations),
        "best_iteration": int(best_k),
        "final_step_norm": float(step_norm),
        "kernel_value": float(val),
        "active_pair": [int(pair[0]), int(pair[1])],
        "xi_cap_active": bool(np.any(np.abs(xi) >= cfg.xi_bound * (1 - 1e-9))),
    }
    if anchor <= value:
        # best-iterate tracking includes the analytic starting point
        bp, bq, xi, value = p0, q0, xi0.values, anchor
        diagnostics["used_anchor"] = True
    # stalled over the last tenth of the run counts as converged
    diagnostics["converged"] = bool(mark_val - val <= cfg.stall_tol)
    return ExoSolution(bp / bp.sum(), bq / bq.sum(), XiTable(xi, cfg.xi_bound), float(value), diagnostics)


# ---------------------------------------------------------------------------
# DEC
# ---------------------------------------------------------------------------


def sparsity_weighted_q(Mbar: Model, s: float) -> np.ndarray:
    lam = Mbar.second_moments
    C = float(lam.sum())
    if C > s + PROB_TOL:
        raise ValueError(f"reference model has sum_a E[R^2] = {C:g} > s = {s:g}")
    A = lam.size
    return (1 - C / (2 * s)) / A + lam / (2 * s)


def _dec_tables(Mclass: ModelClass, Mbar: Model):
    f = Mclass.values
    gaps = f.max(axis=1, keepdims=True) - f  # (N, A)
    h2 = 0.5 * ((np.sqrt(Mclass.obs) - np.sqrt(Mbar.obs_dist)[None]) ** 2).sum(axis=2)
    return gaps, h2


def pdec_certificate_value(Mclass: ModelClass, Mbar: Model, gamma: float) -> float:
    """Sup over the class at p = point mass on Mbar's best action, q = sparsity-weighted."""
    gaps, h2 = _dec_tables(Mclass, Mbar)
    q = sparsity_weighted_q(Mbar, Mclass.s)
    return float(np.max(gaps[:, Mbar.best_action()] - gamma * h2 @ q))


@dataclass
class PdecResult:
    value: float
    lp_value: float
    certificate_value: float
    p: np.ndarray
    q: np.ndarray


def pdec_solve(Mclass: ModelClass, Mbar: Model, gamma: float) -> PdecResult:
    """Exact inf over (p, q) of the max over models, as a linear program.

    Variables are (p, q, t); each model contributes the cut
    ``gaps_M . p - gamma h2_M . q <= t``.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    gaps, h2 = _dec_tables(Mclass, Mbar)
    N, A = gaps.shape
    c = np.zeros(2 * A + 1)
    c[-1] = 1.0
    A_ub = np.hstack([gaps, -gamma * h2, -np.ones((N, 1))])
    A_eq = np.zeros((2, 2 * A + 1))
    A_eq[0, :A] = 1
    A_eq[1, A:2 * A] = 1
    bounds = [(0, None)] * (2 * A) + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(N), A_eq=A_eq, b_eq=[1, 1], bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"DEC linear program failed: {res.message}")
    p = np.clip(res.x[:A], 0, None)
    q = np.clip(res.x[A:2 * A], 0, None)
    p, q = p / p.sum(), q / q.sum()
    lp_value = float(np.max(gaps @ p - gamma * h2 @ q))
    try:
        cert = pdec_certificate_value(Mclass, Mbar, gamma)
    except ValueError:
        cert = math.inf
    return PdecResult(min(lp_value, cert), lp_value, cert, p, q)


def pdec_estimate(Mclass: ModelClass, Mbar: Model, gamma: float) -> float:
    return pdec_solve(Mclass, Mbar, gamma).value


# ---------------------------------------------------------------------------
# The full loop
# ---------------------------------------------------------------------------


@dataclass
class ExoTrace:
    contexts: np.ndarray
    actions: np.ndarray
    observations: np.ndarray
    log_weights: np.ndarray  # (T, |Pi|) snapshots W^(t) before each update
    objective_values: np.ndarray
    unconverged: int = 0


def marginal(log_weights: np.ndarray, Pi: PolicyClass, x: int) -> np.ndarray:
    W = np.exp(log_weights - log_weights.max())
    W /= W.sum()
    return np.bincount(Pi.table[:, x], weights=W, minlength=Pi.n_actions)


def run_exo(menv: ModelEnvironment, Pi: PolicyClass, gamma: float, T: int, Mclass: ModelClass,
            rng: RngStream, solver_cfg: SolverConfig | None = None) -> tuple[np.ndarray, ExoTrace]:
    """T rounds of exploration-by-optimization; returns the averaged per-context action law.

    Draws: ``exo/contexts``, ``exo/actions`` and ``exo/observations`` each
    supply T uniforms.
    """
    if T < 1:
        raise ValueError("T must be positive")
    if Pi.n_actions != Mclass.n_actions or Pi.n_contexts != menv.n_contexts:
        raise ValueError("policy class does not match the environment")
    X, A = menv.n_contexts, Mclass.n_actions
    record_draws(T)
    cdf_x = np.cumsum(menv.context_probs)
    ux = rng.spawn("exo/contexts").generator().random(T)
    contexts = np.minimum(np.searchsorted(cdf_x, ux * cdf_x[-1], side="right"), X - 1)
    ua = rng.spawn("exo/actions").generator().random(T)
    uo = rng.spawn("exo/observations").generator().random(T)

    logw = np.zeros(Pi.size)
    snaps = np.empty((T, Pi.size))
    actions = np.empty(T, dtype=np.int64)
    observations = np.empty(T, dtype=np.int64)
    values = np.empty(T)
    per_round_p = np.empty((T, A))
    unconverged = 0
    for t in range(T):
        x = int(contexts[t])
        snaps[t] = logw
        sol = solve_exo(marginal(logw, Pi, x), gamma, Mclass, solver_cfg)
        unconverged += not sol.diagnostics["converged"]
        values[t] = sol.objective_value
        per_round_p[t] = sol.p
        cq = np.cumsum(sol.q)
        a = min(int(np.searchsorted(cq, ua[t] * cq[-1], side="right")), A - 1)
        co = np.cumsum(menv.models[x].obs_dist[a])
        o = min(int(np.searchsorted(co, uo[t] * co[-1], side="right")), co.size - 1)
        actions[t], observations[t] = a, o
        logw = logw + sol.xi.values[Pi.table[:, x], a, o]
        logw -= logw.max()

    # online-to-batch: P^(t)(x) for every context, reusing the round's own solve
    pi_hat = np.zeros((X, A))
    cache: dict[bytes, np.ndarray] = {}
    for t in range(T):
        for x in range(X):
            if x == contexts[t]:
                pi_hat[x] += per_round_p[t]
                continue
            w = marginal(snaps[t], Pi, x)
            key = w.tobytes()
            if key not in cache:
                sol = solve_exo(w, gamma, Mclass, solver_cfg)
                unconverged += not sol.diagnostics["converged"]
                cache[key] = sol.p
            pi_hat[x] += cache[key]
    pi_hat /= T
    return pi_hat, ExoTrace(contexts, actions, observations, snaps, values, unconverged)


def exo_suboptimality(menv: ModelEnvironment, Pi: PolicyClass, pi_hat: np.ndarray) -> float:
    onehot = np.eye(Pi.n_actions)[Pi.table]  # (|Pi|, X, A)
    best = float(policy_values_models(menv, onehot).max())
    return best - float(policy_values_models(menv, pi_hat))


def exo_bound(s: float, gamma: float, Pi_size: int, delta: float, T: int) -> float:
    """DEC bound at gamma/8 plus the estimation and deviation terms."""
    return 64 * s * 8 / gamma + 4 * gamma * math.log(Pi_size / delta) / T + 2 * math.sqrt(math.log(1 / delta) / T)


def make_tiny_exo_instance(rng, X: int = 2, A: int = 3, Pi_size: int = 6, s: float = 1.0, step: float = 1 / 3):
    """Bernoulli-grid class, true models drawn from it, and a random policy class holding the best map."""
    gen = as_generator(rng)
    Mclass = grid_model_class(A, step, s)
    idx = gen.integers(len(Mclass), size=X)
    menv = ModelEnvironment(gen.dirichlet(np.ones(X)), [Mclass[int(i)] for i in idx])
    n_total = A**X
    codes = gen.choice(n_total, size=Pi_size, replace=False)
    table = np.array([[(c // A**(X - 1 - x)) % A for x in range(X)] for c in codes], dtype=np.int64)
    best = np.argmax(menv.values, axis=1)
    if not np.any(np.all(table == best, axis=1)):
        table[int(gen.integers(Pi_size))] = best
    return menv, PolicyClass(table, A), Mclass
