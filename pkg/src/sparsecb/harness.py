"""Experiment harness: instance families, the explore-then-commit baseline,
seeded sweeps, empirical sample-complexity search, and report emission."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .ccsb import CcsbConfig, run_ccsb
from .core import (
    Environment,
    PolicyClass,
    RngStream,
    SparseEnvSpec,
    audit_draws,
    best_policy_value,
    draw_rounds,
    make_lower_bound_env,
    make_planted_env,
    make_sparse_env,
    policy_value_exact,
)
from .exo import ModelClass, ModelEnvironment, make_tiny_exo_instance, run_exo
from .lve import N_MULTIPLIER, T_MULTIPLIER, LveConfig, run_lve
from .report import RunReport

ALGORITHMS = ("lve", "ccsb", "exo", "baseline-etc")
ETC_C = 8.0
EXO_T = 300
BUDGET_CAP = 10**8
SUBOPT_TOL = 1e-10


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Baseline
# ---------------------------------------------------------------------------


def etc_rounds(A: int, Pi_size: int, eps: float, delta: float, c: float = ETC_C, scale: float = 1.0) -> int:
    return max(1, math.ceil(c * scale * (A / eps**2) * math.log(Pi_size / delta)))


def run_baseline_etc(env: Environment, Pi: PolicyClass, eps: float, delta: float, rng: RngStream,
                     c: float = ETC_C, scale: float = 1.0) -> RunReport:
    """Uniform exploration, then the argmax of plain importance-weighted estimates.

    Draws: ``etc/env`` and ``etc/actions`` with ``n0`` values each.
    """
    Pi.check_compatible(env)
    if env.is_semibandit:
        raise ValueError("the explore-then-commit baseline handles single-action bandits only")
    A, X = env.n_actions, env.n_contexts
    n0 = etc_rounds(A, Pi.size, eps, delta, c, scale)
    stream = rng.spawn("etc")
    tape = draw_rounds(env, n0, stream.spawn("etc/env"))
    a = stream.spawn("etc/actions").generator().integers(0, A, size=n0)
    r = tape.pull(np.arange(n0), a)
    W = np.bincount(tape.contexts * A + a, weights=r * A, minlength=X * A).reshape(X, A)
    sums = W[np.arange(X), Pi.table].sum(axis=1)
    chosen = int(np.argmax(sums))
    best, _ = best_policy_value(env, Pi)
    xs = np.arange(X)
    variance = (env.context_probs @ (env.second_moments[xs[:, None], Pi.table.T] * A)).tolist()
    return RunReport(
        algorithm="baseline-etc",
        config={"n0": n0, "c": c, "eps": eps, "delta": delta, "scale": scale},
        samples_total=n0,
        chosen_policy=chosen,
        suboptimality=best - policy_value_exact(env, Pi.table[chosen]),
        variance_by_policy=variance,
        seed=rng.seed,
        stream_id=rng.stream_id,
    )


# ---------------------------------------------------------------------------
# Instance families
# ---------------------------------------------------------------------------


@dataclass
class Instance:
    env: Environment
    Pi: PolicyClass
    menv: ModelEnvironment | None = None
    Mclass: ModelClass | None = None


def _family_multiclass(p, rng):
    spec = SparseEnvSpec(p.get("X_size", 8), p["A_size"], 1, "L1", "one-hot", p["Pi_size"])
    return Instance(*make_sparse_env(spec, rng))


def _family_sparse(p, rng):
    spec = SparseEnvSpec(p.get("X_size", 8), p["A_size"], p["s"], p.get("mode", "L1"),
                         p.get("reward_style", "random-s-sparse-binary"), p["Pi_size"])
    return Instance(*make_sparse_env(spec, rng))


def _family_list(p, rng):
    spec = SparseEnvSpec(p.get("X_size", 8), p["K"], p.get("s", 1), "L1",
                         p.get("reward_style", "one-hot"), p["Pi_size"], m=p["m"])
    return Instance(*make_sparse_env(spec, rng))


def _family_planted(p, rng):
    env, Pi = make_planted_env(p["A_size"], p["s"], p.get("gap", 2 * p["eps"]), p.get("X_size", 4),
                               p["Pi_size"], rng, base=p.get("base", 0.25), overlap=p.get("overlap", 0.0))
    return Instance(env, Pi)


def _family_lower_bound(p, rng):
    # rare-context mass 2 eps, so every policy missing a* is 2 eps suboptimal
    env, Pi, _ = make_lower_bound_env(p["A_size"], 2 * p["eps"], rng)
    return Instance(env, Pi)


def _family_exo_tiny(p, rng):
    menv, Pi, Mclass = make_tiny_exo_instance(rng, X=p.get("X_size", 2), A=p.get("A_size", 3),
                                              Pi_size=p.get("Pi_size", 6), s=p.get("s", 1.0))
    return Instance(menv.to_environment(Mclass.s), Pi, menv, Mclass)


FAMILIES = {
    "multiclass": _family_multiclass,
    "sparse": _family_sparse,
    "list": _family_list,
    "planted": _family_planted,
    "lower-bound": _family_lower_bound,
    "exo-tiny": _family_exo_tiny,
}


def make_instance(family: str, params: dict, rng) -> Instance:
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
    return FAMILIES[family](params, rng)


# ---------------------------------------------------------------------------
# Running one algorithm
# ---------------------------------------------------------------------------


def run_exo_report(inst: Instance, eps: float, delta: float, rng: RngStream, scale: float = 1.0,
                   T: int = EXO_T, gamma: float | None = None) -> RunReport:
    A = inst.Mclass.n_actions
    gamma = 32 * A if gamma is None else gamma
    T = max(1, math.ceil(scale * T))
    pi_hat, trace = run_exo(inst.menv, inst.Pi, gamma, T, inst.Mclass, rng.spawn("exo"))
    best, _ = best_policy_value(inst.env, inst.Pi)
    value = float(inst.env.context_probs @ (pi_hat * inst.env.mean_rewards).sum(axis=1))
    return RunReport(
        algorithm="exo",
        config={"T": T, "gamma": gamma, "eps": eps, "delta": delta, "scale": scale},
        samples_total=T,
        chosen_policy=-1,
        suboptimality=best - value,
        variance_by_policy=[],
        seed=rng.seed,
        stream_id=rng.stream_id,
        extra={"policy": pi_hat.tolist(), "unconverged_solves": trace.unconverged},
    )


def run_algorithm(algorithm: str, inst: Instance, eps: float, delta: float, rng: RngStream,
                  scale: float = 1.0, multipliers: dict | None = None) -> RunReport:
    mult = {"T_multiplier": T_MULTIPLIER, "n_multiplier": N_MULTIPLIER, "etc_c": ETC_C, "exo_T": EXO_T}
    mult.update(multipliers or {})
    env, Pi = inst.env, inst.Pi
    if algorithm == "lve":
        cfg = LveConfig.from_theory(env.n_actions, Pi.size, env.sparsity.s, eps, delta,
                                    T_multiplier=mult["T_multiplier"], n_multiplier=mult["n_multiplier"],
                                    scale=scale)
        return run_lve(env, Pi, eps, delta, rng, overrides=cfg, scale=scale)
    if algorithm == "ccsb":
        if not env.is_semibandit:
            raise ConfigError("ccsb needs a semi-bandit family such as 'list'")
        cfg = CcsbConfig.from_theory(env.n_actions, env.subset_size, env.sparsity.s, Pi.size, eps, delta,
                                     T_multiplier=mult["T_multiplier"], n_multiplier=mult["n_multiplier"],
                                     scale=scale)
        return run_ccsb(env, Pi, eps, delta, rng, overrides=cfg, scale=scale)
    if algorithm == "baseline-etc":
        return run_baseline_etc(env, Pi, eps, delta, rng, c=mult["etc_c"], scale=scale)
    if algorithm == "exo":
        if inst.menv is None:
            raise ConfigError("exo needs a model-backed family such as 'exo-tiny'")
        return run_exo_report(inst, eps, delta, rng, scale=scale, T=int(mult["exo_T"]))
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def recompute_suboptimality(inst: Instance, report: RunReport) -> float:
    """Independent recomputation from the exact value oracle."""
    best = max(policy_value_exact(inst.env, row) for row in inst.Pi.table)
    if report.algorithm == "exo":
        pi_hat = np.asarray(report.extra["policy"])
        value = sum(inst.env.context_probs[x] * pi_hat[x] @ inst.env.mean_rewards[x]
                    for x in range(inst.env.n_contexts))
        return best - float(value)
    return best - policy_value_exact(inst.env, inst.Pi.table[report.chosen_policy])


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


AXES = ("s", "A_size", "K", "m", "Pi_size", "eps")
CSV_COLUMNS = ("algorithm", "s", "A_size", "K", "m", "Pi_size", "eps", "delta", "seed",
               "samples_used", "suboptimality", "success", "wall_time_ms")


@dataclass
class SweepRow:
    algorithm: str
    s: float | None
    A_size: int | None
    K: int | None
    m: int | None
    Pi_size: int | None
    eps: float
    delta: float
    seed: int
    samples_used: int
    suboptimality: float
    success: bool
    wall_time_ms: float = 0.0

    def sort_key(self):
        return tuple((v is None, v if v is not None else 0) for v in
                     (self.algorithm, self.s, self.A_size, self.K, self.m, self.Pi_size,
                      self.eps, self.delta, self.seed))


@dataclass
class ExperimentConfig:
    algorithm: str
    family: str
    grid: dict
    delta: float = 0.1
    seeds: list = field(default_factory=lambda: list(range(10)))
    master_seed: int = 0
    multipliers: dict = field(default_factory=dict)
    family_params: dict = field(default_factory=dict)
    scale: float = 1.0
    out: str | None = None
    format: str = "csv"
    search: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if not self.grid or any(not isinstance(v, list) or not v for v in self.grid.values()):
            raise ConfigError("every grid axis must be a non-empty list")
        unknown = set(self.grid) - set(AXES) - {"X_size"}
        if unknown:
            raise ConfigError(f"unknown grid axes {sorted(unknown)}")
        if "eps" not in self.grid:
            raise ConfigError("the grid must include eps")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct values")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if isinstance(d.get("seeds"), dict):
            spec = d["seeds"]
            d["seeds"] = list(range(spec.get("start", 0), spec.get("start", 0) + spec["count"]))
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def points(self) -> list[dict]:
        keys = sorted(self.grid)
        return [dict(self.family_params, **dict(zip(keys, combo)))
                for combo in itertools.product(*(self.grid[k] for k in keys))]


def point_stream_id(algorithm: str, family: str, params: dict, seed: int) -> int:
    """Stream id derived from the point's parameters and seed, independent of scheduling."""
    blob = json.dumps({"algorithm": algorithm, "family": family, "params": params, "seed": seed},
                      sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def instance_stream(family: str, params: dict, master_seed: int, seed: int) -> RngStream:
    """Instances depend on the family and point only, so algorithms compare on equal draws."""
    return RngStream(master_seed, point_stream_id("instance", family, params, seed))


@dataclass(frozen=True)
class Task:
    algorithm: str
    family: str
    params: tuple
    delta: float
    seed: int
    master_seed: int
    scale: float
    multipliers: tuple
    timing: bool = False


def _row_axes(params: dict, inst: Instance) -> dict:
    out = {k: params.get(k) for k in AXES}
    out["Pi_size"] = inst.Pi.size
    if inst.env.is_semibandit:
        out["K"], out["m"] = inst.env.n_actions, inst.env.subset_size
        out["A_size"] = None
    else:
        out["A_size"] = inst.env.n_actions
    if out["s"] is None:
        out["s"] = inst.env.sparsity.s
    return out


def execute(task: Task) -> SweepRow:
    params = dict(task.params)
    inst = make_instance(task.family, params, instance_stream(task.family, params, task.master_seed, task.seed))
    rng = RngStream(task.master_seed, point_stream_id(task.algorithm, task.family, params, task.seed))
    start = time.perf_counter()
    with audit_draws() as drawn:
        rep = run_algorithm(task.algorithm, inst, params["eps"], task.delta, rng, task.scale,
                            dict(task.multipliers))
    elapsed = (time.perf_counter() - start) * 1000 if task.timing else 0.0
    if drawn[0] != rep.samples_total:
        raise RuntimeError(f"budget audit failed: {drawn[0]} draws vs {rep.samples_total} reported")
    sub = recompute_suboptimality(inst, rep)
    if abs(sub - rep.suboptimality) > SUBOPT_TOL:
        raise RuntimeError(f"suboptimality mismatch: {sub} vs {rep.suboptimality}")
    if sub < -SUBOPT_TOL:
        raise RuntimeError(f"negative suboptimality {sub}")
    return SweepRow(task.algorithm, seed=task.seed, delta=task.delta, samples_used=rep.samples_total,
                    suboptimality=sub, success=bool(sub <= params["eps"]), wall_time_ms=elapsed,
                    **_row_axes(params, inst))


def _map(tasks, workers: int):
    if workers <= 1:
        return [execute(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _tasks(cfg: ExperimentConfig, scale: float, seeds, params_list, timing=False):
    mult = tuple(sorted(cfg.multipliers.items()))
    return [Task(cfg.algorithm, cfg.family, tuple(sorted(p.items())), cfg.delta, seed, cfg.master_seed,
                 scale, mult, timing)
            for p in params_list for seed in seeds]


def sweep(cfg: ExperimentConfig, workers: int = 1, timing: bool = False) -> list[SweepRow]:
    rows = _map(_tasks(cfg, cfg.scale, cfg.seeds, cfg.points(), timing), workers)
    return sorted(rows, key=SweepRow.sort_key)


# ---------------------------------------------------------------------------
# Sample-complexity search
# ---------------------------------------------------------------------------


@dataclass
class SearchRow:
    algorithm: str
    s: float | None
    A_size: int | None
    K: int | None
    m: int | None
    Pi_size: int | None
    eps: float
    delta: float
    samples_used: int
    success_rate: float
    scale: float
    evaluations: int
    capped: bool


def sample_complexity_search(cfg: ExperimentConfig, params: dict, success_target: float = 0.9,
                             seeds_per_point: int | None = None, workers: int = 1,
                             start_scale: float = 1 / 64, resolution: float = 1.25,
                             budget_cap: int = BUDGET_CAP) -> SearchRow:
    """Smallest tested budget whose success rate reaches ``success_target``.

    The budget multiplier doubles from ``start_scale`` until the target is
    met (or halves until it is missed, if the start already meets it), then
    the bracket is bisected geometrically until its ratio is at
    most ``resolution``.
    """
    if not 0.5 < success_target < 1:
        raise ConfigError("success_target must lie in (0.5, 1)")
    seeds = cfg.seeds[:seeds_per_point] if seeds_per_point else cfg.seeds
    memo: dict[float, tuple[float, int, list]] = {}

    def probe(scale):
        if scale not in memo:
            rows = _map(_tasks(cfg, scale, seeds, [params]), workers)
            memo[scale] = (float(np.mean([r.success for r in rows])), rows[0].samples_used, rows)
        return memo[scale]

    lo, hi = None, start_scale
    while True:
        rate, budget, rows = probe(hi)
        if rate >= success_target:
            break
        if budget > budget_cap:
            return _search_row(cfg, params, rows, budget, rate, hi, len(memo), capped=True)
        lo, hi = hi, hi * 2
    # the start already succeeds: halve until a failure brackets the threshold
    while lo is None:
        rate, budget, _ = probe(hi / 2)
        if budget == probe(hi)[1]:
            break  # the budget floor is reached
        if rate >= success_target:
            hi /= 2
        else:
            lo = hi / 2
    while lo is not None and hi / lo > resolution:
        mid = math.sqrt(lo * hi)
        if probe(mid)[0] >= success_target:
            hi = mid
        else:
            lo = mid
    rate, budget, rows = probe(hi)
    return _search_row(cfg, params, rows, budget, rate, hi, len(memo), capped=False)


def _search_row(cfg, params, rows, budget, rate, scale, evaluations, capped) -> SearchRow:
    r = rows[0]
    return SearchRow(cfg.algorithm, r.s, r.A_size, r.K, r.m, r.Pi_size, params["eps"], cfg.delta,
                     budget, rate, scale, evaluations, capped)


def search_all(cfg: ExperimentConfig, workers: int = 1) -> list[SearchRow]:
    opts = dict(cfg.search)
    return [sample_complexity_search(cfg, p, workers=workers, **opts) for p in cfg.points()]


# ---------------------------------------------------------------------------
# Scaling fits
# ---------------------------------------------------------------------------


@dataclass
class ScalingFit:
    axis: str
    slope: float
    intercept: float
    r_squared: float
    table: list

    def footer(self) -> str:
        return f"# scaling[{self.axis}]: slope={self.slope:.4f} r2={self.r_squared:.4f}"


def scaling_report(rows, axis: str, value: str = "samples_used") -> ScalingFit:
    """Least-squares fit of log(budget) on log(axis)."""
    pts = sorted((float(getattr(r, axis)), float(getattr(r, value))) for r in rows)
    xs = sorted({x for x, _ in pts})
    if len(xs) < 3:
        raise ValueError(f"need at least 3 distinct {axis} values, got {len(xs)}")
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ValueError("fits need positive axis values and budgets")
    lx = np.log([x for x, _ in pts])
    ly = np.log([y for _, y in pts])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(axis, float(slope), float(intercept), r2, pts)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(rows, fmt: str, columns=None) -> str:
    if fmt == "json":
        return json.dumps([asdict(r) for r in rows], indent=1, sort_keys=True) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    if columns is None:
        columns = CSV_COLUMNS if not rows or isinstance(rows[0], SweepRow) else [f.name for f in fields(rows[0])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in columns])
    return buf.getvalue()


def emit(rows, fmt: str, path, footer: list[str] | None = None):
    text = render(rows, fmt)
    if footer and fmt == "csv":
        text += "".join(line + "\n" for line in footer)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"could not write report to {path}: {exc}") from exc


def read_rows_json(text: str) -> list[SweepRow]:
    return [SweepRow(**d) for d in json.loads(text)]
