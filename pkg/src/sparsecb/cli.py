"""Command-line entry point: ``sparsecb run|sweep|search|check-all-lemmas|dec``.

Exit status is 0 when every row passes, 1 when any row fails, and 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .core import RngStream
from .exo import mixture, pdec_solve, random_sparse_model_class
from .harness import ConfigError, ExperimentConfig
from .oracles import check_all_lemmas

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        d = json.loads(text) if text.strip() else {}
    else:
        d = {}
    if getattr(args, "algo", None):
        d["algorithm"] = args.algo
    if args.seed is not None:
        d["master_seed"] = args.seed
    if getattr(args, "format", None):
        d["format"] = args.format
    if getattr(args, "out", None):
        d["out"] = args.out
    if "algorithm" not in d or "family" not in d or "grid" not in d:
        raise ConfigError("a config needs algorithm, family and grid (use --config, --algo)")
    return ExperimentConfig.from_dict(d)


def _write(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    params = cfg.points()[0]
    seed = cfg.seeds[0]
    inst = harness.make_instance(cfg.family, params, harness.instance_stream(cfg.family, params, cfg.master_seed, seed))
    rng = RngStream(cfg.master_seed, harness.point_stream_id(cfg.algorithm, cfg.family, params, seed))
    rep = harness.run_algorithm(cfg.algorithm, inst, params["eps"], cfg.delta, rng, cfg.scale, cfg.multipliers)
    _write(rep.to_json() + "\n", cfg.out)
    return EXIT_OK if rep.success(params["eps"]) else EXIT_FAIL


def _footer(rows, cfg: ExperimentConfig) -> list[str]:
    lines = []
    for axis in ("s", "A_size", "K", "Pi_size", "eps"):
        if len(cfg.grid.get(axis, [])) >= 3:
            lines.append(harness.scaling_report(rows, axis).footer())
    return lines


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = harness.sweep(cfg, workers=args.workers, timing=args.timing)
    text = harness.render(rows, cfg.format)
    _write(text, cfg.out)
    return EXIT_OK if all(r.success for r in rows) else EXIT_FAIL


def cmd_search(args) -> int:
    cfg = _load_config(args)
    rows = harness.search_all(cfg, workers=args.workers)
    text = harness.render(rows, cfg.format)
    if cfg.format == "csv":
        text += "".join(line + "\n" for line in _footer(rows, cfg))
    _write(text, cfg.out)
    return EXIT_FAIL if any(r.capped for r in rows) else EXIT_OK


def cmd_lemmas(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.quick:
        checks = check_all_lemmas(RngStream(seed), n_harmonic=10**4, n_hedge=200, n_hellinger=2000,
                                  coverage_trials=2000)
    else:
        checks = check_all_lemmas(RngStream(seed))
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


def cmd_dec(args) -> int:
    seed = 0 if args.seed is None else args.seed
    root = RngStream(seed)
    failed = 0
    print("class,gamma,bound,pdec,certificate,status")
    for i in range(args.classes):
        gen = root.spawn(f"dec/{i}").generator()
        A = int(gen.integers(2, args.max_actions + 1))
        O = int(gen.integers(2, args.max_observations + 1))
        s = float(gen.uniform(1, A))
        mc = random_sparse_model_class(A, O, int(gen.integers(2, args.max_models + 1)), s, gen)
        Mbar = mixture(mc.models, gen.dirichlet(np.ones(len(mc))))
        for k in range(5):
            gamma = 32 * A * 2**k
            res = pdec_solve(mc, Mbar, gamma)
            bound = 64 * s / gamma
            ok = res.value <= bound and res.certificate_value <= bound
            failed += not ok
            print(f"{i},{gamma},{bound!r},{res.value!r},{res.certificate_value!r},{'PASS' if ok else 'FAIL'}")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsecb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, experiment=True):
        p.add_argument("--seed", type=int, default=None, help="master seed (u64)")
        if experiment:
            p.add_argument("--config", help="JSON experiment config")
            p.add_argument("--out", help="output path (stdout if omitted)")
            p.add_argument("--format", choices=("csv", "json"))
            p.add_argument("--workers", type=int, default=1)
            p.add_argument("--algo", choices=harness.ALGORITHMS)

    p = sub.add_parser("run", help="one experiment at the first grid point and seed")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="every grid point and seed")
    common(p)
    p.add_argument("--timing", action="store_true", help="record wall time (breaks byte-identity)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("search", help="empirical sample complexity per grid point")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("check-all-lemmas", help="fuzz and coverage checks of the supporting lemmas")
    common(p, experiment=False)
    p.add_argument("--quick", action="store_true", help="small trial counts")
    p.set_defaults(func=cmd_lemmas)

    p = sub.add_parser("dec", help="DEC estimates on random sparse model classes")
    common(p, experiment=False)
    p.add_argument("--classes", type=int, default=50)
    p.add_argument("--max-actions", type=int, default=4)
    p.add_argument("--max-observations", type=int, default=3)
    p.add_argument("--max-models", type=int, default=20)
    p.set_defaults(func=cmd_dec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (json.JSONDecodeError, KeyError) as exc:
        print(f"config error: {exc!r}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
