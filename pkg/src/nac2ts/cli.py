"""``nac2ts`` command line: run, rate, solve, verify.

Exit codes: 0 success, 1 bad configuration or unreadable input,
2 invariant failure or lemma violations.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, InvariantError, SolverError
from .harness import ExperimentConfig, rate_study, run_experiment, solve_report, verify
from .mdp_core import build_counterexample, load_mdp

log = logging.getLogger("nac2ts")


def parse_grid(text: str) -> list[int]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"grid: cannot parse {text!r}") from None
    if not vals or any(v <= 0 or v != int(v) for v in vals):
        raise ConfigError(f"grid: expected positive integers, got {text!r}")
    return [int(v) for v in vals]


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if getattr(args, "mdp", None):
        overrides["mdp_source"] = str(Path(args.mdp).resolve())
    if getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "preset", None):
        overrides["schedule"] = args.preset
    if getattr(args, "T", None) is not None:
        overrides["T"] = args.T
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, ensure_ascii=False))


def cmd_run(args) -> int:
    cfg = _config(args)
    summary = run_experiment(cfg)
    _print(summary["aggregate"])
    log.info("wrote traces to %s", cfg.output_dir)
    return 0


def cmd_rate(args) -> int:
    cfg = _config(args)
    grid = parse_grid(args.grid)
    report = rate_study(cfg, grid)
    for row in report["rows"]:
        print(f"T={row['T']:>9d}  median={row['median_gap']:.6g}  iqr={row['iqr']:.6g}")
    print(f"log-log slope: {report['slope']:.4f}")
    return 0


def cmd_solve(args) -> int:
    if args.mdp:
        try:
            mdp = load_mdp(args.mdp)
        except (OSError, ValueError) as exc:
            if isinstance(exc, InvariantError):
                raise
            raise ConfigError(f"cannot read MDP file {args.mdp}: {exc}") from None
    else:
        mdp = build_counterexample(args.gamma)
    _print(solve_report(mdp))
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    report = verify(cfg)
    for r in report["results"]:
        status = "ok" if r["violations"] == 0 else "FAIL"
        print(f"{r['lemma_id']:>8}  {status:4}  instances={r['instances']}"
              f"  violations={r['violations']}  worst_margin={r['worst_margin']}")
    print(f"total violations: {report['violations']}")
    return 0 if report["passed"] else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nac2ts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--mdp", help="JSON MDP file (overrides mdp_source)")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--preset", help="schedule preset name")
        sp.add_argument("--T", type=int, help="horizon")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--workers", type=int)

    sp = sub.add_parser("run", help="multi-seed actor-critic runs")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("rate", help="gap versus horizon study")
    common(sp)
    sp.add_argument("--grid", required=True, help="comma-separated horizons, e.g. 1e3,1e4")
    sp.set_defaults(func=cmd_rate)
    sp = sub.add_parser("solve", help="exact optimal policy and values")
    sp.add_argument("--mdp")
    sp.add_argument("--gamma", type=float, default=0.95)
    sp.set_defaults(func=cmd_solve)
    sp = sub.add_parser("verify", help="lemma verification suite")
    common(sp)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvariantError, SolverError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
