"""Experiment orchestration: configs, multi-seed runs, rate studies, lemma suites.

Each seed gets its own Philox stream keyed by ``(experiment_seed, seed)``, so
results do not depend on worker count or scheduling order. Workers return
plain rows; the parent process is the only writer of output files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .errors import ConfigError
from .exact import exact_v, solve_optimal
from .mdp_core import (Mdp, Policy, build_counterexample, build_random_ergodic,
                       induced_kernel, load_mdp, mix_epsilon_greedy)
from .nac import (PRESETS, TRACE_COLUMNS, Schedule, TraceRow, linear_checkpoints,
                  log_checkpoints, preset, run)

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.95


@dataclass
class VerifySettings:
    n_policies: int = 100
    n_pairs: int = 100
    n_drift_draws: int = 100
    gamma_instances: int = 20
    mixing_policies: int = 5
    tau_max: int = 200
    run_T: int = 10_000


@dataclass
class ExperimentConfig:
    mdp_source: object = "counterexample"
    gamma: float = DEFAULT_GAMMA
    schedule: object = "corollary_1_1"
    T: int = 100_000
    seeds: list = field(default_factory=lambda: list(range(10)))
    experiment_seed: int = 0
    checkpoints: dict = field(default_factory=lambda: {"count": 64, "spacing": "log"})
    initial_state: int = 0
    initial_distribution: list | None = None
    watch: list = field(default_factory=lambda: [0, 1])
    output_dir: str = "runs"
    workers: int = 1
    verify: VerifySettings = field(default_factory=VerifySettings)
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        doc = dict(doc)
        if "verify" in doc:
            try:
                doc["verify"] = VerifySettings(**doc["verify"])
            except TypeError as exc:
                raise ConfigError(f"verify: {exc}") from None
        cfg = cls(**doc, base_dir=Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    def validate(self) -> None:
        if not isinstance(self.T, int) or self.T <= 0:
            raise ConfigError(f"T: must be a positive integer, got {self.T!r}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds: must be a non-empty list of integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicates are not allowed")
        spacing = self.checkpoints.get("spacing", "log")
        if spacing not in ("log", "linear"):
            raise ConfigError(f"checkpoints.spacing: expected 'log' or 'linear', got {spacing!r}")
        if int(self.checkpoints.get("count", 64)) < 1:
            raise ConfigError("checkpoints.count: must be positive")
        if (len(self.watch) != 2 or not all(isinstance(x, int) and x >= 0 for x in self.watch)):
            raise ConfigError(f"watch: expected [state, action] indices, got {self.watch!r}")
        if self.workers < 1:
            raise ConfigError("workers: must be positive")
        self.build_schedule()

    def build_schedule(self) -> Schedule:
        spec = self.schedule
        try:
            if isinstance(spec, str):
                return preset(spec)
            if isinstance(spec, dict):
                spec = dict(spec)
                name = spec.pop("preset", None)
                if name is not None:
                    bases = {k: spec.pop(k) for k in ("alpha", "beta", "eps") if k in spec}
                    if spec:
                        raise ConfigError(f"preset {name!r} fixes "
                                          f"{', '.join(sorted(spec))}")
                    return preset(name, **bases)
                return Schedule(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"schedule: {exc}") from None
        raise ConfigError(f"schedule: expected preset name or object, got {spec!r}")

    def build_mdp(self) -> Mdp:
        src = self.mdp_source
        if src == "counterexample":
            return build_counterexample(self.gamma)
        if isinstance(src, dict) and "random" in src:
            spec = dict(src["random"])
            seed = spec.pop("seed", 0)
            spec.setdefault("gamma", self.gamma)
            spec.setdefault("n_actions", 2)
            spec.setdefault("smoothing", 0.01)
            try:
                return build_random_ergodic(rng=np.random.default_rng(seed), **spec)
            except TypeError as exc:
                raise ConfigError(f"mdp_source.random: {exc}") from None
        if isinstance(src, str):
            path = Path(src)
            if not path.is_absolute():
                path = self.base_dir / path
            try:
                return load_mdp(path)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"mdp_source: cannot read MDP file {path}: {exc}") from None
        raise ConfigError(f"mdp_source: unsupported value {src!r}")

    def checkpoint_list(self, T: int | None = None) -> list[int]:
        T = self.T if T is None else T
        count = int(self.checkpoints.get("count", 64))
        if self.checkpoints.get("spacing", "log") == "linear":
            return linear_checkpoints(T, count)
        return log_checkpoints(T, count)

    def initial(self, mdp: Mdp):
        if self.initial_distribution is None:
            return None
        p0 = np.asarray(self.initial_distribution, dtype=float)
        if p0.shape != (mdp.n_states,):
            raise ConfigError("initial_distribution: length must equal n_states")
        return p0

    def seed_rng(self, seed: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(
            np.random.SeedSequence([self.experiment_seed, seed])))


def _seed_job(cfg: ExperimentConfig, mdp: Mdp, sched: Schedule, seed: int, T: int,
              metrics: bool) -> dict:
    initial = cfg.initial(mdp)
    res = run(mdp, sched, T, seed=seed, rng=cfg.seed_rng(seed),
              initial_state=cfg.initial_state,
              checkpoints=cfg.checkpoint_list(T) if metrics else [],
              watch=tuple(cfg.watch), initial=initial, metrics=metrics)
    _, v_star = solve_optimal(mdp, initial)
    s_w, a_w = cfg.watch
    return {
        "seed": seed,
        "rows": res.trace.rows,
        "output_index": res.output_index,
        "output_gap": v_star.aggregate - exact_v(mdp, res.output_policy, initial).aggregate,
        "final_sampling_watch": (float(res.trace.snapshots[T].sampling_policy[s_w, a_w])
                                 if s_w < mdp.n_states and a_w < mdp.n_actions else None),
    }


def _map_seeds(cfg: ExperimentConfig, jobs):
    """Run ``(callable, args)`` jobs serially or on a bounded process pool."""
    workers = min(cfg.workers, len(jobs), os.cpu_count() or 1)
    if workers <= 1:
        return [fn(*args) for fn, args in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *args) for fn, args in jobs]
        return [f.result() for f in futures]


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def trace_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ConfigError(f"{path}: unexpected trace header {header}")
        return [TraceRow(int(r[0]), *(float(x) for x in r[1:7]), int(r[7])) for r in reader]


def summarize(traces: dict[int, list[TraceRow]]) -> dict:
    """Aggregate statistics computed from trace rows alone."""
    finals = {seed: rows[-1] for seed, rows in traces.items() if rows}
    gaps = [r.value_gap for r in finals.values()]
    watch = [r.pi_watch for r in finals.values()]
    if not finals:
        return {}
    return {
        "median_final_value_gap": float(np.median(gaps)),
        "mean_final_value_gap": float(np.mean(gaps)),
        "seeds_watch_above_half": int(sum(w > 0.5 for w in watch)),
        "seeds_watch_below_half": int(sum(w < 0.5 for w in watch)),
    }


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Independent runs for every seed; writes ``trace_seed<k>.csv`` and ``summary.json``."""
    mdp = cfg.build_mdp()
    sched = cfg.build_schedule()
    jobs = [(_seed_job, (cfg, mdp, sched, seed, cfg.T, True)) for seed in cfg.seeds]
    results = _map_seeds(cfg, jobs)
    per_seed = []
    for r in results:
        last = r["rows"][-1]
        per_seed.append({
            "seed": r["seed"],
            "final_value_gap": last.value_gap,
            "final_pi_watch": None if math.isnan(last.pi_watch) else last.pi_watch,
            "final_sampling_watch": r["final_sampling_watch"],
            "output_index": r["output_index"],
            "output_value_gap": r["output_gap"],
        })
    summary = {
        "config": config_echo(cfg),
        "per_seed": per_seed,
        "aggregate": summarize({r["seed"]: r["rows"] for r in results}),
    }
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            (out / f"trace_seed{r['seed']}.csv").write_text(trace_csv(r["rows"]))
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def config_echo(cfg: ExperimentConfig) -> dict:
    doc = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("base_dir", "verify")}
    sched = cfg.build_schedule()
    doc["schedule_resolved"] = {f.name: getattr(sched, f.name) for f in fields(sched)}
    doc["verify"] = vars(cfg.verify)
    return doc


def loglog_slope(ts, values, floor: float = 1e-12) -> float:
    v = np.asarray(values, dtype=float)
    if len(v) < 2 or np.all(v <= floor):
        return 0.0
    return float(np.polyfit(np.log(np.asarray(ts, float)), np.log(np.maximum(v, floor)), 1)[0])


def _rate_job(cfg, mdp, sched, seed, T):
    return _seed_job(cfg, mdp, sched, seed, T, False)["output_gap"]


def rate_study(cfg: ExperimentConfig, grid, write: bool = True) -> dict:
    """Median and IQR of ``V* - V^{pi_hat_{T_hat}}`` across seeds for each horizon."""
    grid = [int(T) for T in grid]
    if grid != sorted(grid) or not grid or grid[0] <= 0:
        raise ConfigError("grid: horizons must be positive and ascending")
    mdp = cfg.build_mdp()
    sched = cfg.build_schedule()
    rows = []
    for T in grid:
        gaps = _map_seeds(cfg, [(_rate_job, (cfg, mdp, sched, seed, T)) for seed in cfg.seeds])
        q1, med, q3 = np.percentile(gaps, [25, 50, 75])
        rows.append({"T": T, "median_gap": float(med), "q1": float(q1), "q3": float(q3),
                     "iqr": float(q3 - q1), "gaps": [float(g) for g in gaps]})
    report = {"rows": rows, "slope": loglog_slope(grid, [r["median_gap"] for r in rows]),
              "q_max": mdp.q_max}
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["T", "median_gap", "q1", "q3", "iqr", "slope"])
        for r in rows:
            w.writerow([r["T"], repr(r["median_gap"]), repr(r["q1"]), repr(r["q3"]),
                        repr(r["iqr"]), repr(report["slope"])])
        (out / "rate.csv").write_text(buf.getvalue())
        (out / "rate.json").write_text(json.dumps(report, indent=2))
    return report


def _verify_trace(cfg, mdp, sched, seed):
    T = cfg.verify.run_T
    return run(mdp, sched, T, seed=seed, rng=cfg.seed_rng(seed),
               initial_state=cfg.initial_state, checkpoints=log_checkpoints(T),
               metrics=False).trace


def verify(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Run every lemma check against the configured MDP and schedule."""
    mdp = cfg.build_mdp()
    sched = cfg.build_schedule()
    vs = cfg.verify
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.experiment_seed, 0x5eed])))
    nS, nA = mdp.n_states, mdp.n_actions
    traces = _map_seeds(cfg, [(_verify_trace, (cfg, mdp, sched, s)) for s in cfg.seeds])

    def rand_pi():
        return rng.dirichlet(np.ones(nA), size=nS)

    drift = dg.LemmaCheckResult(dg.ID_NEGATIVE_DRIFT)
    for _ in range(vs.n_drift_draws):
        drift = drift.merge(dg.check_negative_drift(mdp, rand_pi(), rng.uniform(0.05, 1.0), 1, rng))
    gamma_pis = [mix_epsilon_greedy(rand_pi(), rng.uniform(0.05, 1.0))
                 for _ in range(vs.gamma_instances)]
    kernels = [induced_kernel(mdp, Policy.uniform(nS, nA))]
    kernels += [induced_kernel(mdp, mix_epsilon_greedy(rand_pi(), 0.1))
                for _ in range(vs.mixing_policies - 1)]

    results = [dg.check_q_function_drift(traces[0]), dg.check_theta_drift(traces[0]),
               drift, dg.check_bounds(mdp, vs.n_policies, rng, traces),
               dg.check_q_lipschitz(mdp, vs.n_pairs, rng), dg.check_policy_drift(traces[0]),
               dg.check_critic_drift(traces[0]),
               dg.check_performance_difference(mdp, vs.n_pairs, rng, cfg.initial(mdp)),
               dg.check_gamma_mean([(mdp, p) for p in gamma_pis], rng),
               dg.check_mixing(kernels, vs.tau_max)]
    for trace in traces[1:]:
        for i, fn in ((0, dg.check_q_function_drift), (1, dg.check_theta_drift),
                      (5, dg.check_policy_drift), (6, dg.check_critic_drift)):
            results[i] = results[i].merge(fn(trace))
    report = {
        "results": [r.to_dict() for r in results],
        "violations": int(sum(r.violations for r in results)),
        "constants": dg.constants_report(mdp, sched, Policy.uniform(nS, nA)).to_dict(),
    }
    report["passed"] = report["violations"] == 0
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps(report, indent=2, ensure_ascii=False))
    return report


def solve_report(mdp: Mdp, initial=None) -> dict:
    from .exact import exact_q

    pi, v = solve_optimal(mdp, initial)
    return {"v_star": v.values.tolist(), "v_star_aggregate": v.aggregate,
            "pi_star": pi.probs.argmax(axis=1).tolist(),
            "q_star": exact_q(mdp, pi).tolist()}


__all__ = ["ExperimentConfig", "VerifySettings", "run_experiment", "rate_study", "verify",
           "summarize", "read_trace_csv", "trace_csv", "solve_report", "loglog_slope",
           "PRESETS"]
