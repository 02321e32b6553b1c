"""Command-line runner: property checks, GridWorld training with landscape
exports, point-mass planning, parameter sweeps and shaping comparisons.

Exit codes: 0 success, 1 a check suite failed, 2 configuration or IO error.
Settings resolve as command-line flag > JSON config file > built-in default.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checks
from .agent import LearnerConfig, ablation_summary, expert_demos, three_phase_train
from .envs import PointMassEnv, TabularEnv, rollout
from .errors import ConfigError, SlopeLabError
from .io import atomic_write, rows_to_csv, write_csv, write_grid_csv, write_json, write_pgm
from .mdp import GridWorldSpec, build_gridworld, default_gridworld, load_gridworld, value_iteration
from .planner import GridPotential, MppiAgent, PlannerConfig, PointMassModel
from .shaping import reshaped_trace, shaped_landscape

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT = "slope_lab_out"

DEFAULTS = {
    "task": {"map": None, "slip": 0.0, "gamma": 0.95, "max_steps": 100, "n_demos": 5, "demo_epsilon": 0.2,
             "demo_seed": 0},
    "learner": {},
    "planner": {},
    "pointmass": {"dim": 2, "start": [0.5, 0.5], "goal_center": [9.5, 9.5], "goal_radius": 0.5,
                  "max_steps": 50, "bounds": [[0.0, 0.0], [10.0, 10.0]], "potential_eta": 1.0, "shaped": True},
    "landscape": {"eta": None, "step": None, "iterations": [0, 10, 20, 30, 40, 100], "threshold": 0.01},
    "sweep": {"eta": [0.02, 0.1, 0.5, 1.0], "tau": [0.5, 0.55, 0.75, 0.9]},
    "compare": {"variants": ["none", "bootstrapped", "similarity", "entropy", "smoothed"]},
    "check": {"n_mdps": 50, "contraction_extra": []},
    "seeds": [0],
    "out": None,
    "jobs": 1,
}


@dataclass
class ExperimentConfig:
    task: dict
    learner: LearnerConfig
    planner: PlannerConfig
    pointmass: dict
    landscape: dict
    sweep: dict
    compare: dict
    check: dict
    seeds: list
    out: Path
    jobs: int

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["learner"] = self.learner.to_dict()
        d["planner"] = {f.name: getattr(self.planner, f.name) for f in fields(self.planner)}
        d["out"] = str(self.out)
        return d


def _merge(base, override, path="config"):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {path}.{key}")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}.{key}")
        else:
            out[key] = val
    return out


def _build_dataclass(cls, values, name):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {name} field(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {name} settings: {exc}") from exc


def load_config(path=None, flags=None) -> ExperimentConfig:
    """Resolve defaults, the JSON file at ``path`` and flag overrides."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    merged = _merge(DEFAULTS, raw)
    for key, val in (flags or {}).items():
        if val is not None:
            merged[key] = val
    seeds = merged["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a nonempty list of non-negative integers")
    if not isinstance(merged["jobs"], int) or merged["jobs"] < 1:
        raise ConfigError("jobs must be a positive integer")
    task = merged["task"]
    if task["map"] is not None and not Path(task["map"]).is_file():
        raise ConfigError(f"map file {task['map']} does not exist")
    learner_kw = dict(merged["learner"])
    learner_kw.setdefault("gamma", task["gamma"])
    learner_kw.setdefault("max_steps", task["max_steps"])
    learner = _build_dataclass(LearnerConfig, learner_kw, "learner")
    planner_kw = dict(merged["planner"])
    if "discrete_dims" in planner_kw:
        planner_kw["discrete_dims"] = tuple(planner_kw["discrete_dims"])
    planner = _build_dataclass(PlannerConfig, planner_kw, "planner")
    out = merged["out"] or os.environ.get("SLOPE_LAB_OUT") or DEFAULT_OUT
    land = merged["landscape"]
    if not land["iterations"] or any((not isinstance(k, int)) or k < 0 for k in land["iterations"]):
        raise ConfigError("landscape.iterations must be non-negative integers")
    return ExperimentConfig(task, learner, planner, merged["pointmass"], land, merged["sweep"],
                            merged["compare"], merged["check"], list(seeds), Path(out), merged["jobs"])


def _prepare_out(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


# ---------------------------------------------------------------------------
# gridworld helpers
# ---------------------------------------------------------------------------

def gridworld_spec(cfg: ExperimentConfig) -> GridWorldSpec:
    t = cfg.task
    if t["map"] is None:
        return default_gridworld(t["slip"], t["gamma"])
    return load_gridworld(t["map"], t["slip"], t["gamma"])


def gridworld_setup(cfg: ExperimentConfig):
    """Environment plus the demonstrations shared by every seed."""
    spec = gridworld_spec(cfg)
    env = TabularEnv.from_gridworld(spec, cfg.task["max_steps"])
    demos = []
    if cfg.task["n_demos"] > 0:
        _, Q_star, _ = value_iteration(env.mdp)
        demos = expert_demos(env, Q_star, cfg.task["n_demos"], np.random.default_rng(cfg.task["demo_seed"]),
                             epsilon=cfg.task["demo_epsilon"])
    return spec, env, demos


def _train_job(job):
    cfg_dict, learner, seed = job
    cfg = _from_dict(cfg_dict)
    _, env, demos = gridworld_setup(cfg)
    res = three_phase_train(env, demos, learner, seed)
    return {"seed": seed, "curve": res.curve, "curve_csv": res.curve_csv(), "events_csv": res.events_csv(),
            "episodes_to_success": res.episodes_to(learner.success_threshold),
            "final_success": res.final_success,
            "augmented": len(res.demos.augmented())}


def _from_dict(d):
    return ExperimentConfig(d["task"], LearnerConfig(**d["learner"]),
                            PlannerConfig(**{**d["planner"], "discrete_dims": tuple(d["planner"]["discrete_dims"])}),
                            d["pointmass"], d["landscape"], d["sweep"], d["compare"], d["check"], d["seeds"],
                            Path(d["out"]), d["jobs"])


def run_seeds(cfg: ExperimentConfig, learner: LearnerConfig):
    """Train one learner per seed (in parallel with ``jobs > 1``), in seed order."""
    jobs = [(cfg.to_dict(), learner, s) for s in cfg.seeds]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def median_curve(results):
    """Per-episode median success and mean Q over seeds (common episodes only)."""
    common = sorted(set.intersection(*(set(r["episode"] for r in res["curve"]) for res in results)))
    rows = []
    for ep in common:
        succ = [next(r["success_rate"] for r in res["curve"] if r["episode"] == ep) for res in results]
        mq = [next(r["mean_Q"] for r in res["curve"] if r["episode"] == ep) for res in results]
        rows.append((ep, float(np.median(succ)), float(np.median(mq))))
    return rows


def landscape_frames(mdp, spec: GridWorldSpec, eta, step, iterations):
    """Shaped-reward grids (best action per cell) at the requested iterations of
    the damped reshaped iteration from Q = 0."""
    history, overflow = reshaped_trace(mdp, eta, max(iterations), step=step)
    frames = {}
    for k in iterations:
        if k < len(history):
            frames[k] = shaped_landscape(mdp, history[k], eta).reshape(spec.height, spec.width)
    return frames, overflow


def _finite(x):
    return None if not np.isfinite(x) else float(x)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_check(cfg: ExperimentConfig, suite="all", etas=()):
    out = _prepare_out(cfg.out)
    extra = [tuple(p) for p in cfg.check.get("contraction_extra", [])]
    extra += [(cfg.task["gamma"], float(e)) for e in etas]
    overrides = {"theorem_suite": {"n_mdps": int(cfg.check.get("n_mdps", 50))},
                 "contraction_suite": {"extra": extra}}
    report = checks.run_suites(suite, **overrides)
    write_json(out / f"check_{suite}.json", report)
    for r in report["results"]:
        print(f"{r['suite']:<14} {'PASS' if r['passed'] else 'FAIL'}  ({r['runtime_s']:.2f} s)")
        for row in r.get("pairs", []):
            if row["status"] == "outside contraction regime":
                print(f"  eta={row['eta']:g} gamma={row['gamma']:g}: outside contraction regime, not asserted")
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_gridworld(cfg: ExperimentConfig):
    out = _prepare_out(cfg.out)
    spec, env, _ = gridworld_setup(cfg)
    results = run_seeds(cfg, cfg.learner)
    for res in results:
        atomic_write(out / f"curve_seed{res['seed']}.csv", res["curve_csv"])
        atomic_write(out / f"events_seed{res['seed']}.csv", res["events_csv"])
    write_csv(out / "curve_median.csv", ["episode", "median_success_rate", "median_mean_Q"], median_curve(results))
    land = cfg.landscape
    eta = cfg.learner.eta if land["eta"] is None else float(land["eta"])
    step = cfg.learner.lr if land["step"] is None else float(land["step"])
    frames, overflow = landscape_frames(env.mdp, spec, eta, step, land["iterations"])
    coverage = {}
    for k, grid in frames.items():
        write_grid_csv(out / f"heatmap_k{k:03d}.csv", grid)
        write_pgm(out / f"heatmap_k{k:03d}.pgm", grid)
        coverage[k] = int(np.sum(grid > land["threshold"]))
    write_json(out / "landscape.json", {
        "eta": eta, "step": step, "threshold": land["threshold"], "overflow": overflow,
        "coverage": {str(k): v for k, v in coverage.items()},
        "missing_iterations": [k for k in land["iterations"] if k not in frames]})
    write_json(out / "report.json", {
        "config": cfg.to_dict(),
        "seeds": [{"seed": r["seed"], "episodes_to_success": _finite(r["episodes_to_success"]),
                   "final_success": r["final_success"], "augmented_trajectories": r["augmented"]}
                  for r in results]})
    print(f"trained {len(results)} seed(s); coverage by iteration: {coverage}")
    return EXIT_OK


def cmd_plan(cfg: ExperimentConfig):
    out = _prepare_out(cfg.out)
    pm = cfg.pointmass
    lo, hi = np.asarray(pm["bounds"][0], float), np.asarray(pm["bounds"][1], float)
    potential = None
    if pm["shaped"]:
        if pm["dim"] != 2:
            raise ConfigError("the shaped point-mass potential is defined for dim = 2")
        # value of the matching open grid (unit cells) as a bilinear potential
        H, W = int(round(hi[0] - lo[0])), int(round(hi[1] - lo[1]))
        goal = tuple(int(v) for v in np.floor(np.asarray(pm["goal_center"]) - lo))
        start = tuple(int(v) for v in np.floor(np.asarray(pm["start"]) - lo))
        grid = GridWorldSpec(W, H, goal, start, gamma=cfg.planner.gamma)
        V, _, _ = value_iteration(build_gridworld(grid))
        V = V.reshape(H, W)
        V[goal] = 1.0  # reaching the goal cell is worth the goal reward itself
        potential = GridPotential(V, scale=pm["potential_eta"])
    planner = cfg.planner if cfg.planner.shaped or not pm["shaped"] else \
        PlannerConfig(**{**{f.name: getattr(cfg.planner, f.name) for f in fields(cfg.planner)}, "shaped": True})
    rows = []
    for seed in cfg.seeds:
        env = PointMassEnv(dim=pm["dim"], start=pm["start"], goal_center=pm["goal_center"],
                           goal_radius=pm["goal_radius"], max_steps=pm["max_steps"], bounds=(lo, hi))
        agent = MppiAgent(PointMassModel(env, potential=potential), planner, seed=seed)
        traj = rollout(env, agent, env.max_steps, seed)
        steps = [(t, *np.ravel(s), *np.ravel(a), r) for t, (s, a, r) in
                 enumerate(zip(traj.states, traj.actions, traj.rewards))]
        header = ["t"] + [f"x{i}" for i in range(pm["dim"])] + [f"a{i}" for i in range(pm["dim"])] + ["reward"]
        write_csv(out / f"plan_seed{seed}.csv", header, steps)
        rows.append({"seed": seed, "success": bool(traj.success), "steps": len(traj)})
    write_json(out / "plan_report.json", {"config": cfg.to_dict(), "episodes": rows,
                                          "success_rate": float(np.mean([r["success"] for r in rows]))})
    print(f"success {sum(r['success'] for r in rows)}/{len(rows)}")
    return EXIT_OK


def _iqr(xs):
    q1, q3 = np.percentile(np.asarray(xs, dtype=float), [25, 75])
    return float(q3 - q1)


def cmd_sweep(cfg: ExperimentConfig, param, values=None):
    if param not in ("eta", "tau"):
        raise ConfigError("sweep parameter must be 'eta' or 'tau'")
    values = list(cfg.sweep[param] if values is None else values)
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    out = _prepare_out(cfg.out)
    field_name = "eta" if param == "eta" else "quantile_tau"
    rows, report = [], {}
    for v in values:
        learner = cfg.learner.with_(**{field_name: float(v)})
        if param == "tau":
            learner = learner.with_(value_mode="distributional")
        res = run_seeds(cfg, learner)
        final = [r["final_success"] for r in res]
        eps = [r["episodes_to_success"] for r in res]
        rows.append((float(v), float(np.median(final)), _iqr(final), float(np.median(eps))))
        report[str(v)] = {"final_success": final, "episodes_to_success": [_finite(e) for e in eps]}
    write_csv(out / f"sweep_{param}.csv", ["value", "median_final_success", "iqr_final_success",
                                             "median_episodes_to_success"], rows)
    write_json(out / f"sweep_{param}.json", {"param": param, "seeds": cfg.seeds, "runs": report})
    print(rows_to_csv(["value", "median_final_success", "iqr", "median_episodes_to_success"], rows), end="")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, variants=None):
    variants = list(cfg.compare["variants"] if variants is None else variants)
    allowed = ("none", "bootstrapped", "similarity", "entropy", "smoothed")
    for v in variants:
        if v not in allowed:
            raise ConfigError(f"unknown shaping variant {v!r}")
    out = _prepare_out(cfg.out)
    table, rows = {}, []
    for v in variants:
        learner = cfg.learner.with_(shaping=v)
        res = run_seeds(cfg, learner)
        write_csv(out / f"compare_{v}.csv", ["episode", "median_success_rate", "median_mean_Q"], median_curve(res))
        table[v] = {"median_episodes_to_success": float(np.median([r["episodes_to_success"] for r in res])),
                    "median_final_success": float(np.median([r["final_success"] for r in res])),
                    "episodes_to_success": [r["episodes_to_success"] for r in res],
                    "final_success": [r["final_success"] for r in res]}
        rows.append((v, table[v]["median_final_success"], table[v]["median_episodes_to_success"]))
    write_csv(out / "compare.csv", ["variant", "median_final_success", "median_episodes_to_success"], rows)
    write_json(out / "compare.json", {"seeds": cfg.seeds, "variants": ablation_summary(table)})
    print(rows_to_csv(["variant", "median_final_success", "median_episodes_to_success"], rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    common.add_argument("--out", help="output directory (default: $SLOPE_LAB_OUT or ./slope_lab_out)")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    p = argparse.ArgumentParser(prog="slope-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("check", parents=[common], help="run numerical property suites")
    c.add_argument("suite", nargs="?", default="all", choices=["all", "theorem", "contraction", "qce", "planner"])
    c.add_argument("--eta", type=float, action="append", default=[],
                   help="extra eta for the contraction suite (uses task gamma)")
    sub.add_parser("gridworld", parents=[common], help="train on a GridWorld and export curves and heatmaps")
    sub.add_parser("plan", parents=[common], help="plan on the point-mass task")
    s = sub.add_parser("sweep", parents=[common], help="sweep eta or tau over paired seeds")
    s.add_argument("param", choices=["eta", "tau"])
    s.add_argument("--values", type=float, nargs="+")
    m = sub.add_parser("compare", parents=[common], help="compare shaping variants over paired seeds")
    m.add_argument("variants", nargs="*")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, {"seeds": args.seed, "out": args.out, "jobs": args.jobs})
        if args.command == "check":
            return cmd_check(cfg, args.suite, args.eta)
        if args.command == "gridworld":
            return cmd_gridworld(cfg)
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.param, args.values)
        return cmd_compare(cfg, args.variants or None)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SlopeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
