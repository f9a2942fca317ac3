"""Command-line experiments: training, demo generation, the randomization
study, the observation ablation and rollout recording.

Every command takes ``--config FILE`` (INI, see ``configs/default.cfg``),
``--seed`` and ``--out DIR``. Failures exit nonzero and print one JSON object
``{"error": <type>, "message": <text>}`` on stderr. Log verbosity comes from
``DYNCLOTH_LOG_LEVEL`` (default ``INFO``).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import agent as ag
from . import clothsim
from . import demos as dm
from .clothsim import ConfigError, SimConfig
from .envs import N_POINTS_CHOICES, TASK_NAMES, ClothEnv, get_task, obs_dim
from .replay import load_episodes, save_episodes

log = logging.getLogger("dyncloth")

# The only mapping from variant name to (lambda1, lambda2, n_demo, HER k).
VARIANTS = {
    "ddpg_demo_her": (0.001, 0.0078, 32, 4),
    "ddpg_her": (1.0, 0.0, 0, 4),
    "ddpg_demo": (0.001, 0.0078, 32, 0),
}

MODES = tuple(m.value for m in dm.RandomizationMode)


@dataclass
class ExperimentConfig:
    task: str = "diagonal"
    variant: str = "ddpg_demo_her"
    n_points: int = 8
    seeds: tuple[int, ...] = (0, 1, 2)
    mesh: int = 9
    out: str = "runs"
    agent: dict = field(default_factory=dict)
    physics: dict = field(default_factory=dict)
    task_overrides: dict = field(default_factory=dict)
    demo_file: str | None = None
    checkpoint: str | None = None
    episodes: int = 10
    study_tasks: tuple[str, ...] = TASK_NAMES
    study_modes: tuple[str, ...] = MODES
    study_episodes: int = 100
    study_epochs: int = 3
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.task not in TASK_NAMES:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.n_points not in N_POINTS_CHOICES:
            raise ConfigError(f"n_points must be one of {N_POINTS_CHOICES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for t in self.study_tasks:
            get_task(t)
        for m in self.study_modes:
            dm.RandomizationMode.parse(m)

    def agent_config(self) -> ag.AgentConfig:
        l1, l2, n_demo, k = VARIANTS[self.variant]
        base = dict(lambda1=l1, lambda2=l2, n_demo=n_demo, her_k=k)
        clash = set(base) & set(self.agent)
        if clash:
            raise ConfigError(f"{sorted(clash)} are fixed by the variant and cannot be overridden")
        return ag.AgentConfig(**base, **self.agent)

    def sim_config(self) -> SimConfig:
        return SimConfig(**self.physics)

    def task_spec(self):
        return get_task(self.task, cloth_nodes=self.mesh, **self.task_overrides)

    def make_env(self, n_points: int | None = None) -> ClothEnv:
        return ClothEnv(self.task_spec(), n_points or self.n_points, self.sim_config())


# -- configuration files -----------------------------------------------------------

def _coerce(text: str, target):
    if isinstance(target, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(text)
    if isinstance(target, float):
        return float(text)
    if isinstance(target, tuple):
        items = [s.strip() for s in text.replace(",", " ").split() if s.strip()]
        if target and isinstance(target[0], (int, float)):
            return tuple(type(target[0])(s) for s in items)
        return tuple(items)
    return text


def _coerce_field(cls, name: str, text: str):
    default = {f.name: f for f in dataclasses.fields(cls)}.get(name)
    if default is None:
        raise ConfigError(f"unknown {cls.__name__} key {name!r}")
    value = default.default
    if value is dataclasses.MISSING:
        raise ConfigError(f"{cls.__name__}.{name} cannot be set from a config file")
    return _coerce(text, value)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read an INI file with sections [experiment], [agent], [physics], [task]."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        cp.read(path)
    unknown = set(cp.sections()) - {"experiment", "agent", "physics", "task"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    kw = {}
    if cp.has_section("experiment"):
        for k, v in cp.items("experiment"):
            if k in ("demo_file", "checkpoint"):
                kw[k] = v or None
            else:
                kw[k] = _coerce_field(ExperimentConfig, k, v)
    kw["agent"] = {k: _coerce_field(ag.AgentConfig, k, v) for k, v in
                   (cp.items("agent") if cp.has_section("agent") else [])}
    kw["physics"] = {k: _coerce_field(SimConfig, k, v) for k, v in
                     (cp.items("physics") if cp.has_section("physics") else [])}
    from .envs import TaskSpec

    kw["task_overrides"] = {k: _coerce_field(TaskSpec, k, v) for k, v in
                            (cp.items("task") if cp.has_section("task") else [])}
    return ExperimentConfig(**kw)


def source_hash() -> str:
    h = hashlib.sha256()
    root = resources.files("dyncloth")
    for p in sorted(Path(str(root)).rglob("*")):
        if p.suffix in (".py", ".pyx", ".txt") and "__pycache__" not in p.parts:
            h.update(p.relative_to(Path(str(root))).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def fingerprint(cfg: ExperimentConfig, extra: dict | None = None) -> str:
    """Hash of everything that determines a run's numbers."""
    payload = {
        "experiment": {k: v for k, v in dataclasses.asdict(cfg).items() if k != "out"},
        "agent": dataclasses.asdict(cfg.agent_config()),
        "physics": dataclasses.asdict(cfg.sim_config()),
        "task": repr(cfg.task_spec()),
        "backend": clothsim.BACKEND,
        "source": source_hash(),
        "extra": extra or {},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


# -- reports --------------------------------------------------------------------

@dataclass
class RunReport:
    task: str
    variant: str
    n_points: int
    seeds: list
    curves: dict  # seed -> list of per-epoch test success
    fingerprint: str
    missing: dict = field(default_factory=dict)  # seed -> error message
    obs_dim: int = 0

    @property
    def median_curve(self) -> list:
        runs = [c for c in self.curves.values() if c]
        if not runs:
            return []
        n = min(len(c) for c in runs)
        return np.median(np.array([c[:n] for c in runs]), axis=0).tolist()

    def final_median(self, last: int = 10) -> float:
        """Median over the final ``last`` epochs of the across-seed median curve."""
        m = self.median_curve
        return float(np.median(m[-last:])) if m else float("nan")

    def to_json(self) -> dict:
        return {
            "task": self.task, "variant": self.variant, "n_points": self.n_points,
            "obs_dim": self.obs_dim, "seeds": self.seeds,
            "curves": {str(k): v for k, v in self.curves.items()},
            "median_curve": self.median_curve, "final_median": self.final_median(),
            "missing": {str(k): v for k, v in self.missing.items()},
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_json(cls, d: dict) -> RunReport:
        return cls(d["task"], d["variant"], d["n_points"], d["seeds"],
                   {int(k): v for k, v in d["curves"].items()}, d["fingerprint"],
                   {int(k): v for k, v in d.get("missing", {}).items()}, d.get("obs_dim", 0))

    def write(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=1))
        seeds = [s for s in self.seeds if self.curves.get(s)]
        with open(out / "median.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "median_success"] + [f"seed_{s}" for s in seeds])
            for e, m in enumerate(self.median_curve):
                w.writerow([e, repr(float(m))] + [repr(float(self.curves[s][e])) for s in seeds])


def _load_demos(cfg: ExperimentConfig, env: ClothEnv):
    if cfg.demo_file is None:
        return None
    header, eps = load_episodes(cfg.demo_file)
    if header["task"] != cfg.task or header["n_points"] != env.n_points:
        raise ConfigError(f"demo file {cfg.demo_file} was made for {header['task']}/"
                          f"{header['n_points']} points")
    return eps


def run_training(cfg: ExperimentConfig, out: Path, n_points: int | None = None) -> RunReport:
    """Train every seed; a failing seed is reported and skipped."""
    env = cfg.make_env(n_points)
    acfg = cfg.agent_config()
    demos = _load_demos(cfg, env) if acfg.n_demo > 0 else None
    fp = fingerprint(dataclasses.replace(cfg, n_points=env.n_points))
    report = RunReport(cfg.task, cfg.variant, env.n_points, list(cfg.seeds), {}, fp,
                       obs_dim=obs_dim(env.task, env.n_points))
    log.info("train %s/%s points=%d obs_dim=%d fingerprint=%s", cfg.task, cfg.variant,
             env.n_points, report.obs_dim, fp[:12])
    for seed in cfg.seeds:
        t0 = time.time()
        try:
            stats = ag.train(env, acfg, seed, out / f"seed_{seed}", demos=demos,
                             checkpoint_every=cfg.checkpoint_every)
            report.curves[seed] = stats.success.tolist()
            log.info("seed %d done in %.0fs, final median %.2f", seed, time.time() - t0,
                     stats.final_median())
        except Exception as exc:  # one seed never aborts its siblings
            log.error("seed %d failed: %s", seed, exc)
            report.missing[seed] = f"{type(exc).__name__}: {exc}"
    report.write(out)
    return report


def cmd_train(cfg: ExperimentConfig, out: Path) -> RunReport:
    report = run_training(cfg, out)
    if not report.curves:
        raise RuntimeError(f"every seed failed: {report.missing}")
    return report


def cmd_demo_gen(cfg: ExperimentConfig, out: Path, seed: int) -> Path:
    env = cfg.make_env()
    n = cfg.agent_config().demo_episodes
    rng = np.random.default_rng(seed)
    eps = dm.generate_demos(env.task, n, rng, env.n_points, sim_config=env.sim_config)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"demos_{cfg.task}_{env.n_points}pt.jsonl"
    save_episodes(path, eps, cfg.task, env.n_points)
    final = [bool(e.rewards[-1] == 0.0) for e in eps]
    log.info("wrote %d demos to %s (%d end in success)", n, path, sum(final))
    return path


STUDY_FIELDS = ["mode"] + [f"{t}_{s}" for t in TASK_NAMES for s in ("mean", "std")]


def cmd_study_dynamics(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    """Table-I layout: one row per randomization mode, mean and std per task."""
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_config()
    results: dict = {}
    t0 = time.time()
    for task in cfg.study_tasks:
        spec = get_task(task, cloth_nodes=cfg.mesh, **cfg.task_overrides)
        for mode in cfg.study_modes:
            mean, std, per_epoch = dm.run_randomization_study(
                spec, mode, cfg.study_episodes, cfg.study_epochs, seed, sim_config=sim)
            results.setdefault(mode, {})[task] = {"mean": mean, "std": std, "per_epoch": per_epoch}
            log.info("study %s %-16s %.3f +- %.3f", task, mode, mean, std)
    elapsed = time.time() - t0
    with open(out / "study.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STUDY_FIELDS)
        for mode in cfg.study_modes:
            row = [mode]
            for task in TASK_NAMES:
                r = results[mode].get(task)
                row += [repr(r["mean"]), repr(r["std"])] if r else ["", ""]
            w.writerow(row)
    summary = {"seed": seed, "episodes": cfg.study_episodes, "epochs": cfg.study_epochs,
               "seconds": elapsed, "results": results}
    (out / "study.json").write_text(json.dumps(summary, indent=1))
    return summary


def cmd_ablate_obs(cfg: ExperimentConfig, out: Path) -> dict:
    reports = {}
    for n in N_POINTS_CHOICES:
        reports[n] = run_training(dataclasses.replace(cfg, n_points=n), out / f"points_{n}", n)
    (out / "ablation.json").write_text(json.dumps(
        {str(n): {"obs_dim": r.obs_dim, "final_median": r.final_median()} for n, r in reports.items()},
        indent=1))
    return reports


def cmd_record(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    """Roll out a checkpoint (noiseless) or, without one, the task script."""
    env = cfg.make_env()
    rng = np.random.default_rng(seed)
    if cfg.checkpoint:
        nets = ag.AgentNets.load(cfg.checkpoint, cfg.agent_config())
        if nets.obs_dim != env.obs_dim:
            raise ConfigError(f"checkpoint expects {nets.obs_dim} observation entries, "
                              f"environment gives {env.obs_dim}")
        policy = lambda o: ag.select_action(nets, o, 0.0, None, explore=False)  # noqa: E731
    else:
        policy = dm.ScriptPolicy(dm.make_script(env.task), noise=False)

    out.mkdir(parents=True, exist_ok=True)
    results, trajs, frames = [], [], []
    for _ in range(cfg.episodes):
        r = ag.run_episode(env, policy, rng, record=True, frames=True)
        results.append(r)
        trajs.append(r.trajectory)
        frames.append(r.frames)
    save_episodes(out / "rollout.jsonl", trajs, cfg.task, env.n_points, frames)
    tracked = [f"min_dist_{k}" for k in range(len(env.task.tracked))]
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "final_success", "anytime_success"] + tracked + ["steps"])
        for i, r in enumerate(results):
            w.writerow([i, int(r.success), int(r.anytime)] + [repr(float(d)) for d in r.min_distances] + [r.steps])
    summary = {"episodes": len(results), "success_rate": float(np.mean([r.success for r in results])),
               "anytime_success_rate": float(np.mean([r.anytime for r in results])),
               "source": cfg.checkpoint or "script", "seed": seed}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyncloth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "demo-gen", "study-dynamics", "ablate-obs", "record"):
        s = sub.add_parser(name)
        s.add_argument("--config", default=None, help="INI config file")
        s.add_argument("--seed", type=int, default=None,
                       help="seed (train/ablate-obs: run only this seed)")
        s.add_argument("--out", default=None, help="output directory")
        if name in ("train", "ablate-obs", "demo-gen", "record"):
            s.add_argument("--task", choices=TASK_NAMES, default=None)
        if name in ("train", "ablate-obs"):
            s.add_argument("--variant", choices=sorted(VARIANTS), default=None)
            s.add_argument("--epochs", type=int, default=None)
        if name in ("train", "demo-gen", "record"):
            s.add_argument("--n-points", type=int, choices=N_POINTS_CHOICES, default=None)
        if name == "record":
            s.add_argument("--checkpoint", default=None)
            s.add_argument("--episodes", type=int, default=None)
        if name == "demo-gen":
            s.add_argument("--n", type=int, default=None, help="number of demo episodes")
        if name == "study-dynamics":
            s.add_argument("--tasks", nargs="+", choices=TASK_NAMES, default=None)
            s.add_argument("--modes", nargs="+", choices=MODES, default=None)
    return p


def _apply_cli(cfg: ExperimentConfig, args) -> ExperimentConfig:
    upd = {}
    if args.seed is not None and args.command in ("train", "ablate-obs"):
        upd["seeds"] = (args.seed,)
    for attr, key in (("task", "task"), ("variant", "variant"), ("n_points", "n_points"),
                      ("checkpoint", "checkpoint"), ("episodes", "episodes")):
        v = getattr(args, attr, None)
        if v is not None:
            upd[key] = v
    if getattr(args, "tasks", None):
        upd["study_tasks"] = tuple(args.tasks)
    if getattr(args, "modes", None):
        upd["study_modes"] = tuple(args.modes)
    agent = dict(cfg.agent)
    if getattr(args, "epochs", None) is not None:
        agent["epochs"] = args.epochs
    if getattr(args, "n", None) is not None:
        agent["demo_episodes"] = args.n
    upd["agent"] = agent
    if args.out is not None:
        upd["out"] = args.out
    return dataclasses.replace(cfg, **upd)


def main(argv=None) -> int:
    name = os.environ.get("DYNCLOTH_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    log.setLevel(level if isinstance(level, int) else logging.INFO)
    if not isinstance(level, int):
        log.warning("unknown DYNCLOTH_LOG_LEVEL %r, using INFO", name)
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_cli(load_config(args.config), args)
        out = Path(cfg.out)
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        if args.command == "train":
            result = cmd_train(cfg, out).to_json()
            result = {"final_median": result["final_median"], "missing": result["missing"],
                      "fingerprint": result["fingerprint"]}
        elif args.command == "demo-gen":
            result = {"demo_file": str(cmd_demo_gen(cfg, out, seed))}
        elif args.command == "study-dynamics":
            s = cmd_study_dynamics(cfg, out, seed)
            result = {"csv": str(out / "study.csv"), "seconds": s["seconds"]}
        elif args.command == "ablate-obs":
            reps = cmd_ablate_obs(cfg, out)
            result = {str(n): r.final_median() for n, r in reps.items()}
        else:
            result = cmd_record(cfg, out, seed)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, ValueError)) else 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
