"""Scripted waypoint demonstrations and the speed/trajectory randomization study."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .clothsim import ConfigError, SimulationBlowUp
from .envs import ClothEnv, TaskSpec, get_task

log = logging.getLogger(__name__)

ARRIVAL_TOL = 2.0
NOISE_SIGMA = 0.1  # fraction of the action half-range
NOISE_CLIP = 0.2  # 10% of the full [-1, 1] range
SPEED_RANGE = (0.5, 1.5)
TRAJECTORY_OFFSET = 20.0


class RandomizationMode(enum.Enum):
    NONE = "none"
    SPEED = "speed"
    TRAJECTORY = "trajectory"
    SPEED_TRAJECTORY = "speed+trajectory"

    @classmethod
    def parse(cls, text: str) -> RandomizationMode:
        key = text.strip().lower().replace("_", "+").replace(" ", "")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ConfigError(f"unknown randomization mode {text!r}")


@dataclass(frozen=True)
class WaypointScript:
    """Waypoints are offsets from the cloth origin at reset.

    ``speeds[i]`` is the nominal speed of the segment that ends at waypoint
    ``i`` (``speeds[0]`` is unused). The gripper closes before the segment
    towards waypoint ``grasp_before`` and opens once waypoint
    ``release_after`` is reached; ``None`` means never.
    """

    task: str
    waypoints: np.ndarray  # (K, 3)
    speeds: np.ndarray  # (K,)
    grasp_before: int | None = 0
    release_after: int | None = None

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ConfigError("a script needs at least two waypoints")
        if np.any(np.asarray(self.speeds)[1:] <= 0):
            raise ConfigError("segment speeds must be positive")

    def grip_at(self, target_index: int) -> bool:
        if self.grasp_before is None or target_index < self.grasp_before:
            return False
        if self.release_after is not None and target_index > self.release_after:
            return False
        return True


def parse_script(text: str) -> WaypointScript:
    task, grasp_before, release_after = None, 0, None
    wps, speeds = [], []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        if key == "task":
            task = vals[0]
        elif key == "grasp_before":
            grasp_before = None if vals[0] == "none" else int(vals[0])
        elif key == "release_after":
            release_after = None if vals[0] == "none" else int(vals[0])
        elif key == "waypoint":
            x, y, z, s = map(float, vals)
            wps.append((x, y, z))
            speeds.append(s)
        else:
            raise ConfigError(f"unknown script key {key!r}")
    if task is None:
        raise ConfigError("script is missing a 'task' line")
    return WaypointScript(task, np.array(wps, dtype=float), np.array(speeds, dtype=float),
                          grasp_before, release_after)


def format_script(script: WaypointScript) -> str:
    fmt = lambda v: "none" if v is None else str(v)  # noqa: E731
    lines = [
        f"task {script.task}",
        f"grasp_before {fmt(script.grasp_before)}",
        f"release_after {fmt(script.release_after)}",
    ]
    for (x, y, z), s in zip(script.waypoints, script.speeds):
        lines.append(f"waypoint {float(x)!r} {float(y)!r} {float(z)!r} {float(s)!r}")
    return "\n".join(lines) + "\n"


def make_script(task: TaskSpec | str, path: str | Path | None = None) -> WaypointScript:
    """Load the committed script for ``task`` (or a custom script file)."""
    name = task if isinstance(task, str) else task.name
    if path is not None:
        return parse_script(Path(path).read_text())
    text = resources.files("dyncloth").joinpath("scripts", f"{name}.txt").read_text()
    return parse_script(text)


def randomize(script: WaypointScript, mode: RandomizationMode | str,
              rng: np.random.Generator) -> WaypointScript:
    """Perturb segment speeds and/or interior waypoints; endpoints stay fixed."""
    if isinstance(mode, str):
        mode = RandomizationMode.parse(mode)
    wps, speeds = script.waypoints, script.speeds
    if mode in (RandomizationMode.SPEED, RandomizationMode.SPEED_TRAJECTORY):
        speeds = speeds * rng.uniform(*SPEED_RANGE, size=speeds.shape)
    if mode in (RandomizationMode.TRAJECTORY, RandomizationMode.SPEED_TRAJECTORY):
        wps = wps.copy()
        k = len(wps) - 2
        if k > 0:
            wps[1:-1] += rng.uniform(-TRAJECTORY_OFFSET, TRAJECTORY_OFFSET, size=(k, 3))
    if wps is script.waypoints and speeds is script.speeds:
        return script
    return replace(script, waypoints=wps, speeds=speeds)


class ScriptController:
    """Saturated proportional controller that walks a waypoint script."""

    def __init__(self, script: WaypointScript, origin: np.ndarray, max_speed: float,
                 control_dt: float, noise: bool = True):
        self.script = script
        self.origin = np.asarray(origin, dtype=float)
        self.max_speed = max_speed
        self.control_dt = control_dt
        self.noise = noise
        self.target = 1

    def act(self, manip_pos: np.ndarray, rng: np.random.Generator | None,
            action_dim: int = 4) -> np.ndarray:
        wps = self.script.waypoints
        last = len(wps) - 1
        while self.target < last and np.linalg.norm(self.origin + wps[self.target] - manip_pos) < ARRIVAL_TOL:
            self.target += 1
        delta = self.origin + wps[self.target] - manip_pos
        dist = float(np.linalg.norm(delta))
        speed = min(self.script.speeds[self.target], dist / self.control_dt)
        vel = delta * (speed / dist) if dist > 0 else np.zeros(3)
        a = np.empty(action_dim)
        a[:3] = vel / self.max_speed
        if action_dim == 4:
            heading = self.target + 1 if (self.target == last and dist < ARRIVAL_TOL) else self.target
            a[3] = 1.0 if self.script.grip_at(heading) else -1.0
        if self.noise and rng is not None:
            a[:3] += np.clip(rng.normal(0.0, NOISE_SIGMA, size=3), -NOISE_CLIP, NOISE_CLIP)
        return np.clip(a, -1.0, 1.0)


class ScriptPolicy:
    """Observation-to-action wrapper around a fresh controller per episode."""

    def __init__(self, script: WaypointScript, noise: bool = False, rng=None):
        self.script, self.noise, self.rng = script, noise, rng
        self.env = self.ctrl = None

    def reset(self, env: ClothEnv) -> None:
        self.env = env
        self.ctrl = ScriptController(self.script, env.origin, env.sim_config.max_speed,
                                     env.sim_config.control_dt, noise=self.noise)

    def __call__(self, obs) -> np.ndarray:
        return self.ctrl.act(self.env.state.manip_pos[0], self.rng, self.env.action_dim)


def scripted_action(manip_pos: np.ndarray, script: WaypointScript, controller_state: ScriptController,
                    rng: np.random.Generator | None = None, action_dim: int = 4) -> np.ndarray:
    return controller_state.act(manip_pos, rng, action_dim)


def run_script_episode(env: ClothEnv, script: WaypointScript, rng: np.random.Generator,
                       noise: bool = True, record: bool = False):
    """Roll out one scripted episode. Returns ``(final_success, trajectory_or_None)``."""
    from .replay import EpisodeTrajectory

    obs, goal = env.reset(rng)
    ctrl = ScriptController(script, env.origin, env.sim_config.max_speed,
                            env.sim_config.control_dt, noise=noise)
    T = env.task.horizon
    if record:
        observations = np.empty((T + 1, env.obs_dim))
        actions = np.empty((T, env.action_dim))
        achieved = np.empty((T + 1, env.goal_dim))
        rewards = np.empty(T)
        observations[0] = obs
        achieved[0] = env.achieved_goal()
    res = None
    for t in range(T):
        a = ctrl.act(env.state.manip_pos[0], rng, env.action_dim)
        res = env.step(a)
        if record:
            actions[t] = a
            observations[t + 1] = res.observation
            achieved[t + 1] = res.achieved_goal
            rewards[t] = res.reward
    traj = None
    if record:
        traj = EpisodeTrajectory(observations, actions, achieved, goal.copy(), rewards,
                                 is_demo=True)
    return res.is_success, traj


def generate_demos(task: TaskSpec | str, n_episodes: int, rng: np.random.Generator,
                   n_points: int = 8, sim_config=None, script: WaypointScript | None = None,
                   max_retries: int = 100) -> list:
    """Noisy unrandomized script rollouts, imperfect episodes included."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    task = get_task(task) if isinstance(task, str) else task
    script = script or make_script(task)
    env = ClothEnv(task, n_points=n_points, sim_config=sim_config)
    demos, failures = [], 0
    while len(demos) < n_episodes:
        try:
            _, traj = run_script_episode(env, script, rng, noise=True, record=True)
        except SimulationBlowUp as exc:
            failures += 1
            log.warning("demo episode discarded: %s", exc)
            if failures > max_retries:
                raise
            continue
        demos.append(traj)
    return demos


def episode_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master, index])


def run_randomization_study(task: TaskSpec | str, mode: RandomizationMode | str, n_episodes: int,
                            n_epochs: int, seed: int, sim_config=None,
                            script: WaypointScript | None = None) -> tuple[float, float, list[float]]:
    """Scripted success rate under randomization: ``(mean, std, per_epoch)``.

    Every episode draws its own generator from ``(seed, epoch, episode)``,
    so results do not depend on execution order.
    """
    task = get_task(task) if isinstance(task, str) else task
    mode = RandomizationMode.parse(mode) if isinstance(mode, str) else mode
    base = script or make_script(task)
    env = ClothEnv(task, n_points=4, sim_config=sim_config)
    rates = []
    for epoch in range(n_epochs):
        wins = 0
        for ep in range(n_episodes):
            rng = np.random.default_rng(episode_seed(seed, epoch * n_episodes + ep))
            s = randomize(base, mode, rng)
            try:
                ok, _ = run_script_episode(env, s, rng, noise=True)
            except SimulationBlowUp as exc:
                log.warning("study episode failed: %s", exc)
                ok = False
            wins += int(ok)
        rates.append(wins / n_episodes)
    return float(np.mean(rates)), float(np.std(rates)), rates
