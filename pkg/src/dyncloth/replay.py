"""Episode storage, demonstration buffer and HER "future" goal relabeling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import envs


class ValidationError(ValueError):
    pass


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    desired_goal: np.ndarray
    achieved_goal: np.ndarray  # of the next state
    done: bool


@dataclass
class EpisodeTrajectory:
    """One episode stored step-major.

    ``observations[t]`` and ``achieved[t]`` describe state ``s_t`` for
    ``t = 0..T``, so transition ``t`` is ``(observations[t], actions[t],
    rewards[t], observations[t+1])`` with achieved goal ``achieved[t+1]``.
    """

    observations: np.ndarray  # (T+1, obs_dim)
    actions: np.ndarray  # (T, act_dim)
    achieved: np.ndarray  # (T+1, goal_dim)
    goal: np.ndarray  # (goal_dim,)
    rewards: np.ndarray  # (T,)
    is_demo: bool = False

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def transition(self, t: int) -> Transition:
        return Transition(
            self.observations[t].copy(), self.actions[t].copy(), float(self.rewards[t]),
            self.observations[t + 1].copy(), self.goal.copy(), self.achieved[t + 1].copy(),
            t == self.horizon - 1,
        )

    def validate(self, goal_slice: slice | None = None) -> None:
        T = self.horizon
        if T < 1:
            raise ValidationError("empty episode")
        if self.observations.shape[0] != T + 1 or self.achieved.shape[0] != T + 1:
            raise ValidationError("observation/achieved arrays must hold T+1 rows")
        if self.rewards.shape != (T,):
            raise ValidationError("rewards must hold T entries")
        if not np.all(np.isin(self.rewards, (-1.0, 0.0))):
            raise ValidationError("rewards must be in {-1, 0}")
        if goal_slice is not None and not np.array_equal(
            self.observations[:, goal_slice], np.broadcast_to(self.goal, (T + 1, self.goal.size))
        ):
            raise ValidationError("desired goal changes within the episode")

    @classmethod
    def from_transitions(cls, transitions: list[Transition], initial_achieved: np.ndarray,
                         is_demo: bool = False) -> EpisodeTrajectory:
        """Assemble an episode, rejecting broken chaining or a drifting goal."""
        if not transitions:
            raise ValidationError("empty episode")
        for k in range(1, len(transitions)):
            if not np.array_equal(transitions[k].obs, transitions[k - 1].next_obs):
                raise ValidationError(f"observation chain broken at step {k}")
            if not np.array_equal(transitions[k].desired_goal, transitions[0].desired_goal):
                raise ValidationError(f"desired goal changes at step {k}")
        obs = np.stack([transitions[0].obs] + [tr.next_obs for tr in transitions])
        ach = np.stack([np.asarray(initial_achieved)] + [tr.achieved_goal for tr in transitions])
        return cls(obs, np.stack([tr.action for tr in transitions]), ach,
                   np.asarray(transitions[0].desired_goal).copy(),
                   np.array([tr.reward for tr in transitions], dtype=float), is_demo)


@dataclass(frozen=True)
class HERConfig:
    k: int = 4
    strategy: str = "future"

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.strategy != "future":
            raise ValueError("only the 'future' strategy is implemented")

    @property
    def relabel_probability(self) -> float:
        return self.k / (self.k + 1.0)


def relabel(trajectory: EpisodeTrajectory, t: int, future_index: int, threshold: float,
            goal_slice: slice | None = None) -> Transition:
    """Transition ``t`` with its goal replaced by the goal achieved after step ``future_index``."""
    T = trajectory.horizon
    if not (0 <= t <= future_index < T):
        raise IndexError(f"need 0 <= t <= future_index < T, got t={t}, future={future_index}, T={T}")
    tr = trajectory.transition(t)
    g = trajectory.achieved[future_index + 1].copy()
    tr.desired_goal = g
    tr.reward = envs.reward(tr.achieved_goal, g, threshold)
    if goal_slice is not None:
        tr.obs[goal_slice] = g
        tr.next_obs[goal_slice] = g
    return tr


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    goals: np.ndarray
    achieved: np.ndarray
    done: np.ndarray
    is_demo: np.ndarray
    relabeled: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def subset(self, mask: np.ndarray) -> Batch:
        return Batch(**{k: v[mask] for k, v in self.__dict__.items()})

    @staticmethod
    def concat(parts: list[Batch]) -> Batch:
        keys = parts[0].__dict__.keys()
        return Batch(**{k: np.concatenate([p.__dict__[k] for p in parts]) for k in keys})


class ReplayBuffer:
    """Fixed-capacity FIFO store of equal-length episodes in preallocated arrays."""

    def __init__(self, capacity: int, horizon: int, obs_dim: int, action_dim: int, goal_dim: int,
                 goal_slice: slice, evict: bool = True, is_demo: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.horizon = horizon
        self.goal_slice = goal_slice
        self.evict = evict
        self.is_demo = is_demo
        self.obs = np.zeros((capacity, horizon + 1, obs_dim))
        self.actions = np.zeros((capacity, horizon, action_dim))
        self.achieved = np.zeros((capacity, horizon + 1, goal_dim))
        self.goals = np.zeros((capacity, goal_dim))
        self.rewards = np.zeros((capacity, horizon))
        self.size = 0
        self._next = 0
        self.n_stored = 0

    def __len__(self) -> int:
        return self.size

    def store_episode(self, traj: EpisodeTrajectory) -> None:
        if traj.horizon != self.horizon:
            raise ValidationError(f"episode length {traj.horizon} != buffer horizon {self.horizon}")
        traj.validate(self.goal_slice)
        if self.size == self.capacity and not self.evict:
            raise ValidationError("buffer is full and does not evict")
        i = self._next
        self.obs[i] = traj.observations
        self.actions[i] = traj.actions
        self.achieved[i] = traj.achieved
        self.goals[i] = traj.goal
        self.rewards[i] = traj.rewards
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.n_stored += 1

    def episode(self, k: int) -> EpisodeTrajectory:
        """k-th stored episode in insertion order among those still held."""
        if not 0 <= k < self.size:
            raise IndexError(k)
        i = (self._next - self.size + k) % self.capacity
        return EpisodeTrajectory(self.obs[i].copy(), self.actions[i].copy(), self.achieved[i].copy(),
                                 self.goals[i].copy(), self.rewards[i].copy(), self.is_demo)

    def sample(self, n: int, her: HERConfig, threshold: float, rng: np.random.Generator,
               episodes: np.ndarray | None = None) -> Batch:
        """Uniform transitions, each relabeled with probability k/(k+1)."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        T = self.horizon
        ep = rng.integers(0, self.size, size=n) if episodes is None else episodes
        t = rng.integers(0, T, size=n)
        relabeled = rng.uniform(size=n) < her.relabel_probability
        future = t + np.floor(rng.uniform(size=n) * (T - t)).astype(np.int64)
        goals = self.goals[ep].copy()
        goals[relabeled] = self.achieved[ep[relabeled], future[relabeled] + 1]
        achieved = self.achieved[ep, t + 1]
        rewards = np.where(relabeled, envs.reward(achieved, goals, threshold), self.rewards[ep, t])
        obs = self.obs[ep, t].copy()
        next_obs = self.obs[ep, t + 1].copy()
        obs[:, self.goal_slice] = goals
        next_obs[:, self.goal_slice] = goals
        return Batch(
            obs=obs,
            actions=self.actions[ep, t].copy(),
            rewards=rewards,
            next_obs=next_obs,
            goals=goals,
            achieved=achieved.copy(),
            done=t == T - 1,
            is_demo=np.full(n, self.is_demo),
            relabeled=relabeled,
        )


def make_buffer(env, capacity: int, demo: bool = False) -> ReplayBuffer:
    return ReplayBuffer(capacity, env.task.horizon, env.obs_dim, env.action_dim, env.goal_dim,
                        envs.goal_slice(env.task, env.n_points), evict=not demo, is_demo=demo)


def sample_her_batch(main: ReplayBuffer, demo: ReplayBuffer | None, batch_size: int, n_demo: int,
                     her: HERConfig, threshold: float, rng: np.random.Generator) -> Batch:
    """``batch_size - n_demo`` main transitions followed by ``n_demo`` demo transitions."""
    if not 0 <= n_demo <= batch_size:
        raise ValueError("need 0 <= n_demo <= batch_size")
    if len(main) == 0:
        raise ValueError("main buffer is empty")
    parts = [main.sample(batch_size - n_demo, her, threshold, rng)]
    if n_demo:
        if demo is None or len(demo) == 0:
            raise ValueError("demo buffer is empty but n_demo > 0")
        d = demo.sample(n_demo, her, threshold, rng)
        d.is_demo[:] = True
        parts.append(d)
    return Batch.concat(parts) if len(parts) > 1 else parts[0]


# -- episode files -------------------------------------------------------------
#
# JSON lines. The first line is a header
#   {"format": "dyncloth-episodes", "version": 1, "task": ..., "n_points": ..., "horizon": T}
# followed by one record per state of every episode (T + 1 per episode):
#   {"episode": i, "t": t, "observation": [...], "achieved": [...], "goal": [...],
#    "action": [...] | null, "reward": r | null, "is_demo": bool}
# ``action``/``reward`` describe the transition leaving state t and are null at
# t = T. Rollout dumps use the same records plus time, positions, manipulator
# and grasp. Floats are written with shortest round-trip repr, so a reload is
# bit-exact.

EPISODE_FORMAT = "dyncloth-episodes"
EPISODE_VERSION = 1


def episode_records(traj: EpisodeTrajectory, index: int, frames: list | None = None):
    """One transition record per control step, ``t = 0 .. T-1``.

    ``frames`` holds ``T + 1`` simulator snapshots; record ``t`` carries the
    snapshot after step ``t`` and record 0 also the initial one.
    """
    for t in range(traj.horizon):
        rec = {
            "episode": index,
            "t": t,
            "observation": traj.observations[t].tolist(),
            "achieved": traj.achieved[t].tolist(),
            "goal": traj.goal.tolist(),
            "action": traj.actions[t].tolist(),
            "reward": float(traj.rewards[t]),
            "next_observation": traj.observations[t + 1].tolist(),
            "next_achieved": traj.achieved[t + 1].tolist(),
            "is_demo": bool(traj.is_demo),
        }
        if frames is not None:
            rec.update(frames[t + 1])
            if t == 0:
                rec["initial"] = frames[0]
        yield rec


def save_episodes(path, episodes: list, task: str, n_points: int, frames: list | None = None) -> None:
    import json

    horizon = episodes[0].horizon if episodes else 0
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": EPISODE_FORMAT, "version": EPISODE_VERSION, "task": task,
                             "n_points": n_points, "horizon": horizon}) + "\n")
        for i, traj in enumerate(episodes):
            for rec in episode_records(traj, i, None if frames is None else frames[i]):
                fh.write(json.dumps(rec) + "\n")


def load_episodes(path) -> tuple[dict, list]:
    """Returns ``(header, episodes)``; validates versions and step counts."""
    import json

    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != EPISODE_FORMAT:
            raise ValidationError(f"{path}: not an episode file")
        if header.get("version") != EPISODE_VERSION:
            raise ValidationError(f"{path}: unsupported version {header.get('version')}")
        T = int(header["horizon"])
        groups: dict[int, list] = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                groups.setdefault(rec["episode"], []).append(rec)
    episodes = []
    for i in sorted(groups):
        recs = sorted(groups[i], key=lambda r: r["t"])
        if [r["t"] for r in recs] != list(range(T)):
            raise ValidationError(f"{path}: episode {i} does not hold steps 0..{T - 1}")
        for a, b in zip(recs, recs[1:]):
            if a["next_observation"] != b["observation"] or a["next_achieved"] != b["achieved"]:
                raise ValidationError(f"{path}: episode {i} breaks the chain at step {b['t']}")
        traj = EpisodeTrajectory(
            np.array([r["observation"] for r in recs] + [recs[-1]["next_observation"]], dtype=float),
            np.array([r["action"] for r in recs], dtype=float),
            np.array([r["achieved"] for r in recs] + [recs[-1]["next_achieved"]], dtype=float),
            np.array(recs[0]["goal"], dtype=float),
            np.array([r["reward"] for r in recs], dtype=float),
            bool(recs[0]["is_demo"]),
        )
        traj.validate()
        episodes.append(traj)
    return header, episodes
