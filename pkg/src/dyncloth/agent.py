"""DDPG + HER + demonstrations: losses, update steps and the epoch loop.

Actor loss (minimized)::

    L_pi = -lambda1 * mean_i Q(s_i, pi(o_i))
           + lambda2 * sum_{demo i} ||pi(o_i) - a_i||^2 * 1[Q(s_i, a_i) > Q(s_i, pi(o_i))]

Critic loss: mean squared TD error against ``r + gamma * Q'(s', pi'(o'))``
clamped to the attainable return range ``[-1/(1-gamma), 0]``. Episodes end
on a time limit, so the bootstrap is never cut at the final step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .clothsim import SimulationBlowUp
from .envs import ClothEnv, goal_distances
from .replay import (
    Batch,
    EpisodeTrajectory,
    HERConfig,
    ReplayBuffer,
    make_buffer,
    sample_her_batch,
)

log = logging.getLogger(__name__)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.98
    tau: float = 0.05
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    sigma: float = 0.2
    lambda1: float = 0.001
    lambda2: float = 0.0078
    batch_size: int = 256
    n_demo: int = 32
    updates_per_epoch: int = 100
    epochs: int = 150
    train_episodes: int = 20
    test_episodes: int = 10
    her_k: int = 4
    hidden: tuple[int, ...] = (256, 256, 256)
    buffer_episodes: int = 1000
    demo_episodes: int = 20
    norm_clip: float = 5.0
    norm_eps: float = 0.01
    target_every: int = 1  # gradient updates between soft target updates
    action_l2: float = 0.0  # weight of the mean squared policy action, scaled by lambda1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise nx.ConfigError("gamma must lie in (0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise nx.ConfigError("tau must lie in (0, 1]")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise nx.ConfigError("lambda1 and lambda2 must be non-negative")
        if not 0 <= self.n_demo <= self.batch_size:
            raise nx.ConfigError("need 0 <= n_demo <= batch_size")
        if self.sigma < 0 or self.updates_per_epoch < 0 or self.epochs < 0:
            raise nx.ConfigError("sigma, updates_per_epoch and epochs must be non-negative")
        if self.action_l2 < 0:
            raise nx.ConfigError("action_l2 must be non-negative")
        if self.target_every < 1:
            raise nx.ConfigError("target_every must be >= 1")
        if self.lambda2 > 0 and self.n_demo == 0:
            raise nx.ConfigError("lambda2 > 0 needs n_demo > 0")

    @property
    def her(self) -> HERConfig:
        return HERConfig(k=self.her_k)

    @property
    def target_bounds(self) -> tuple[float, float]:
        lo = -1.0 / (1.0 - self.gamma) if self.gamma < 1.0 else -np.inf
        return lo, 0.0


class Normalizer:
    """Running mean/std of observations; normalized values are clipped."""

    def __init__(self, size: int, eps: float = 0.01, clip: float = 5.0):
        self.eps, self.clip = eps, clip
        self.sum = np.zeros(size)
        self.sumsq = np.zeros(size)
        self.count = 0.0
        self.mean = np.zeros(size)
        self.std = np.ones(size)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, self.sum.size)
        self.sum += x.sum(axis=0)
        self.sumsq += (x * x).sum(axis=0)
        self.count += x.shape[0]
        self.mean = self.sum / self.count
        var = np.maximum(self.eps ** 2, self.sumsq / self.count - self.mean ** 2)
        self.std = np.sqrt(var)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def state(self) -> np.ndarray:
        return np.concatenate([[self.count], self.sum, self.sumsq])

    def load(self, arr: np.ndarray) -> None:
        n = self.sum.size
        self.sum[:], self.sumsq[:] = arr[1:n + 1], arr[n + 1:]
        self.count = float(arr[0])
        if self.count > 0:
            self.mean = self.sum / self.count
            self.std = np.sqrt(np.maximum(self.eps ** 2, self.sumsq / self.count - self.mean ** 2))

    def copy(self) -> Normalizer:
        other = Normalizer(self.sum.size, self.eps, self.clip)
        other.load(self.state())
        return other


@dataclass
class AgentNets:
    actor: nx.ParamSet
    critic: nx.ParamSet
    target_actor: nx.ParamSet
    target_critic: nx.ParamSet
    actor_opt: nx.AdamState
    critic_opt: nx.AdamState
    normalizer: Normalizer

    @property
    def obs_dim(self) -> int:
        return self.actor.layer_sizes[0]

    @property
    def action_dim(self) -> int:
        return self.actor.layer_sizes[-1]

    def save(self, path) -> None:
        nx.save_checkpoint(path, {
            "actor": self.actor, "critic": self.critic,
            "target_actor": self.target_actor, "target_critic": self.target_critic,
            "normalizer": self.normalizer.state(),
        })

    @classmethod
    def load(cls, path, config: AgentConfig | None = None) -> AgentNets:
        rec = nx.load_checkpoint(path)
        cfg = config or AgentConfig()
        norm = Normalizer(rec["actor"].layer_sizes[0], cfg.norm_eps, cfg.norm_clip)
        norm.load(rec["normalizer"])
        return cls(rec["actor"], rec["critic"], rec["target_actor"], rec["target_critic"],
                   nx.AdamState.zeros_like(rec["actor"]), nx.AdamState.zeros_like(rec["critic"]),
                   norm)


def make_nets(obs_dim: int, action_dim: int, config: AgentConfig, rng: np.random.Generator) -> AgentNets:
    h = list(config.hidden)
    actor = nx.mlp_init([obs_dim, *h, action_dim], "relu", "tanh", rng, final_scale=1e-2)
    critic = nx.mlp_init([obs_dim + action_dim, *h, 1], "relu", "identity", rng)
    return AgentNets(actor, critic, actor.copy(), critic.copy(), nx.AdamState.zeros_like(actor),
                     nx.AdamState.zeros_like(critic), Normalizer(obs_dim, config.norm_eps, config.norm_clip))


def select_action(nets: AgentNets, observation, sigma: float, rng: np.random.Generator | None,
                  explore: bool = True) -> np.ndarray:
    o = np.asarray(observation, dtype=float)
    if o.shape != (nets.obs_dim,):
        raise nx.ShapeError(f"observation must have shape ({nets.obs_dim},), got {o.shape}")
    a = nx.predict(nets.actor, nets.normalizer(o))
    if explore and sigma > 0:
        a = a + rng.normal(0.0, sigma, size=a.shape)
    return np.clip(a, -1.0, 1.0)


def _critic_in(obs_n, actions):
    return np.concatenate([obs_n, actions], axis=1)


def td_targets(nets: AgentNets, batch: Batch, config: AgentConfig) -> np.ndarray:
    o2 = nets.normalizer(batch.next_obs)
    a2 = nx.predict(nets.target_actor, o2)
    q2 = nx.predict(nets.target_critic, _critic_in(o2, a2))[:, 0]
    lo, hi = config.target_bounds
    return np.clip(batch.rewards + config.gamma * q2, lo, hi)


def critic_update(nets: AgentNets, batch: Batch, config: AgentConfig) -> float:
    """One Adam step on the critic. Returns the loss before the step."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    y = td_targets(nets, batch, config)
    o = nets.normalizer(batch.obs)
    q, trace = nx.forward(nets.critic, _critic_in(o, batch.actions))
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise nx.NumericError(f"critic loss is not finite (max |target| {np.max(np.abs(y))})")
    grad, _ = nx.backward(nets.critic, trace, (2.0 / len(err)) * err[:, None])
    nets.critic, nets.critic_opt = nx.adam_step(nets.critic, grad, nets.critic_opt, config.lr_critic)
    return loss


def q_filter(nets: AgentNets, obs_n: np.ndarray, demo_actions: np.ndarray,
             policy_actions: np.ndarray) -> np.ndarray:
    """True where the critic rates the demonstrated action strictly higher."""
    q_demo = nx.predict(nets.critic, _critic_in(obs_n, demo_actions))[:, 0]
    q_pi = nx.predict(nets.critic, _critic_in(obs_n, policy_actions))[:, 0]
    return q_demo > q_pi


def bc_loss(nets: AgentNets, demo_batch: Batch) -> tuple[float, np.ndarray]:
    """Q-filtered behavior-cloning loss over demonstration transitions only."""
    if not np.all(demo_batch.is_demo):
        raise ContractError("bc_loss expects demonstration transitions only")
    o = nets.normalizer(demo_batch.obs)
    pi = nx.predict(nets.actor, o)
    mask = q_filter(nets, o, demo_batch.actions, pi)
    gap = np.sum((pi - demo_batch.actions) ** 2, axis=1)
    return float(np.sum(gap * mask)), mask


def actor_loss_and_grad(nets: AgentNets, batch: Batch, lambda1: float, lambda2: float,
                        action_l2: float = 0.0):
    """Returns ``(loss, flat actor gradient, filter mask over the demo rows)``."""
    o = nets.normalizer(batch.obs)
    pi, a_trace = nx.forward(nets.actor, o)
    q, c_trace = nx.forward(nets.critic, _critic_in(o, pi))
    n = len(batch)
    loss = -lambda1 * float(np.mean(q))
    _, dq_din = nx.backward(nets.critic, c_trace, np.full((n, 1), -lambda1 / n))
    d_pi = dq_din[:, nets.obs_dim:]
    if action_l2 > 0:
        loss += lambda1 * action_l2 * float(np.mean(pi * pi))
        d_pi = d_pi + (2.0 * lambda1 * action_l2 / pi.size) * pi
    demo = np.asarray(batch.is_demo, dtype=bool)
    mask = np.zeros(0, dtype=bool)
    if lambda2 > 0 and demo.any():
        mask = q_filter(nets, o[demo], batch.actions[demo], pi[demo])
        gap = pi[demo] - batch.actions[demo]
        loss += lambda2 * float(np.sum(np.sum(gap * gap, axis=1) * mask))
        d_pi[demo] += 2.0 * lambda2 * gap * mask[:, None]
    grad, _ = nx.backward(nets.actor, a_trace, d_pi)
    return loss, grad, mask


def actor_update(nets: AgentNets, batch: Batch, config: AgentConfig) -> tuple[float, float]:
    """One Adam step on the actor; the critic is read only. Returns ``(loss, filter pass rate)``."""
    loss, grad, mask = actor_loss_and_grad(nets, batch, config.lambda1, config.lambda2, config.action_l2)
    if not np.isfinite(loss):
        raise nx.NumericError("actor loss is not finite")
    nets.actor, nets.actor_opt = nx.adam_step(nets.actor, grad, nets.actor_opt, config.lr_actor)
    return loss, (float(np.mean(mask)) if mask.size else float("nan"))


def update_targets(nets: AgentNets, tau: float) -> None:
    nets.target_actor = nx.soft_update(nets.target_actor, nets.actor, tau)
    nets.target_critic = nx.soft_update(nets.target_critic, nets.critic, tau)


# -- rollouts ----------------------------------------------------------------

@dataclass
class EpisodeResult:
    success: bool
    min_distances: np.ndarray  # per tracked vertex, over the episode
    steps: int
    trajectory: EpisodeTrajectory | None = None
    frames: list | None = None
    anytime: bool = False  # success held at some step, not necessarily the last


def run_episode(env: ClothEnv, policy, rng: np.random.Generator, record: bool = True,
                frames: bool = False) -> EpisodeResult:
    """Roll out ``policy(obs) -> action`` for exactly ``T`` steps.

    A policy with a ``reset(env)`` method is told about every new episode.
    """
    obs, goal = env.reset(rng)
    if hasattr(policy, "reset"):
        policy.reset(env)
    T = env.task.horizon
    observations = np.empty((T + 1, env.obs_dim))
    actions = np.empty((T, env.action_dim))
    achieved = np.empty((T + 1, env.goal_dim))
    rewards = np.empty(T)
    observations[0] = obs
    achieved[0] = env.achieved_goal()
    dmin = goal_distances(achieved[0], goal)
    snaps = [snapshot(env)] if frames else None
    res = None
    for t in range(T):
        a = np.asarray(policy(observations[t]), dtype=float)
        res = env.step(a)
        actions[t] = np.clip(a, -1.0, 1.0)
        observations[t + 1] = res.observation
        achieved[t + 1] = res.achieved_goal
        rewards[t] = res.reward
        dmin = np.minimum(dmin, goal_distances(res.achieved_goal, goal))
        if frames:
            snaps.append(snapshot(env))
    traj = EpisodeTrajectory(observations, actions, achieved, goal.copy(), rewards) if record else None
    return EpisodeResult(bool(res.is_success), dmin, T, traj, snaps, bool(np.any(rewards == 0.0)))


def snapshot(env: ClothEnv) -> dict:
    s = env.state
    return {
        "time": float(s.time),
        "positions": s.positions.tolist(),
        "manipulator": s.manip_pos.tolist(),
        "grasp": [int(g) for g in s.grasp],
    }


def her_observations(traj: EpisodeTrajectory, her: HERConfig, gs: slice,
                     rng: np.random.Generator) -> np.ndarray:
    """Episode observations with goals relabeled the way training batches see them."""
    T = traj.horizon
    t = np.arange(T)
    future = t + np.floor(rng.uniform(size=T) * (T - t)).astype(np.int64)
    relabel = rng.uniform(size=T) < her.relabel_probability
    obs = traj.observations[:T].copy()
    obs[relabel, gs] = traj.achieved[future[relabel] + 1]
    return obs


# -- training loop -------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    success_rate: float
    critic_loss: float
    actor_loss: float
    filter_pass_rate: float
    episodes: int
    train_success_rate: float
    anytime_success_rate: float = float("nan")


@dataclass
class TrainStats:
    epochs: list = field(default_factory=list)

    @property
    def success(self) -> np.ndarray:
        return np.array([e.success_rate for e in self.epochs])

    def final_median(self, last: int = 10) -> float:
        s = self.success
        return float(np.median(s[-last:])) if s.size else float("nan")

    def append(self, e: EpochStats) -> None:
        self.epochs.append(e)


CSV_FIELDS = ["epoch", "success_rate", "critic_loss", "actor_loss", "filter_pass_rate",
              "episodes", "train_success_rate", "anytime_success_rate"]


def write_stats_row(path: Path, e: EpochStats, header: bool) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if header:
            w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(e).items()})


def read_stats(path) -> TrainStats:
    st = TrainStats()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            st.append(EpochStats(int(row["epoch"]), float(row["success_rate"]),
                                 float(row["critic_loss"]), float(row["actor_loss"]),
                                 float(row["filter_pass_rate"]), int(row["episodes"]),
                                 float(row["train_success_rate"]),
                                 float(row.get("anytime_success_rate") or "nan")))
    return st


@dataclass
class Buffers:
    main: ReplayBuffer
    demo: ReplayBuffer | None = None


def store(nets: AgentNets, buf: ReplayBuffer, traj: EpisodeTrajectory, config: AgentConfig,
          rng: np.random.Generator) -> None:
    buf.store_episode(traj)
    nets.normalizer.update(her_observations(traj, config.her, buf.goal_slice, rng))


def _guarded_episode(env: ClothEnv, policy, rng: np.random.Generator, record: bool):
    """A simulator blow-up ends the episode as a failure and nothing is stored."""
    try:
        return run_episode(env, policy, rng, record=record)
    except SimulationBlowUp as exc:
        log.warning("episode aborted: %s", exc)
        return None


def train_cycle(env: ClothEnv, nets: AgentNets, buffers: Buffers, config: AgentConfig,
                rng: np.random.Generator, epoch: int = 0) -> EpochStats:
    """One epoch: collect, update, evaluate."""
    if config.n_demo > 0 and (buffers.demo is None or len(buffers.demo) == 0):
        raise ContractError("demo buffer must be filled when n_demo > 0")
    explore = lambda o: select_action(nets, o, config.sigma, rng, explore=True)  # noqa: E731
    greedy = lambda o: select_action(nets, o, 0.0, None, explore=False)  # noqa: E731
    train_wins = 0
    for _ in range(config.train_episodes):
        ep = _guarded_episode(env, explore, rng, True)
        if ep is not None:
            train_wins += ep.success
            store(nets, buffers.main, ep.trajectory, config, rng)
    c_losses, a_losses, passes = [], [], []
    threshold = env.task.threshold
    for u in range(config.updates_per_epoch):
        batch = sample_her_batch(buffers.main, buffers.demo, config.batch_size, config.n_demo,
                                 config.her, threshold, rng)
        c_losses.append(critic_update(nets, batch, config))
        a_loss, p = actor_update(nets, batch, config)
        a_losses.append(a_loss)
        passes.append(p)
        if (u + 1) % config.target_every == 0:
            update_targets(nets, config.tau)
    tests = [_guarded_episode(env, greedy, rng, False) for _ in range(config.test_episodes)]
    wins = sum(r.success for r in tests if r is not None)
    nanmean = lambda v: float(np.nanmean(v)) if v and not np.all(np.isnan(v)) else float("nan")  # noqa: E731
    return EpochStats(
        epoch=epoch,
        success_rate=wins / config.test_episodes if config.test_episodes else float("nan"),
        critic_loss=nanmean(c_losses),
        actor_loss=nanmean(a_losses),
        filter_pass_rate=nanmean(passes),
        episodes=config.train_episodes,
        train_success_rate=train_wins / config.train_episodes if config.train_episodes else float("nan"),
        anytime_success_rate=(float(np.mean([r is not None and r.anytime for r in tests]))
                              if tests else float("nan")),
    )


def setup(env: ClothEnv, config: AgentConfig, rng: np.random.Generator,
          demos: list | None = None) -> tuple[AgentNets, Buffers]:
    """Networks, buffers and (when demos are used) a filled demo buffer."""
    nets = make_nets(env.obs_dim, env.action_dim, config, rng)
    buffers = Buffers(make_buffer(env, config.buffer_episodes))
    if config.n_demo > 0:
        if demos is None:
            from .demos import generate_demos

            demos = generate_demos(env.task, config.demo_episodes, rng, env.n_points,
                                   sim_config=env.sim_config)
        buffers.demo = make_buffer(env, len(demos), demo=True)
        for d in demos:
            store(nets, buffers.demo, d, config, rng)
    return nets, buffers


def train(env: ClothEnv, config: AgentConfig, seed: int, out_dir=None, demos: list | None = None,
          checkpoint_every: int = 0) -> TrainStats:
    """Full run; appends one CSV row per epoch and checkpoints into ``out_dir``."""
    rng = np.random.default_rng(seed)
    nets, buffers = setup(env, config, rng, demos)
    stats = TrainStats()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.csv").unlink(missing_ok=True)
    for epoch in range(config.epochs):
        e = train_cycle(env, nets, buffers, config, rng, epoch)
        stats.append(e)
        log.info("epoch %d success %.2f (anytime %.2f) train %.2f critic %.4g actor %.4g filter %.2f",
                 epoch, e.success_rate, e.anytime_success_rate, e.train_success_rate, e.critic_loss,
                 e.actor_loss, e.filter_pass_rate)
        if out is not None:
            write_stats_row(out / "stats.csv", e, header=epoch == 0)
            nets.save(out / "latest.ckpt")
            if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                nets.save(out / f"epoch_{epoch + 1:04d}.ckpt")
    return stats


