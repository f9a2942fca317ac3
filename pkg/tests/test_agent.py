from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncloth import agent as ag
from dyncloth import numerics as nx
from dyncloth.demos import generate_demos
from dyncloth.envs import ClothEnv
from dyncloth.replay import Batch

OBS, ACT = 3, 2


def tiny_config(**kw):
    base = dict(hidden=(5,), batch_size=8, n_demo=2, lambda1=0.5, lambda2=0.25, norm_clip=1e9)
    base.update(kw)
    return ag.AgentConfig(**base)


def tiny_nets(seed=0, **kw):
    return ag.make_nets(OBS, ACT, tiny_config(**kw), np.random.default_rng(seed))


def make_batch(rng, n=8, n_demo=2, rewards=None):
    is_demo = np.zeros(n, dtype=bool)
    is_demo[n - n_demo:] = True
    return Batch(
        obs=rng.normal(size=(n, OBS)),
        actions=rng.uniform(-1, 1, size=(n, ACT)),
        rewards=rng.choice([-1.0, 0.0], size=n) if rewards is None else rewards,
        next_obs=rng.normal(size=(n, OBS)),
        goals=np.zeros((n, 3)),
        achieved=np.zeros((n, 3)),
        done=np.zeros(n, dtype=bool),
        is_demo=is_demo,
        relabeled=np.zeros(n, dtype=bool),
    )


def linear_critic(w):
    """Q(o, a) = w . [o, a] exactly (identity output, no hidden layer)."""
    w = np.asarray(w, dtype=float)
    return nx.ParamSet((OBS + ACT, 1), np.concatenate([w, [0.0]]))


class TestSelectAction:
    def test_sigma_zero_and_test_mode(self):
        nets = tiny_nets()
        o = np.array([0.3, -0.1, 2.0])
        a1 = ag.select_action(nets, o, 0.0, np.random.default_rng(0))
        a2 = ag.select_action(nets, o, 0.0, np.random.default_rng(1))
        a3 = ag.select_action(nets, o, 0.7, None, explore=False)
        a4 = ag.select_action(nets, o, 0.7, None, explore=False)
        assert np.array_equal(a1, a2) and np.array_equal(a3, a4) and np.array_equal(a1, a3)

    def test_huge_sigma_clipped(self):
        nets = tiny_nets()
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = ag.select_action(nets, rng.normal(size=OBS), 1e6, rng)
            assert np.all(np.abs(a) <= 1.0)

    def test_shape(self):
        with pytest.raises(nx.ShapeError):
            ag.select_action(tiny_nets(), np.zeros(OBS + 1), 0.1, np.random.default_rng(0))


class TestCritic:
    def test_zero_q_zero_reward(self):
        nets = tiny_nets()
        for p in (nets.critic, nets.target_critic):
            p.theta[:] = 0.0
        b = make_batch(np.random.default_rng(0), rewards=np.zeros(8))
        assert ag.critic_update(nets, b, tiny_config()) == 0.0

    def test_hand_computed_single_transition(self):
        cfg = tiny_config(gamma=0.9, n_demo=0, lambda2=0.0)
        nets = tiny_nets(n_demo=0, lambda2=0.0)
        nets.critic = linear_critic([0.1, 0.2, -0.3, 0.5, -0.4])
        nets.target_critic = linear_critic([0.0, 1.0, 0.0, 2.0, 0.0])
        nets.target_actor = nx.ParamSet((OBS, ACT), np.array([1, 0, 0, 0, 0, 0, 0.0, 0.0]),
                                        output_activation="tanh")
        nets.actor = nets.target_actor.copy()
        nets.critic_opt = nx.AdamState.zeros_like(nets.critic)
        nets.actor_opt = nx.AdamState.zeros_like(nets.actor)
        b = make_batch(np.random.default_rng(0), n=1, n_demo=0, rewards=np.array([-1.0]))
        b.obs[0] = [1.0, 2.0, 3.0]
        b.actions[0] = [0.5, -0.5]
        b.next_obs[0] = [0.2, -1.5, 0.0]
        # target actor: a' = tanh([0.2, 0]) ; Q'(o', a') = -1.5 + 2 * tanh(0.2)
        q_next = -1.5 + 2 * np.tanh(0.2)
        y = min(0.0, max(-10.0, -1.0 + 0.9 * q_next))
        q = 0.1 + 0.4 - 0.9 + 0.25 + 0.2
        loss = ag.critic_update(nets, b, cfg)
        assert loss == pytest.approx((q - y) ** 2, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.5, 0.999), st.floats(1.0, 1e4))
    def test_target_clamp(self, seed, gamma, scale):
        cfg = tiny_config(gamma=gamma)
        nets = tiny_nets(seed)
        nets.target_critic.theta[:] *= scale
        nets.target_critic.biases[-1][:] = np.random.default_rng(seed).normal(scale=scale)
        y = ag.td_targets(nets, make_batch(np.random.default_rng(seed), n=64), cfg)
        assert np.all(y >= -1.0 / (1.0 - gamma)) and np.all(y <= 0.0)

    def test_critic_step_reduces_loss(self):
        cfg = tiny_config(lr_critic=1e-2)
        nets = tiny_nets()
        b = make_batch(np.random.default_rng(3))
        losses = [ag.critic_update(nets, b, cfg) for _ in range(30)]
        assert losses[-1] < losses[0]


def demo_batch(rng, n=4):
    b = make_batch(rng, n=n, n_demo=n)
    return b


class TestBC:
    def test_perfect_imitation(self):
        nets = tiny_nets()
        b = demo_batch(np.random.default_rng(0))
        b.actions = nx.predict(nets.actor, nets.normalizer(b.obs))
        loss, mask = ag.bc_loss(nets, b)
        assert loss == 0.0

    def test_q_filter_truth_table(self):
        # Q = sum of the action entries: demo passes iff sum(a_demo) > sum(pi(o))
        nets = tiny_nets()
        nets.critic = linear_critic([0, 0, 0, 1.0, 1.0])
        rng = np.random.default_rng(1)
        b = demo_batch(rng, n=64)
        pi = nx.predict(nets.actor, nets.normalizer(b.obs))
        loss, mask = ag.bc_loss(nets, b)
        expect = b.actions.sum(axis=1) > pi.sum(axis=1)
        assert np.array_equal(mask, expect) and 0 < expect.sum() < 64
        gap = np.sum((pi - b.actions) ** 2, axis=1)
        assert loss == pytest.approx(np.sum(gap[expect]), rel=1e-12)

    def test_all_filtered_out(self):
        nets = tiny_nets()
        nets.critic = linear_critic([0, 0, 0, 1.0, 1.0])
        b = demo_batch(np.random.default_rng(2))
        b.actions[:] = -1.0  # lowest possible Q; policy output is always >= it
        loss, mask = ag.bc_loss(nets, b)
        assert loss == 0.0 and not mask.any()

    def test_equal_q_is_filtered(self):
        nets = tiny_nets()
        nets.critic = linear_critic([0, 0, 0, 0, 0])  # Q identical for every action
        loss, mask = ag.bc_loss(nets, demo_batch(np.random.default_rng(2)))
        assert loss == 0.0 and not mask.any()

    def test_single_demo_passing(self):
        nets = tiny_nets()
        nets.critic = linear_critic([0, 0, 0, 1.0, 0.0])
        b = demo_batch(np.random.default_rng(3), n=1)
        pi = nx.predict(nets.actor, nets.normalizer(b.obs))[0]
        b.actions[0] = [1.0, -0.3]
        assert pi[0] < 1.0
        loss, mask = ag.bc_loss(nets, b)
        assert mask.tolist() == [True]
        assert loss == pytest.approx((pi[0] - 1.0) ** 2 + (pi[1] + 0.3) ** 2, rel=1e-12)

    def test_rejects_non_demo(self):
        b = make_batch(np.random.default_rng(0))
        with pytest.raises(ag.ContractError):
            ag.bc_loss(tiny_nets(), b)


class TestActor:
    def fd_check(self, nets, b, l1, l2, h=1e-6, l2_act=0.0):
        loss, grad, _ = ag.actor_loss_and_grad(nets, b, l1, l2, l2_act)
        base = nets.actor.theta.copy()
        fd = np.empty_like(base)
        for i in range(base.size):
            vals = []
            for s in (1, -1):
                t = base.copy()
                t[i] += s * h
                nets.actor = nets.actor.with_theta(t)
                vals.append(ag.actor_loss_and_grad(nets, b, l1, l2, l2_act)[0])
            fd[i] = (vals[0] - vals[1]) / (2 * h)
        nets.actor = nets.actor.with_theta(base)
        return grad, fd

    def test_combined_gradient_matches_fd(self):
        nets = tiny_nets(4)
        for b_ in nets.critic.biases + nets.actor.biases:
            b_[:] = np.random.default_rng(5).normal(scale=0.3, size=b_.shape)
        nets.actor.weights[-1][:] *= 50  # move the actor away from the near-zero init
        b = make_batch(np.random.default_rng(6), n=8, n_demo=4)
        for l2_act in (0.0, 1.5):
            grad, fd = self.fd_check(nets, b, 0.5, 0.25, l2_act=l2_act)
            assert np.max(np.abs(grad - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_action_penalty_value(self):
        nets = tiny_nets(4)
        nets.critic = linear_critic([0, 0, 0, 0.0, 0.0])  # Q == 0
        b = make_batch(np.random.default_rng(7), n=8)
        pi = nx.predict(nets.actor, nets.normalizer(b.obs))
        loss, _, _ = ag.actor_loss_and_grad(nets, b, 0.5, 0.0, 2.0)
        assert loss == pytest.approx(0.5 * 2.0 * np.mean(pi ** 2), rel=1e-12)

    def test_lambda2_zero_is_ddpg(self):
        nets = tiny_nets(7)
        b = make_batch(np.random.default_rng(8), n=8, n_demo=3)
        _, g_demo_ignored, mask = ag.actor_loss_and_grad(nets, b, 1.0, 0.0)
        # textbook DDPG actor gradient: -(1/N) sum dQ/da * dpi/dtheta
        o = nets.normalizer(b.obs)
        pi, tr = nx.forward(nets.actor, o)
        _, ctr = nx.forward(nets.critic, np.concatenate([o, pi], axis=1))
        _, dq = nx.backward(nets.critic, ctr, np.full((8, 1), -1.0 / 8))
        g_ref, _ = nx.backward(nets.actor, tr, dq[:, OBS:])
        assert np.array_equal(g_demo_ignored, g_ref) and mask.size == 0
        b.is_demo[:] = False
        _, g_no_demo, _ = ag.actor_loss_and_grad(nets, b, 1.0, 0.0)
        assert np.array_equal(g_no_demo, g_ref)

    def test_lambda1_zero_perfect_imitation_no_update(self):
        cfg = tiny_config(lambda1=0.0)
        nets = tiny_nets(lambda1=0.0)
        b = make_batch(np.random.default_rng(9))
        b.actions = nx.predict(nets.actor, nets.normalizer(b.obs))
        before = nets.actor.theta.copy()
        ag.actor_update(nets, b, cfg)
        assert np.array_equal(nets.actor.theta, before)

    def test_critic_untouched(self):
        nets = tiny_nets()
        before = nets.critic.theta.copy()
        ag.actor_update(nets, make_batch(np.random.default_rng(0)), tiny_config())
        assert np.array_equal(nets.critic.theta, before)


def test_target_drift_non_increasing():
    nets = tiny_nets()
    cfg = tiny_config(lr_critic=0.05, lr_actor=0.05)
    rng = np.random.default_rng(0)
    for _ in range(5):
        b = make_batch(rng)
        ag.critic_update(nets, b, cfg)
        ag.actor_update(nets, b, cfg)
        before = (np.max(np.abs(nets.target_actor.theta - nets.actor.theta)),
                  np.max(np.abs(nets.target_critic.theta - nets.critic.theta)))
        ag.update_targets(nets, cfg.tau)
        after = (np.max(np.abs(nets.target_actor.theta - nets.actor.theta)),
                 np.max(np.abs(nets.target_critic.theta - nets.critic.theta)))
        assert after[0] <= before[0] and after[1] <= before[1]


def test_normalizer():
    n = ag.Normalizer(2, eps=0.01, clip=5.0)
    x = np.random.default_rng(0).normal([3.0, -1.0], [2.0, 0.001], size=(1000, 2))
    n.update(x)
    assert np.allclose(n.mean, x.mean(axis=0))
    assert n.std[0] == pytest.approx(x.std(axis=0)[0]) and n.std[1] == 0.01
    assert np.all(np.abs(n(x * 100)) <= 5.0)
    m = n.copy()
    assert np.array_equal(m(x), n(x))


def test_config_validation():
    for kw in (dict(gamma=0.0), dict(tau=1.5), dict(lambda1=-1.0), dict(n_demo=300),
               dict(lambda2=0.1, n_demo=0)):
        with pytest.raises(nx.ConfigError):
            ag.AgentConfig(**kw)


def small_run_config(**kw):
    base = dict(hidden=(16, 16), batch_size=16, n_demo=4, updates_per_epoch=3, train_episodes=2,
                test_episodes=1, demo_episodes=2, epochs=1)
    base.update(kw)
    return ag.AgentConfig(**base)


@pytest.fixture(scope="module")
def diag_env_and_demos():
    env = ClothEnv("diagonal", n_points=4)
    demos = generate_demos(env.task, 2, np.random.default_rng(0), 4)
    return env, demos


def test_one_epoch_determinism(diag_env_and_demos, tmp_path):
    env, demos = diag_env_and_demos
    cfg = small_run_config()

    def run(out):
        rng = np.random.default_rng(42)
        nets, bufs = ag.setup(env, cfg, rng, demos)
        e = ag.train_cycle(env, nets, bufs, cfg, rng)
        return e, nets

    e1, n1 = run(tmp_path / "a")
    e2, n2 = run(tmp_path / "b")
    assert e1 == e2
    for name in ("actor", "critic", "target_actor", "target_critic"):
        assert np.array_equal(getattr(n1, name).theta, getattr(n2, name).theta)


def test_zero_updates_leaves_nets(diag_env_and_demos):
    env, demos = diag_env_and_demos
    cfg = small_run_config(updates_per_epoch=0)
    rng = np.random.default_rng(1)
    nets, bufs = ag.setup(env, cfg, rng, demos)
    before = nets.actor.theta.copy(), nets.critic.theta.copy()
    e = ag.train_cycle(env, nets, bufs, cfg, rng)
    assert np.array_equal(nets.actor.theta, before[0]) and np.array_equal(nets.critic.theta, before[1])
    assert 0.0 <= e.success_rate <= 1.0 and len(bufs.main) == cfg.train_episodes


def test_demo_buffer_required():
    env = ClothEnv("diagonal", n_points=4)
    cfg = small_run_config()
    rng = np.random.default_rng(0)
    nets = ag.make_nets(env.obs_dim, env.action_dim, cfg, rng)
    from dyncloth.replay import make_buffer

    with pytest.raises(ag.ContractError):
        ag.train_cycle(env, nets, ag.Buffers(make_buffer(env, 5)), cfg, rng)


def test_train_writes_csv_and_checkpoint(diag_env_and_demos, tmp_path):
    env, demos = diag_env_and_demos
    cfg = small_run_config(epochs=2)
    stats = ag.train(env, cfg, 3, tmp_path, demos=demos, checkpoint_every=1)
    assert (tmp_path / "epoch_0002.ckpt").exists()
    back = ag.read_stats(tmp_path / "stats.csv")
    assert back.epochs == stats.epochs
    header = (tmp_path / "stats.csv").read_text().splitlines()[0]
    assert header == ",".join(ag.CSV_FIELDS)
    nets = ag.AgentNets.load(tmp_path / "latest.ckpt", cfg)
    assert nets.obs_dim == env.obs_dim and nets.normalizer.count > 0


def test_ablation_wiring_equivalence():
    """With lambda2 = 0, demo flags in the batch do not change the update."""
    cfg_a = tiny_config(lambda1=1.0, lambda2=0.0, n_demo=0)
    b = make_batch(np.random.default_rng(0), n=8, n_demo=3)
    nets_a, nets_b = tiny_nets(1, lambda2=0.0, n_demo=0), tiny_nets(1, lambda2=0.0, n_demo=0)
    b2 = replace(b, is_demo=np.zeros(8, dtype=bool))
    ag.critic_update(nets_a, b, cfg_a)
    ag.actor_update(nets_a, b, cfg_a)
    ag.critic_update(nets_b, b2, cfg_a)
    ag.actor_update(nets_b, b2, cfg_a)
    assert np.array_equal(nets_a.actor.theta, nets_b.actor.theta)
    assert np.array_equal(nets_a.critic.theta, nets_b.critic.theta)
