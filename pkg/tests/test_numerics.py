import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncloth import numerics as nx


def fd_gradient(params, x, w_out, h=1e-5):
    """Central differences of L = sum(w_out * f(x)) w.r.t. theta and x."""
    base = params.theta.copy()
    g_theta = np.empty_like(base)
    for i in range(base.size):
        for sgn, store in ((1, "p"), (-1, "m")):
            t = base.copy()
            t[i] += sgn * h
            val = np.sum(w_out * nx.predict(params.with_theta(t), x))
            if store == "p":
                lp = val
            else:
                lm = val
        g_theta[i] = (lp - lm) / (2 * h)
    g_x = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g_x[idx] = (np.sum(w_out * nx.predict(params, xp)) - np.sum(w_out * nx.predict(params, xm))) / (2 * h)
    return g_theta, g_x


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


class TestInit:
    def test_deterministic(self):
        a = nx.mlp_init([2, 3, 1], rng=np.random.default_rng(7))
        b = nx.mlp_init([2, 3, 1], rng=np.random.default_rng(7))
        assert np.array_equal(a.theta, b.theta)

    def test_shapes_and_bounds(self):
        p = nx.mlp_init([58, 256, 256, 256, 4], "relu", "tanh", np.random.default_rng(0), final_scale=1e-2)
        assert [w.shape for w in p.weights] == [(58, 256), (256, 256), (256, 256), (256, 4)]
        assert all(np.all(b == 0) for b in p.biases)
        assert np.max(np.abs(p.weights[0])) <= 1 / np.sqrt(58)
        assert np.max(np.abs(p.weights[-1])) <= 1e-2 / np.sqrt(256)

    @pytest.mark.parametrize("sizes", [[1], [], [3, 0, 2], [2, -1]])
    def test_bad_sizes(self, sizes):
        with pytest.raises(nx.ConfigError):
            nx.mlp_init(sizes, rng=np.random.default_rng(0))

    def test_views_share_storage(self):
        p = nx.mlp_init([3, 4, 2], rng=np.random.default_rng(0))
        p.weights[0][0, 0] = 123.0
        assert p.theta[0] == 123.0


class TestForward:
    def test_zero_net(self):
        p = nx.ParamSet((3, 4, 2), np.zeros(nx.n_params([3, 4, 2])))
        out, _ = nx.forward(p, np.ones(3))
        assert np.array_equal(out, np.zeros(2))

    def test_tanh_saturation(self):
        p = nx.ParamSet((1, 1), np.array([1e6, 1e6]), output_activation="tanh")
        out, _ = nx.forward(p, np.array([[1e3], [-1e3]]))
        assert np.all(np.abs(out) <= 1.0)

    def test_hand_computed_121(self):
        # x=2: h = relu([1*2 + 0.5, -1*2 + 0.1]) = [2.5, 0]; y = 3*2.5 - 2*0 + 0.25
        p = nx.ParamSet((1, 2, 1), np.zeros(7))
        p.weights[0][...] = [[1.0, -1.0]]
        p.biases[0][...] = [0.5, 0.1]
        p.weights[1][...] = [[3.0], [-2.0]]
        p.biases[1][...] = [0.25]
        out, tr = nx.forward(p, np.array([2.0]))
        assert out[0] == pytest.approx(7.75)
        assert tr.depth == 2

    def test_shape_error(self):
        p = nx.mlp_init([3, 2], rng=np.random.default_rng(0))
        with pytest.raises(nx.ShapeError):
            nx.forward(p, np.ones(4))

    def test_predict_matches_forward(self):
        p = nx.mlp_init([5, 7, 3], "relu", "tanh", np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=(4, 5))
        assert np.array_equal(nx.forward(p, x)[0], nx.predict(p, x))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_tanh_output_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p = nx.mlp_init([4, 8, 3], "relu", "tanh", rng)
        p.theta[:] *= rng.uniform(1, 1e3)
        out = nx.predict(p, rng.normal(scale=100, size=(5, 4)))
        assert np.all(np.abs(out) <= 1.0)


class TestBackward:
    def test_linear_weight_grad_equals_input(self):
        p = nx.ParamSet((3, 1), np.array([0.2, -0.4, 0.7, 0.1]))
        x = np.array([1.5, -2.0, 0.5])
        _, tr = nx.forward(p, x)
        g, gx = nx.backward(p, tr, np.array([1.0]))
        assert np.allclose(g[:3], x) and g[3] == 1.0
        assert np.allclose(gx, p.weights[0][:, 0])

    def test_zero_output_gradient(self):
        p = nx.mlp_init([3, 5, 2], rng=np.random.default_rng(0))
        _, tr = nx.forward(p, np.ones((2, 3)))
        g, gx = nx.backward(p, tr, np.zeros((2, 2)))
        assert not g.any() and not gx.any()

    def test_stale_trace(self):
        p = nx.mlp_init([3, 5, 2], rng=np.random.default_rng(0))
        q = nx.mlp_init([3, 5, 5, 2], rng=np.random.default_rng(0))
        _, tr = nx.forward(p, np.ones(3))
        with pytest.raises(nx.ShapeError):
            nx.backward(q, tr, np.ones(2))

    def test_finite_difference_100_nets(self):
        """Random small nets, all activation mixes, batched inputs.

        Central differences are meaningless across a ReLU kink, so draws with
        a pre-activation within 10h of zero are redrawn.
        """
        rng = np.random.default_rng(1234)
        worst, case = 0.0, 0
        while case < 100:
            depth = rng.integers(1, 4)
            sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 6)) for _ in range(depth)] + [int(rng.integers(1, 4))]
            hid = ["relu", "tanh", "identity"][case % 3]
            out = ["identity", "tanh"][case % 2]
            p = nx.mlp_init(sizes, hid, out, rng)
            for b in p.biases:
                b[:] = rng.normal(scale=0.3, size=b.shape)
            x = rng.normal(size=(int(rng.integers(1, 4)), sizes[0]))
            w_out = rng.normal(size=(x.shape[0], sizes[-1]))
            _, tr = nx.forward(p, x)
            if hid == "relu" and min(np.min(np.abs(z)) for z in tr.pre[:-1]) < 1e-4:
                continue
            case += 1
            g, gx = nx.backward(p, tr, w_out)
            fg, fx = fd_gradient(p, x, w_out)
            worst = max(worst, rel_err(g, fg), rel_err(gx, fx))
        assert worst <= 1e-4, worst


class TestAdam:
    def test_zero_gradient(self):
        p = nx.mlp_init([2, 3], rng=np.random.default_rng(0))
        s = nx.AdamState.zeros_like(p)
        p2, s2 = nx.adam_step(p, np.zeros(p.size), s, 1e-3)
        assert np.array_equal(p2.theta, p.theta) and s2.step == 1

    def test_first_step_closed_form(self):
        # m1 = (1-b1) g, v1 = (1-b2) g^2, bias-corrected ratio = g / (|g| + eps)
        p = nx.ParamSet((2, 2), np.zeros(6))
        g = np.array([0.5, -2.0, 1e-3, 3.0, -1e-6, 7.0])
        lr = 1e-3
        p2, s2 = nx.adam_step(p, g, nx.AdamState.zeros_like(p), lr)
        expected = -lr * g / (np.abs(g) + 1e-8)
        assert np.allclose(p2.theta, expected, rtol=1e-12, atol=0)
        assert np.allclose(np.abs(p2.theta[np.abs(g) > 1e-4]), lr, rtol=1e-4)

    def test_descent_direction(self):
        p = nx.ParamSet((1, 1), np.zeros(2))
        s = nx.AdamState.zeros_like(p)
        g = np.array([0.3, -0.7])
        for _ in range(50):
            p, s = nx.adam_step(p, g, s, 1e-2)
        assert p.theta[0] < 0 < p.theta[1] and s.step == 50

    def test_non_finite_gradient(self):
        p = nx.ParamSet((1, 1), np.zeros(2))
        with pytest.raises(nx.NumericError):
            nx.adam_step(p, np.array([np.nan, 0.0]), nx.AdamState.zeros_like(p), 1e-3)


class TestSoftUpdate:
    def test_endpoints_and_midpoint(self):
        t = nx.ParamSet((2, 1), np.zeros(3))
        o = nx.ParamSet((2, 1), np.full(3, 2.0))
        assert np.array_equal(nx.soft_update(t, o, 1.0).theta, o.theta)
        assert np.array_equal(nx.soft_update(t, o, 0.0).theta, t.theta)
        assert np.array_equal(nx.soft_update(t, o, 0.5).theta, np.ones(3))

    @pytest.mark.parametrize("tau", [-0.1, 1.5])
    def test_bad_tau(self, tau):
        t = nx.ParamSet((2, 1), np.zeros(3))
        with pytest.raises(nx.ConfigError):
            nx.soft_update(t, t, tau)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
    def test_elementwise_formula_exact(self, seed, tau):
        rng = np.random.default_rng(seed)
        t = nx.mlp_init([3, 4, 2], rng=rng)
        o = nx.mlp_init([3, 4, 2], rng=rng)
        got = nx.soft_update(t, o, tau).theta
        assert np.array_equal(got, (1.0 - tau) * t.theta + tau * o.theta)
        # the blended net is never further from the online net than before
        assert np.max(np.abs(got - o.theta)) <= np.max(np.abs(t.theta - o.theta))


def test_determinism_after_training_steps():
    def run():
        rng = np.random.default_rng(5)
        p = nx.mlp_init([4, 8, 8, 2], "relu", "tanh", rng)
        s = nx.AdamState.zeros_like(p)
        x = rng.normal(size=(16, 4))
        y = rng.uniform(-0.5, 0.5, size=(16, 2))
        for _ in range(20):
            out, tr = nx.forward(p, x)
            g, _ = nx.backward(p, tr, 2 * (out - y) / len(x))
            p, s = nx.adam_step(p, g, s, 1e-2)
        return p.theta

    assert np.array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    a = nx.mlp_init([5, 6, 2], "relu", "tanh", rng)
    c = nx.mlp_init([7, 6, 1], "relu", "identity", rng)
    arr = rng.normal(size=(2, 3))
    path = tmp_path / "x.ckpt"
    nx.save_checkpoint(path, {"actor": a, "critic": c, "stats": arr, "scalar": np.float64(2.5)})
    got = nx.load_checkpoint(path)
    assert got["actor"].layer_sizes == (5, 6, 2) and got["actor"].output_activation == "tanh"
    assert np.array_equal(got["actor"].theta, a.theta)
    assert np.array_equal(got["critic"].theta, c.theta)
    assert np.array_equal(got["stats"], arr)
    assert got["scalar"] == 2.5
    raw = path.read_bytes()
    assert raw[:4] == b"DCKP" and int.from_bytes(raw[4:8], "little") == nx.VERSION


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"nope")
    with pytest.raises(nx.ShapeError):
        nx.load_checkpoint(path)
    nx.save_checkpoint(path, {"a": nx.ParamSet((2, 1), np.zeros(3))})
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(nx.ShapeError):
        nx.load_checkpoint(path)
