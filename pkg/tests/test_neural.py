import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanemoe.neural import (
    AdamState,
    MissingCacheError,
    MlpNet,
    NonFiniteError,
    SchemaMismatchError,
    ShapeError,
    adam_step,
    clip_by_global_norm,
    global_norm,
    load_checkpoint,
    save_checkpoint,
)


def reference_forward(weights, biases, x):
    """Straightforward loop re-implementation: one unit at a time."""
    h = [list(row) for row in x]
    for k, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for row in h:
            z = [sum(row[i] * w[i][j] for i in range(len(row))) + b[j] for j in range(len(b))]
            out.append([np.tanh(v) for v in z] if k < len(weights) - 1 else z)
        h = out
    return np.array(h)


def fd_gradient(net, x, g_out, h=1e-5):
    flat = net.get_flat()
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        p = flat.copy()
        p[k] += h
        net.set_flat(p)
        up = (net(x) * g_out).sum()
        p[k] -= 2 * h
        net.set_flat(p)
        down = (net(x) * g_out).sum()
        grad[k] = (up - down) / (2 * h)
    net.set_flat(flat)
    return grad


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


class TestForward:
    def test_zero_net(self):
        net = MlpNet([4, 3, 2])
        net.set_flat(np.zeros(net.parameter_count))
        assert np.array_equal(net(np.ones((5, 4))), np.zeros((5, 2)))

    def test_single_affine(self):
        net = MlpNet([1, 1])
        net.weights[0][...] = 2.5
        net.biases[0][...] = -0.7
        assert net(np.array([[2.0]]))[0, 0] == pytest.approx(2.5 * 2.0 - 0.7)

    @pytest.mark.parametrize("sizes", [[33, 16, 16, 3], [57, 64, 64, 4], [5, 1]])
    def test_matches_reference_implementation(self, sizes):
        rng = np.random.default_rng(0)
        net = MlpNet(sizes, rng)
        for b in net.biases:
            b[...] = rng.normal(size=b.shape)
        x = rng.normal(size=(4, sizes[0]))
        expected = reference_forward([w.tolist() for w in net.weights], [b.tolist() for b in net.biases], x.tolist())
        assert np.allclose(net(x), expected, atol=1e-12, rtol=0)

    def test_shape_errors(self):
        net = MlpNet([3, 2])
        with pytest.raises(ShapeError):
            net(np.zeros((1, 4)))
        with pytest.raises(ShapeError):
            MlpNet([3])

    def test_non_finite(self):
        net = MlpNet([2, 2])
        with pytest.raises(NonFiniteError):
            net(np.array([[np.inf, 0.0]]))

    def test_orthogonal_init(self):
        net = MlpNet([33, 64, 64, 2], np.random.default_rng(1), output_gain=0.01)
        w = net.weights[1]
        assert np.allclose(w.T @ w, 2.0 * np.eye(64), atol=1e-10)
        assert np.allclose(net.weights[2].T @ net.weights[2], 1e-4 * np.eye(2), atol=1e-12)

    def test_seeded_init_is_deterministic(self):
        a = MlpNet([8, 4, 2], np.random.default_rng(5))
        b = MlpNet([8, 4, 2], np.random.default_rng(5))
        assert np.array_equal(a.get_flat(), b.get_flat())


class TestBackward:
    @pytest.mark.parametrize("sizes", [[33, 16, 16, 3], [57, 8, 8, 4], [57, 8, 1], [33, 8, 8, 2]])
    def test_finite_differences(self, sizes):
        rng = np.random.default_rng(2)
        net = MlpNet(sizes, rng)
        for b in net.biases:
            b[...] = 0.1 * rng.normal(size=b.shape)
        x = rng.normal(size=(6, sizes[0]))
        g_out = rng.normal(size=(6, sizes[-1]))
        _, cache = net.forward(x)
        analytic = np.concatenate([g.ravel() for g in net.backward(cache, g_out)])
        numeric = fd_gradient(net, x, g_out)
        assert rel_err(analytic, numeric).max() < 1e-4

    def test_zero_output_grad(self):
        net = MlpNet([5, 4, 2])
        _, cache = net.forward(np.ones((3, 5)))
        assert all(not g.any() for g in net.backward(cache, np.zeros((3, 2))))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        net = MlpNet([6, 5, 3], rng)
        _, cache = net.forward(rng.normal(size=(4, 6)))
        g1, g2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        both = net.backward(cache, g1 + g2)
        parts = [a + b for a, b in zip(net.backward(cache, g1), net.backward(cache, g2))]
        assert all(np.allclose(a, b, atol=1e-12) for a, b in zip(both, parts))

    def test_missing_cache(self):
        with pytest.raises(MissingCacheError):
            MlpNet([2, 2]).backward(None, np.zeros((1, 2)))

    def test_grad_shape_mismatch(self):
        net = MlpNet([2, 2])
        _, cache = net.forward(np.zeros((1, 2)))
        with pytest.raises(ShapeError):
            net.backward(cache, np.zeros((2, 2)))


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState(p)
        adam_step(p, [np.zeros(2)], state, 0.1)
        assert np.array_equal(p[0], [1.0, -2.0]) and state.t == 1

    def test_clip_to_max_norm(self):
        g = [np.array([3.0, 0.0]), np.array([[0.0, 4.0]])]
        clipped, norm = clip_by_global_norm(g, 1.0)
        assert norm == pytest.approx(5.0)
        assert global_norm(clipped) == pytest.approx(1.0, abs=1e-9)

    def test_step_reports_preclip_norm_and_uses_clipped(self):
        p1, p2 = [np.zeros(2)], [np.zeros(2)]
        s1, s2 = AdamState(p1), AdamState(p2)
        norm = adam_step(p1, [np.array([3.0, 4.0])], s1, 0.1, max_grad_norm=1.0)
        adam_step(p2, [np.array([0.6, 0.8])], s2, 0.1)
        assert norm == pytest.approx(5.0)
        assert np.allclose(s1.m[0], s2.m[0]) and np.allclose(p1[0], p2[0])

    def test_descends_quadratic(self):
        w = [np.array([1.0])]
        state = AdamState(w)
        adam_step(w, [2 * w[0].copy()], state, 0.1)
        assert w[0][0] < 1.0

    def test_first_step_size_is_lr(self):
        w = [np.array([1.0, -1.0])]
        adam_step(w, [np.array([0.3, -7.0])], AdamState(w), 0.01)
        assert np.allclose(w[0], [1.0 - 0.01, -1.0 + 0.01], atol=1e-9)

    def test_non_finite_gradient(self):
        w = [np.array([1.0])]
        with pytest.raises(NonFiniteError):
            adam_step(w, [np.array([np.nan])], AdamState(w), 0.1, 1.0)

    def test_state_round_trip(self):
        w = [np.ones(3), np.ones((2, 2))]
        s = AdamState(w)
        adam_step(w, [np.ones(3), np.ones((2, 2))], s, 0.1)
        t = AdamState(w)
        t.load_dict(json.loads(json.dumps(s.to_dict())))
        assert t.t == 1 and all(np.array_equal(a, b) for a, b in zip(s.v, t.v))

    @settings(max_examples=40, deadline=None)
    @given(scale=st.floats(1e-3, 1e3), max_norm=st.floats(0.1, 10))
    def test_clipped_norm_never_exceeds_max(self, scale, max_norm):
        g = [scale * np.random.default_rng(0).normal(size=(4, 3))]
        clipped, _ = clip_by_global_norm(g, max_norm)
        assert global_norm(clipped) <= max_norm * (1 + 1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = MlpNet([4, 3, 2], np.random.default_rng(0))
        save_checkpoint(tmp_path / "c.json", {"actor": net}, "abc", meta={"k": 1})
        nets, doc = load_checkpoint(tmp_path / "c.json", "abc")
        assert np.array_equal(nets["actor"].get_flat(), net.get_flat())
        assert doc["meta"] == {"k": 1}

    def test_schema_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.json", {"actor": MlpNet([2, 2])}, "abc")
        with pytest.raises(SchemaMismatchError):
            load_checkpoint(tmp_path / "c.json", "def")
