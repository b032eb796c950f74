import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanemoe.geometry import locate
from lanemoe.observation import observe_low
from lanemoe.policy import (
    GREEDY,
    LOG_STD_MAX,
    LOG_STD_MIN,
    SAMPLE,
    ExpertPool,
    HighLevelPolicy,
    LowLevelExpert,
    act_expert,
    decide,
    hierarchical_step,
    log_softmax,
    squash_log_std,
)
from lanemoe.sim import SimConfig, spawn, step_world

SIM = SimConfig()


def gate_with_logits(logits):
    """Gate whose actor returns the given logits for every input."""
    hl = HighLevelPolicy(len(logits))
    hl.actor.weights[-1][...] = 0.0
    hl.actor.biases[-1][...] = logits
    return hl


def pool(seed=0):
    return ExpertPool([LowLevelExpert.for_config(k, SIM, seed=seed + k) for k in range(2)])


class TestGate:
    def test_tie_breaks_to_lane_zero(self):
        assert decide(gate_with_logits([0.0, 0.0]), np.zeros(33), GREEDY, None)[0] == 0

    def test_softmax_monte_carlo(self):
        hl = gate_with_logits([10.0, -10.0])
        obs = np.zeros((100_000, 33))
        dec, _, _ = hl.act(obs, SAMPLE, np.random.default_rng(0))
        assert (dec == 0).mean() > 0.999

    def test_sample_frequency_matches_probability(self):
        hl = gate_with_logits([0.3, -0.4])
        dec, logp, _ = hl.act(np.zeros((100_000, 33)), SAMPLE, np.random.default_rng(1))
        p0 = 1 / (1 + math.exp(-0.7))
        assert (dec == 0).mean() == pytest.approx(p0, abs=0.01)
        assert np.allclose(logp[dec == 0], math.log(p0))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 1000), shift=st.floats(-50, 50))
    def test_decisions_in_range_and_shift_invariant(self, seed, shift):
        rng = np.random.default_rng(seed)
        hl = HighLevelPolicy(2, seed=seed)
        hl.actor.weights[-1][...] = rng.normal(size=hl.actor.weights[-1].shape)
        obs = rng.uniform(-1, 1, size=(16, 33))
        dec, _, _ = hl.act(obs, GREEDY, rng)
        assert set(dec.tolist()) <= {0, 1}
        hl.actor.biases[-1] += shift
        dec2, _, _ = hl.act(obs, GREEDY, rng)
        assert np.array_equal(dec, dec2)

    def test_log_softmax_normalized(self):
        z = np.random.default_rng(0).normal(size=(10, 3)) * 30
        assert np.allclose(np.exp(log_softmax(z)).sum(axis=1), 1.0)


class TestExpert:
    def test_initial_log_std(self):
        e = LowLevelExpert.for_config(0, SIM)
        _, log_std = e.dist_params(np.zeros((1, 57)))
        assert np.allclose(log_std, -1.0)

    def test_init_log_std_must_be_interior(self):
        with pytest.raises(ValueError):
            LowLevelExpert.for_config(0, SIM, init_log_std=LOG_STD_MAX)

    def test_log_std_bounds(self):
        x = np.linspace(-50, 50, 101)
        ls = squash_log_std(x)
        assert ls.min() >= LOG_STD_MIN and ls.max() <= LOG_STD_MAX
        assert np.all(np.diff(ls) >= 0)

    def test_squash_saturation(self):
        e = LowLevelExpert.for_config(0, SIM)
        a = e.squash(np.array([[40.0, -40.0]]))
        assert a[0, 0] == pytest.approx(SIM.v_max) and a[0, 1] == pytest.approx(SIM.delta_min)

    def test_greedy_is_squashed_mean(self):
        e = LowLevelExpert.for_config(1, SIM, seed=3)
        obs = np.random.default_rng(0).uniform(-1, 1, size=(5, 57))
        mean, _ = e.dist_params(obs)
        _, a1, _, _ = e.act(obs, GREEDY, np.random.default_rng(1))
        _, a2, _, _ = e.act(obs, GREEDY, np.random.default_rng(2))
        assert np.array_equal(a1, a2) and np.allclose(a1, e.squash(mean))

    def test_log_prob_vs_numeric_density(self):
        e = LowLevelExpert.for_config(0, SIM, seed=4, init_log_std=-0.5)
        obs = np.random.default_rng(5).uniform(-1, 1, size=(1, 57))
        mean, log_std = e.dist_params(obs)
        rng = np.random.default_rng(6)
        n = 1_000_000
        u = mean + np.exp(log_std) * rng.standard_normal((n, 2))
        a = e.squash(u)
        point_u = mean + 0.3 * np.exp(log_std)
        point = e.squash(point_u)[0]
        density = 1.0
        for d in range(2):
            h = 0.01 * (e.high[d] - e.low[d])
            density *= np.mean(np.abs(a[:, d] - point[d]) < h) / (2 * h)
        analytic = math.exp(e.log_prob(point_u, mean, log_std)[0])
        assert density == pytest.approx(analytic, rel=0.05)

    def test_feasible_samples(self):
        e = LowLevelExpert.for_config(0, SIM, init_log_std=0.9)
        obs = np.random.default_rng(0).uniform(-1, 1, size=(100_000, 57))
        _, a, lp, _ = e.act(obs, SAMPLE, np.random.default_rng(1))
        assert np.all((a >= e.low) & (a <= e.high))
        assert np.isfinite(lp).all()

    def test_stable_log_det_for_large_u(self):
        e = LowLevelExpert.for_config(0, SIM)
        u = np.array([[30.0, -30.0], [0.0, 0.0]])
        naive = np.log(0.5 * (e.high - e.low) * (1 - np.tanh(u[1:]) ** 2)).sum()
        ld = e.squash_log_det(u)
        assert np.isfinite(ld).all() and ld[1] == pytest.approx(naive)


class TestPool:
    def test_requires_lane_order(self):
        with pytest.raises(ValueError):
            ExpertPool([LowLevelExpert.for_config(1, SIM), LowLevelExpert.for_config(0, SIM)])

    def test_unknown_lane(self):
        with pytest.raises(IndexError):
            act_expert(pool(), 2, np.zeros(57), GREEDY, None)

    def test_routes_rows_to_selected_expert(self):
        p = pool()
        obs = np.random.default_rng(0).uniform(-1, 1, size=(6, 57))
        dec = [0, 1, 1, 0, 1, 0]
        _, a, _, _ = p.act(dec, obs, GREEDY, None)
        for k, d in enumerate(dec):
            _, own, _, _ = p[d].act(obs[k : k + 1], GREEDY, None)
            assert np.allclose(a[k], own[0])

    def test_act_expert_action_within_bounds(self):
        action, lp, v = act_expert(pool(), 1, np.zeros(57), SAMPLE, np.random.default_rng(0))
        assert action.within(SIM) and math.isfinite(lp) and math.isfinite(v)


class TestHierarchicalStep:
    def test_forced_current_lane_keeps_reference_on_lane(self, loop_map):
        world = spawn(loop_map, SIM)
        lanes = [loc.lane_index for loc in world.locations[:4]]
        recs = hierarchical_step(None, pool(), world, range(4), loop_map, SIM, GREEDY, None, lanes)
        for rec, lane in zip(recs, lanes):
            assert rec.decision_t == lane and rec.reference.target_lane == lane
            assert all(locate(loop_map, p).lane_index == lane for p in rec.reference.points)

    def test_forced_other_lane(self, loop_map):
        world = spawn(loop_map, SIM)
        other = [1 - loc.lane_index for loc in world.locations[:4]]
        recs = hierarchical_step(None, pool(), world, range(4), loop_map, SIM, GREEDY, None, other)
        for rec, lane in zip(recs, other):
            for p in rec.reference.points:
                loc = locate(loop_map, p)
                assert loc.lane_index == lane and abs(loc.lateral_offset) < 1e-6

    @pytest.mark.parametrize("n_agents,steps", [(1, 7), (4, 25), (3, 10)])
    def test_one_expert_call_per_agent_step(self, loop_map, n_agents, steps):
        sim = SimConfig(n_agents=n_agents, n_slow=2, seed=n_agents)
        p = pool()
        hl = HighLevelPolicy(2, seed=1)
        hl.actor.weights[-1][...] = np.random.default_rng(0).normal(size=hl.actor.weights[-1].shape)
        world = spawn(loop_map, sim)
        rng = np.random.default_rng(0)
        for _ in range(steps):
            recs = hierarchical_step(hl, p, world, range(n_agents), loop_map, sim, SAMPLE, rng)
            world = step_world(world, [r.ll_action for r in recs], loop_map, sim)
        assert p.forward_count == steps * n_agents

    def test_stateless_between_calls(self, loop_map):
        world = spawn(loop_map, SIM)
        hl = HighLevelPolicy(2, seed=2)
        p = pool()
        first = hierarchical_step(hl, p, world, range(4), loop_map, SIM, GREEDY, None)
        hierarchical_step(hl, p, world, range(4), loop_map, SIM, GREEDY, None, [1, 0, 1, 0])
        again = hierarchical_step(hl, p, world, range(4), loop_map, SIM, GREEDY, None)
        assert [r.decision_t for r in first] == [r.decision_t for r in again]
        assert [r.ll_action for r in first] == [r.ll_action for r in again]

    def test_expert_sees_decided_targets(self, loop_map):
        world = spawn(loop_map, SIM)
        recs = hierarchical_step(None, pool(), world, range(4), loop_map, SIM, GREEDY, None, [1, 1, 1, 1])
        obs = observe_low(world, 0, loop_map, recs[0].reference, SIM)
        assert obs.shape == (57,)
