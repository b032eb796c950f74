"""Actor-critic policies and the lane-expert dispatcher.

The gate picks a target lane from a categorical distribution; each lane
expert outputs a tanh-squashed diagonal Gaussian over (speed, steering).
At every step exactly one expert is evaluated per agent: the one whose
lane the gate selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import MapGraph, ReferencePath, reference_path_for
from .neural import MlpNet, NonFiniteError
from .observation import HL_LENGTH, LL_LENGTH, observe_high, observe_low
from .sim import ControlAction, SimConfig, WorldState

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

SAMPLE, GREEDY = "sample", "greedy"


def _mlp(sizes, rng, output_gain):
    return MlpNet(sizes, rng=rng, output_gain=output_gain)


class HighLevelPolicy:
    """Categorical lane-selection policy with a separate critic."""

    kind = "categorical"

    def __init__(self, n_lanes: int, hidden: Sequence[int] = (64, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_lanes = n_lanes
        self.actor = _mlp([HL_LENGTH, *hidden, n_lanes], rng, 0.01)
        self.critic = _mlp([HL_LENGTH, *hidden, 1], rng, 1.0)

    @property
    def nets(self) -> dict[str, MlpNet]:
        return {"actor": self.actor, "critic": self.critic}

    def logits(self, obs: np.ndarray) -> np.ndarray:
        z = self.actor(obs)
        if not np.isfinite(z).all():
            raise NonFiniteError("non-finite logits")
        return z

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self.critic(obs)[:, 0]

    def act(self, obs: np.ndarray, mode: str, rng: np.random.Generator):
        """Batched decisions: returns ``(decisions, log_probs, values)``."""
        z = self.logits(obs)
        logp_all = log_softmax(z)
        if mode == GREEDY:
            dec = np.argmax(z, axis=1)
        else:
            p = np.exp(logp_all)
            u = rng.random(len(z))[:, None]
            dec = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), self.n_lanes - 1)
        logp = logp_all[np.arange(len(z)), dec]
        return dec, logp, self.value(obs)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def decide(policy: HighLevelPolicy, obs: np.ndarray, mode: str, rng: np.random.Generator):
    """Single-observation decision: ``(decision, log_prob, value)``."""
    dec, logp, val = policy.act(np.asarray(obs)[None, :], mode, rng)
    return int(dec[0]), float(logp[0]), float(val[0])


class LowLevelExpert:
    """Lane expert: actor emits (mean, log-std pre-activation) for speed and steering."""

    kind = "gaussian"
    action_dim = 2

    def __init__(
        self,
        target_lane: int,
        low: Sequence[float],
        high: Sequence[float],
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
        init_log_std: float = -1.0,
    ):
        if not LOG_STD_MIN < init_log_std < LOG_STD_MAX:
            raise ValueError(f"init_log_std must lie in ({LOG_STD_MIN}, {LOG_STD_MAX})")
        rng = np.random.default_rng(seed)
        self.target_lane = target_lane
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        self.actor = _mlp([LL_LENGTH, *hidden, 2 * self.action_dim], rng, 0.01)
        self.critic = _mlp([LL_LENGTH, *hidden, 1], rng, 1.0)
        t = (init_log_std - LOG_STD_MIN) / (0.5 * (LOG_STD_MAX - LOG_STD_MIN)) - 1.0
        self.actor.biases[-1][self.action_dim :] = np.arctanh(t)

    @classmethod
    def for_config(cls, target_lane: int, config: SimConfig, **kwargs) -> "LowLevelExpert":
        return cls(target_lane, (config.v_min, config.delta_min), (config.v_max, config.delta_max), **kwargs)

    @property
    def nets(self) -> dict[str, MlpNet]:
        return {"actor": self.actor, "critic": self.critic}

    def dist_params(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.actor(obs)
        mean = out[:, : self.action_dim]
        log_std = squash_log_std(out[:, self.action_dim :])
        return mean, log_std

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self.critic(obs)[:, 0]

    def squash(self, u: np.ndarray) -> np.ndarray:
        return self.low + (self.high - self.low) * 0.5 * (np.tanh(u) + 1.0)

    def log_prob(self, u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
        """Log density of the squashed action whose pre-squash value is ``u``."""
        return gaussian_log_prob(u, mean, log_std) - self.squash_log_det(u)

    def squash_log_det(self, u: np.ndarray) -> np.ndarray:
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        log_dtanh = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        return (np.log(0.5 * (self.high - self.low)) + log_dtanh).sum(axis=1)

    def act(self, obs: np.ndarray, mode: str, rng: np.random.Generator):
        """Batched actions: returns ``(raw, actions, log_probs, values)``."""
        mean, log_std = self.dist_params(obs)
        if mode == GREEDY:
            u = mean.copy()
        else:
            u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return u, self.squash(u), self.log_prob(u, mean, log_std), self.value(obs)


def squash_log_std(x: np.ndarray) -> np.ndarray:
    """Smoothly map an unbounded pre-activation into [LOG_STD_MIN, LOG_STD_MAX]."""
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(x) + 1.0)


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - _HALF_LOG_2PI).sum(axis=1)


class ExpertPool:
    """One expert per lane; counts how many rows each expert evaluates."""

    def __init__(self, experts: Sequence[LowLevelExpert]):
        for lane, e in enumerate(experts):
            if e.target_lane != lane:
                raise ValueError(f"expert at index {lane} targets lane {e.target_lane}")
        self.experts = list(experts)
        self.forward_count = 0

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, lane: int) -> LowLevelExpert:
        return self.experts[lane]

    def act(self, decisions: Sequence[int], obs: np.ndarray, mode: str, rng: np.random.Generator):
        """Evaluate, for every row, only the expert named by its decision."""
        decisions = np.asarray(decisions)
        n = len(decisions)
        raw = np.zeros((n, 2))
        actions = np.zeros((n, 2))
        logp = np.zeros(n)
        values = np.zeros(n)
        for lane in np.unique(decisions):
            if not 0 <= lane < len(self.experts):
                raise IndexError(f"no expert for lane {lane}")
            rows = np.flatnonzero(decisions == lane)
            u, a, lp, v = self.experts[lane].act(obs[rows], mode, rng)
            raw[rows], actions[rows], logp[rows], values[rows] = u, a, lp, v
            self.forward_count += len(rows)
        return raw, actions, logp, values


def act_expert(pool: ExpertPool, decision: int, obs: np.ndarray, mode: str, rng: np.random.Generator):
    """Single-agent expert call: ``(ControlAction, log_prob, value)``."""
    if not 0 <= decision < len(pool):
        raise IndexError(f"no expert for lane {decision}")
    _, a, lp, v = pool.act([decision], np.asarray(obs)[None, :], mode, rng)
    return ControlAction(float(a[0, 0]), float(a[0, 1])), float(lp[0]), float(v[0])


@dataclass(frozen=True)
class DecisionRecord:
    decision_t: int
    hl_log_prob: float
    hl_value: float
    ll_action: ControlAction
    ll_log_prob: float
    ll_value: float
    reference: ReferencePath | None = None


def hierarchical_step(
    hl: HighLevelPolicy | None,
    pool: ExpertPool,
    world: WorldState,
    agent_ids: Sequence[int],
    map_: MapGraph,
    sim_config: SimConfig,
    mode: str,
    rng: np.random.Generator,
    forced_decisions: Sequence[int] | None = None,
    ref_spacing: float = 0.2,
) -> list[DecisionRecord]:
    """Gate, reference path and expert for each agent, in that order.

    ``forced_decisions`` bypasses the gate (baselines, expert training). The
    function holds no state between calls.
    """
    agent_ids = list(agent_ids)
    if forced_decisions is None:
        hl_obs = np.array([observe_high(world, i, map_, sim_config) for i in agent_ids])
        dec, hl_lp, hl_v = hl.act(hl_obs, mode, rng)
    else:
        dec = np.asarray(forced_decisions, dtype=int)
        hl_lp = np.zeros(len(agent_ids))
        hl_v = np.zeros(len(agent_ids))
    targets = list(world.targets)
    for i, d in zip(agent_ids, dec):
        targets[i] = int(d)
    world = replace(world, targets=tuple(targets))
    refs = [
        reference_path_for(map_, world.vehicles[i].position, int(d), 6, ref_spacing) for i, d in zip(agent_ids, dec)
    ]
    ll_obs = np.array(
        [observe_low(world, i, map_, ref, sim_config, ref_spacing) for i, ref in zip(agent_ids, refs)]
    )
    _, actions, ll_lp, ll_v = pool.act(dec, ll_obs, mode, rng)
    return [
        DecisionRecord(
            decision_t=int(dec[k]),
            hl_log_prob=float(hl_lp[k]),
            hl_value=float(hl_v[k]),
            ll_action=ControlAction(float(actions[k, 0]), float(actions[k, 1])),
            ll_log_prob=float(ll_lp[k]),
            ll_value=float(ll_v[k]),
            reference=refs[k],
        )
        for k in range(len(agent_ids))
    ]
