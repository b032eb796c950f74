"""Per-step rewards for the lane-selection gate and the lane experts."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import MapGraph, ReferencePath
from .observation import signed_gap
from .sim import AGENT_FLAG, BOUNDARY_FLAG, ControlAction, SimConfig, WorldState


@dataclass(frozen=True)
class HLRewardConfig:
    collision_penalty: float = -20.0
    lane_change_penalty: float = -0.5
    risky_lane_coeff: float = -5.0
    safe_lane_reward: float = 0.1
    safety_threshold: float = 1.0  # m

    def __post_init__(self):
        if self.collision_penalty > 0 or self.lane_change_penalty > 0 or self.risky_lane_coeff > 0:
            raise ValueError("high-level penalties must be <= 0")
        if self.safe_lane_reward < 0:
            raise ValueError("safe_lane_reward must be >= 0")
        if self.safety_threshold <= 0:
            raise ValueError("safety_threshold must be positive")


@dataclass(frozen=True)
class LLRewardConfig:
    boundary_collision_penalty: float = -10.0
    agent_collision_penalty: float = -20.0
    proximity_coeff: float = -2.0
    centerline_dev_coeff: float = -2.0
    refpath_dev_coeff: float = -2.0
    steering_rate_coeff: float = -0.5
    forward_coeff: float = 10.0
    speed_coeff: float = 0.05
    proximity_threshold: float = 0.5  # m

    def __post_init__(self):
        for name in (
            "boundary_collision_penalty",
            "agent_collision_penalty",
            "proximity_coeff",
            "centerline_dev_coeff",
            "refpath_dev_coeff",
            "steering_rate_coeff",
        ):
            if getattr(self, name) > 0:
                raise ValueError(f"{name} must be <= 0")
        if self.forward_coeff < 0 or self.speed_coeff < 0:
            raise ValueError("forward_coeff and speed_coeff must be >= 0")


LL_COMPONENTS = (
    "boundary_collision",
    "agent_collision",
    "proximity",
    "centerline_dev",
    "refpath_dev",
    "steering_rate",
    "forward",
    "speed",
)


def slow_gap_ahead(world: WorldState, agent_id: int, map_: MapGraph) -> float | None:
    """Forward gap to the nearest slow vehicle ahead in the agent's lane."""
    ego = world.locations[agent_id]
    best = None
    for j in range(world.n_agents, len(world.vehicles)):
        other = world.locations[j]
        if other.lane_index != ego.lane_index:
            continue
        g = signed_gap(map_, ego, other)
        if g > 0.0 and (best is None or g < best):
            best = g
    return best


def reward_high(
    world_before: WorldState,
    world_after: WorldState,
    agent_id: int,
    decision_prev: int,
    decision_now: int,
    config: HLRewardConfig,
    map_: MapGraph,
) -> float:
    """Gate reward for one agent-step.

    ``world_after`` is the state right after collision detection, before any
    respawn.
    """
    r = 0.0
    if world_after.collision_flags[agent_id, AGENT_FLAG]:
        r += config.collision_penalty
    if decision_now != decision_prev:
        r += config.lane_change_penalty
    d = slow_gap_ahead(world_after, agent_id, map_)
    d_safe = config.safety_threshold
    if d is not None and d < d_safe:
        r += config.risky_lane_coeff * (d_safe - d) / d_safe
    else:
        r += config.safe_lane_reward
    return r


def reward_low_components(
    world_before: WorldState,
    world_after: WorldState,
    agent_id: int,
    action_prev: ControlAction,
    action_now: ControlAction,
    ref: ReferencePath,
    config: LLRewardConfig,
    map_: MapGraph,
    sim_config: SimConfig,
) -> dict[str, float]:
    """The eight expert reward terms, keyed by :data:`LL_COMPONENTS`.

    ``world_after`` is taken right after collision detection (before respawn).
    """
    flags = world_after.collision_flags[agent_id]
    v = world_after.vehicles[agent_id]
    loc = world_after.locations[agent_id]
    target = ref.target_lane

    nearest = math.inf
    for j, o in enumerate(world_after.vehicles):
        if j != agent_id:
            nearest = min(nearest, math.hypot(o.x - v.x, o.y - v.y))
    too_close = max(config.proximity_threshold - nearest, 0.0)

    d_ego = map_.lane_radius(loc.lane_index) - loc.lateral_offset
    ref_dev = abs(map_.lane_radius(target) - d_ego)
    center_dev = abs(loc.lateral_offset) if loc.lane_index == target else 0.0

    before = world_before.locations[agent_id]
    length = map_.lane_length(target)
    s0 = map_.arc_length_at(target, before.piece, before.frac)
    s1 = map_.arc_length_at(target, loc.piece, loc.frac)
    progress = (s1 - s0) % length
    if progress > 0.5 * length:
        progress -= length

    return {
        "boundary_collision": config.boundary_collision_penalty if flags[BOUNDARY_FLAG] else 0.0,
        "agent_collision": config.agent_collision_penalty if flags[AGENT_FLAG] else 0.0,
        "proximity": config.proximity_coeff * too_close,
        "centerline_dev": config.centerline_dev_coeff * center_dev,
        "refpath_dev": config.refpath_dev_coeff * ref_dev,
        "steering_rate": config.steering_rate_coeff * abs(action_now.a_delta - action_prev.a_delta),
        "forward": config.forward_coeff * progress,
        "speed": config.speed_coeff * v.speed / sim_config.v_max,
    }


def reward_low(*args, **kwargs) -> float:
    """Expert reward: the sum of :func:`reward_low_components`."""
    return sum(reward_low_components(*args, **kwargs).values())
