"""Multi-agent kinematic simulation on the loop map.

Ego agents are driven by external actions; slow vehicles track their own lane
centerline with pure pursuit at a fixed speed. Collisions are checked with the
separating-axis test on oriented rectangles and against the outer road edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import Location, MapGraph, OffMapError, locate, wrap_angle

AGENT_FLAG, BOUNDARY_FLAG = 0, 1


class CapacityError(ValueError):
    """The map cannot host the requested number of vehicles."""


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 4
    n_slow: int = 4
    dt: float = 0.1
    v_min: float = 0.0
    v_max: float = 1.0
    delta_min: float = -0.5
    delta_max: float = 0.5
    slow_speed: float = 0.3
    wheelbase: float = 0.15
    seed: int = 0
    vehicle_length: float = 0.16
    vehicle_width: float = 0.08
    min_gap: float = 1.5  # bumper gap at spawn, in vehicle lengths
    lookahead: float = 0.3  # pure-pursuit lookahead of slow vehicles, m
    spawn_lateral_jitter: float = 0.0  # m, uniform +-
    spawn_heading_jitter: float = 0.0  # rad, uniform +-

    def __post_init__(self):
        if not 0 <= self.v_min < self.slow_speed < self.v_max:
            raise ValueError("need 0 <= v_min < slow_speed < v_max")
        if not self.delta_min < 0 < self.delta_max:
            raise ValueError("need delta_min < 0 < delta_max")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_agents < 0 or self.n_slow < 0:
            raise ValueError("vehicle counts must be non-negative")

    @property
    def slot_spacing(self) -> float:
        return self.vehicle_length * (1.0 + self.min_gap)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    lane: int
    length: float = 0.16
    width: float = 0.08
    is_slow: bool = False

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ControlAction:
    a_v: float
    a_delta: float

    def within(self, config: SimConfig, tol: float = 0.0) -> bool:
        return (
            config.v_min - tol <= self.a_v <= config.v_max + tol
            and config.delta_min - tol <= self.a_delta <= config.delta_max + tol
        )


@dataclass(frozen=True)
class WorldState:
    step_index: int
    vehicles: tuple[VehicleState, ...]
    collision_flags: np.ndarray  # (n_agents, 2): agent-agent, agent-boundary
    rng_seed: int
    n_agents: int
    locations: tuple[Location, ...] = ()
    # per-vehicle target lane: ego decision, or the slow vehicle's own lane
    targets: tuple[int, ...] = ()
    respawned: tuple[bool, ...] = ()
    # per-agent pose where the last collision happened (before respawn)
    crash_poses: dict = field(default_factory=dict)

    @property
    def agents(self) -> tuple[VehicleState, ...]:
        return self.vehicles[: self.n_agents]

    @property
    def slow_vehicles(self) -> tuple[VehicleState, ...]:
        return self.vehicles[self.n_agents :]

    def agent_collided(self, agent_id: int) -> bool:
        return bool(self.collision_flags[agent_id].any())


# -- kinematics -----------------------------------------------------------------


def step_kinematics(state: VehicleState, action: ControlAction, dt: float, wheelbase: float) -> VehicleState:
    """Kinematic bicycle step with a direct speed command."""
    speed = float(action.a_v)
    heading = wrap_angle(state.heading + speed / wheelbase * math.tan(action.a_delta) * dt)
    return replace(
        state,
        x=state.x + speed * dt * math.cos(heading),
        y=state.y + speed * dt * math.sin(heading),
        heading=heading,
        speed=speed,
    )


def corners(v: VehicleState) -> np.ndarray:
    """Rectangle corners (4, 2), counter-clockwise."""
    c, s = math.cos(v.heading), math.sin(v.heading)
    hl, hw = 0.5 * v.length, 0.5 * v.width
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(v.x + c * a - s * b, v.y + s * a + c * b) for a, b in local])


def _corner_list(x, y, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    return [(x + c * a - s * b, y + s * a + c * b) for a, b in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]


def rectangles_overlap(a, b) -> bool:
    """Separating-axis test for two oriented rectangles.

    ``a`` and ``b`` are ``(x, y, heading, length, width)`` tuples. Touching
    edges count as overlap.
    """
    ca, cb = _corner_list(*a), _corner_list(*b)
    for heading in (a[2], b[2]):
        for ax, ay in ((math.cos(heading), math.sin(heading)), (-math.sin(heading), math.cos(heading))):
            pa = [px * ax + py * ay for px, py in ca]
            pb = [px * ax + py * ay for px, py in cb]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def _rect(v: VehicleState):
    return (v.x, v.y, v.heading, v.length, v.width)


def crosses_road_edge(v: VehicleState, map_: MapGraph) -> bool:
    for px, py in _corner_list(*_rect(v)):
        d = map_.project(px, py)[2]
        if d < map_.inner_edge or d > map_.outer_edge:
            return True
    return False


# -- world --------------------------------------------------------------------


def _locate_any(map_: MapGraph, x: float, y: float) -> Location:
    try:
        return locate(map_, (x, y))
    except OffMapError:
        piece, frac, d, _, _ = map_.project(x, y)
        lane = min(max(int(round((d - map_.curve_radius) / map_.lane_width)), 0), map_.n_lanes - 1)
        return Location(
            lanelet_id=lane * map_.lanelets_per_lane + map_.lanelet_index_at(piece, frac),
            lane_index=lane,
            arc_length=map_.arc_length_at(lane, piece, frac),
            lateral_offset=map_.lane_radius(lane) - d,
            piece=piece,
            frac=frac,
        )


def _relocate(world: WorldState, map_: MapGraph, vehicles) -> tuple[tuple[VehicleState, ...], tuple[Location, ...]]:
    locs = tuple(_locate_any(map_, v.x, v.y) for v in vehicles)
    vehicles = tuple(v if v.lane == loc.lane_index else replace(v, lane=loc.lane_index) for v, loc in zip(vehicles, locs))
    return vehicles, locs


def _free_slots(map_: MapGraph, config: SimConfig, rng: np.random.Generator) -> list[tuple[int, float]]:
    slots = []
    for lane in range(map_.n_lanes):
        length = map_.lane_length(lane)
        n = int(length // config.slot_spacing)
        phase = rng.uniform(0.0, length / max(n, 1))
        slots += [(lane, (phase + j * length / n) % length) for j in range(n)]
    return slots


def _place(map_: MapGraph, config: SimConfig, lane: int, s: float, rng, is_slow: bool, speed: float) -> VehicleState:
    lat = 0.0 if is_slow else rng.uniform(-1.0, 1.0) * config.spawn_lateral_jitter
    dh = 0.0 if is_slow else rng.uniform(-1.0, 1.0) * config.spawn_heading_jitter
    x, y, h = map_.pose_at(lane, s, lat)
    return VehicleState(
        x=x,
        y=y,
        heading=wrap_angle(h + dh),
        speed=speed,
        lane=lane,
        length=config.vehicle_length,
        width=config.vehicle_width,
        is_slow=is_slow,
    )


def spawn(map_: MapGraph, config: SimConfig, agent_lanes: Sequence[int] | None = None) -> WorldState:
    """Place agents and slow vehicles at seeded-random free slots.

    ``agent_lanes`` optionally pins the spawn lane of each ego agent.

    Raises:
        CapacityError: fewer slots than vehicles.
    """
    rng = np.random.default_rng(config.seed)
    slots = _free_slots(map_, config, rng)
    total = config.n_agents + config.n_slow
    if len(slots) <= total:
        raise CapacityError(f"map has {len(slots)} spawn slots, {total} vehicles requested")
    order = rng.permutation(len(slots))
    taken = [slots[i] for i in order]
    if agent_lanes is not None:
        picked = []
        for lane in agent_lanes:
            k = next(i for i, slot in enumerate(taken) if slot[0] == lane)
            picked.append(taken.pop(k))
        taken = picked + taken
    vehicles = []
    for i in range(total):
        lane, s = taken[i]
        is_slow = i >= config.n_agents
        speed = config.slow_speed if is_slow else 0.5 * (config.v_min + config.v_max)
        vehicles.append(_place(map_, config, lane, s, rng, is_slow, speed))
    world = WorldState(
        step_index=0,
        vehicles=tuple(vehicles),
        collision_flags=np.zeros((config.n_agents, 2), dtype=bool),
        rng_seed=config.seed,
        n_agents=config.n_agents,
    )
    vehicles, locs = _relocate(world, map_, world.vehicles)
    return replace(
        world,
        vehicles=vehicles,
        locations=locs,
        targets=tuple(loc.lane_index for loc in locs),
        respawned=(False,) * config.n_agents,
    )


def detect_collisions(world: WorldState, map_: MapGraph) -> WorldState:
    """Recompute per-agent collision flags for the current poses."""
    n = world.n_agents
    flags = np.zeros((n, 2), dtype=bool)
    vs = world.vehicles
    reach = [0.5 * math.hypot(v.length, v.width) for v in vs]
    for i in range(n):
        flags[i, BOUNDARY_FLAG] = crosses_road_edge(vs[i], map_)
        for j in range(i + 1, len(vs)):
            if math.hypot(vs[i].x - vs[j].x, vs[i].y - vs[j].y) > reach[i] + reach[j]:
                continue
            if rectangles_overlap(_rect(vs[i]), _rect(vs[j])):
                flags[i, AGENT_FLAG] = True
                if j < n:
                    flags[j, AGENT_FLAG] = True
    return replace(world, collision_flags=flags)


def pure_pursuit(v: VehicleState, lane: int, map_: MapGraph, config: SimConfig) -> ControlAction:
    piece, frac, _, _, _ = map_.project(v.x, v.y)
    s = map_.arc_length_at(lane, piece, frac)
    tx, ty, _ = map_.pose_at(lane, s + config.lookahead)
    alpha = math.atan2(ty - v.y, tx - v.x) - v.heading
    ld = math.hypot(tx - v.x, ty - v.y)
    delta = math.atan2(2.0 * config.wheelbase * math.sin(alpha), ld)
    return ControlAction(config.slow_speed, min(max(delta, config.delta_min), config.delta_max))


def move(world: WorldState, actions: Sequence[ControlAction], map_: MapGraph, config: SimConfig) -> WorldState:
    """Advance all vehicles one step and relocate them (no collision handling)."""
    if len(actions) != world.n_agents:
        raise ValueError(f"expected {world.n_agents} actions, got {len(actions)}")
    new = []
    for i, v in enumerate(world.vehicles):
        if i < world.n_agents:
            act = actions[i]
        else:
            act = pure_pursuit(v, world.targets[i], map_, config)
        new.append(step_kinematics(v, act, config.dt, config.wheelbase))
    vehicles, locs = _relocate(world, map_, new)
    return replace(
        world,
        step_index=world.step_index + 1,
        vehicles=vehicles,
        locations=locs,
        respawned=(False,) * world.n_agents,
        crash_poses={},
    )


def respawn_collided(world: WorldState, map_: MapGraph, config: SimConfig) -> WorldState:
    """Move every colliding ego agent to a random collision-free slot."""
    hit = [i for i in range(world.n_agents) if world.collision_flags[i].any()]
    if not hit:
        return world
    vehicles = list(world.vehicles)
    respawned = list(world.respawned)
    crash = dict(world.crash_poses)
    clearance = 2.0 * config.slot_spacing
    for i in hit:
        rng = np.random.default_rng([world.rng_seed, world.step_index, i])
        slots = _free_slots(map_, config, rng)
        candidates = []
        for k in rng.permutation(len(slots)):
            lane, s = slots[k]
            x, y, _ = map_.pose_at(lane, s)
            if all(math.hypot(x - o.x, y - o.y) >= clearance for j, o in enumerate(vehicles) if j != i):
                candidates.append((lane, s))
                break
        if not candidates:
            raise CapacityError("no free slot to respawn a colliding agent")
        lane, s = candidates[0]
        crash[i] = (vehicles[i].x, vehicles[i].y, vehicles[i].heading)
        vehicles[i] = _place(map_, config, lane, s, rng, False, 0.5 * (config.v_min + config.v_max))
        respawned[i] = True
    vehicles, locs = _relocate(world, map_, vehicles)
    targets = list(world.targets)
    for i in hit:
        targets[i] = locs[i].lane_index
    return replace(
        world,
        vehicles=vehicles,
        locations=locs,
        respawned=tuple(respawned),
        crash_poses=crash,
        targets=tuple(targets),
    )


def step_world(
    world: WorldState,
    actions: Sequence[ControlAction],
    map_: MapGraph,
    config: SimConfig,
) -> WorldState:
    """One simulation step: move, detect collisions, respawn colliding agents.

    The returned state keeps the collision flags of this step; colliding agents
    already sit at their respawn pose.
    """
    return respawn_collided(detect_collisions(move(world, actions, map_, config), map_), map_, config)


def with_targets(world: WorldState, agent_targets: Sequence[int]) -> WorldState:
    """Record the ego agents' current lane decisions."""
    targets = tuple(agent_targets) + world.targets[world.n_agents :]
    return replace(world, targets=targets)
