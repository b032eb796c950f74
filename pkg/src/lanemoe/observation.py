"""Fixed-length observation vectors for the lane-selection gate and the lane experts.

All relative quantities are expressed in the ego frame, so both vectors are
invariant to a rigid motion of the whole scene except for the absolute
ego-position entries (indices 0 and 1).
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .geometry import Location, MapGraph, ReferencePath, wrap_angle
from .sim import SimConfig, WorldState

HL_LENGTH = 33
LL_LENGTH = 57
HL_NEIGHBORS = 4
LL_NEIGHBORS = 3
REF_POINTS = 6
NEIGHBOR_REF_POINTS = 2
D_NORM = 2.0  # m

_HL_EGO = ("ego_x", "ego_y", "ego_heading", "ego_speed", "ego_lane")
_HL_NB = ("rel_x", "rel_y", "rel_heading", "speed", "lane", "distance", "is_ahead")
_LL_EGO = ("ego_x", "ego_y", "ego_heading", "ego_vel_long", "ego_vel_lat")
_LL_NB = (
    "rel_x",
    "rel_y",
    "rel_heading",
    "speed",
    "lane",
    "long_gap",
    "lat_gap",
    "ref0_x",
    "ref0_y",
    "ref1_x",
    "ref1_y",
)


class InsufficientReferencePathError(ValueError):
    pass


def hl_layout() -> list[str]:
    names = list(_HL_EGO)
    for k in range(HL_NEIGHBORS):
        names += [f"nb{k}_{n}" for n in _HL_NB]
    return names


def ll_layout() -> list[str]:
    names = list(_LL_EGO)
    for k in range(REF_POINTS):
        names += [f"ref{k}_x", f"ref{k}_y"]
    names.append("ref_distance")
    names += ["left_bound_x", "left_bound_y", "right_bound_x", "right_bound_y", "left_bound_dist", "right_bound_dist"]
    for k in range(LL_NEIGHBORS):
        names += [f"nb{k}_{n}" for n in _LL_NB]
    return names


def schema() -> dict:
    """Frozen observation layouts, used to decode logs and guard checkpoints."""
    doc = {
        "hl_length": HL_LENGTH,
        "ll_length": LL_LENGTH,
        "hl_layout": hl_layout(),
        "ll_layout": ll_layout(),
        "normalization": {
            "position": "map half-extent",
            "speed": "v_max",
            "distance": D_NORM,
            "angle": "pi",
            "lane": "n_lanes - 1",
        },
        "frame": "ego (x forward, y left); headings relative to the local road direction",
        "neighbor_order": "ascending |arc-length gap| along the ego lane, ties by vehicle id",
        "hl_sentinel": [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        "ll_sentinel": [0.0] * 5 + [1.0] + [0.0] * 5,
    }
    doc["hash"] = schema_hash(doc)
    return doc


def schema_hash(doc: dict | None = None) -> str:
    if doc is None:
        doc = schema()
    body = {k: v for k, v in doc.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


# -- helpers ------------------------------------------------------------------


def _clip(v: float) -> float:
    return -1.0 if v < -1.0 else 1.0 if v > 1.0 else v


def _to_ego(px: float, py: float, ex: float, ey: float, c: float, s: float) -> tuple[float, float]:
    dx, dy = px - ex, py - ey
    return c * dx + s * dy, -s * dx + c * dy


def signed_gap(map_: MapGraph, ego: Location, other: Location) -> float:
    """Arc-length gap from ego to other along the ego lane, in (-L/2, L/2]."""
    lane = ego.lane_index
    length = map_.lane_length(lane)
    g = (map_.arc_length_at(lane, other.piece, other.frac) - ego.arc_length) % length
    return g - length if g > 0.5 * length else g


def road_heading(map_: MapGraph, loc: Location) -> float:
    return map_.pose_at_piece(map_.curve_radius, loc.piece, loc.frac)[2]


def _lane_norm(map_: MapGraph, lane: int) -> float:
    return lane / (map_.n_lanes - 1)


def _neighbors(world: WorldState, agent_id: int, map_: MapGraph) -> list[tuple[float, int]]:
    ego = world.locations[agent_id]
    gaps = [(signed_gap(map_, ego, loc), j) for j, loc in enumerate(world.locations) if j != agent_id]
    gaps.sort(key=lambda gj: (abs(gj[0]), gj[1]))
    return gaps


# -- observations ---------------------------------------------------------------


def observe_high(world: WorldState, agent_id: int, map_: MapGraph, config: SimConfig) -> np.ndarray:
    """Gate observation (33 entries): ego block then 4 nearest vehicles."""
    ego = world.vehicles[agent_id]
    loc = world.locations[agent_id]
    hx, hy = map_.half_extent
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    out = [
        _clip(ego.x / hx),
        _clip(ego.y / hy),
        wrap_angle(ego.heading - road_heading(map_, loc)) / math.pi,
        _clip(ego.speed / config.v_max),
        _lane_norm(map_, loc.lane_index),
    ]
    nbs = _neighbors(world, agent_id, map_)[:HL_NEIGHBORS]
    for gap, j in nbs:
        v = world.vehicles[j]
        rx, ry = _to_ego(v.x, v.y, ego.x, ego.y, c, s)
        out += [
            _clip(rx / D_NORM),
            _clip(ry / D_NORM),
            wrap_angle(v.heading - ego.heading) / math.pi,
            _clip(v.speed / config.v_max),
            _lane_norm(map_, world.locations[j].lane_index),
            min(abs(gap) / D_NORM, 1.0),
            1.0 if gap >= 0.0 else -1.0,
        ]
    for _ in range(HL_NEIGHBORS - len(nbs)):
        out += [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    return np.array(out)


def _path_points(map_: MapGraph, loc: Location, lane: int, n: int, spacing: float):
    s0 = map_.arc_length_at(lane, loc.piece, loc.frac)
    return [map_.pose_at(lane, s0 + k * spacing)[:2] for k in range(1, n + 1)]


def observe_low(
    world: WorldState,
    agent_id: int,
    map_: MapGraph,
    ref: ReferencePath,
    config: SimConfig,
    ref_spacing: float = 0.2,
) -> np.ndarray:
    """Expert observation (57 entries).

    Layout: ego block (5), 6 reference waypoints (12), signed distance to the
    reference path (1), nearest points on and distances to the current-lane
    boundaries (6), then 3 nearest vehicles with 11 entries each.
    """
    if len(ref.points) < REF_POINTS:
        raise InsufficientReferencePathError(f"reference path has {len(ref.points)} points, need {REF_POINTS}")
    ego = world.vehicles[agent_id]
    loc = world.locations[agent_id]
    hx, hy = map_.half_extent
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    err = wrap_angle(ego.heading - road_heading(map_, loc))
    out = [
        _clip(ego.x / hx),
        _clip(ego.y / hy),
        err / math.pi,
        _clip(ego.speed * math.cos(err) / config.v_max),
        _clip(ego.speed * math.sin(err) / config.v_max),
    ]
    for px, py in ref.points[:REF_POINTS]:
        rx, ry = _to_ego(px, py, ego.x, ego.y, c, s)
        out += [_clip(rx / D_NORM), _clip(ry / D_NORM)]

    d_ego = map_.lane_radius(loc.lane_index) - loc.lateral_offset
    out.append(_clip((map_.lane_radius(ref.target_lane) - d_ego) / D_NORM))

    half_w = 0.5 * map_.lane_width
    r_lane = map_.lane_radius(loc.lane_index)
    lx, ly, _ = map_.pose_at_piece(r_lane - half_w, loc.piece, loc.frac)
    rx_, ry_, _ = map_.pose_at_piece(r_lane + half_w, loc.piece, loc.frac)
    for bx, by in ((lx, ly), (rx_, ry_)):
        ex, ey = _to_ego(bx, by, ego.x, ego.y, c, s)
        out += [_clip(ex / D_NORM), _clip(ey / D_NORM)]
    out += [
        _clip((half_w - loc.lateral_offset) / D_NORM),
        _clip((-half_w - loc.lateral_offset) / D_NORM),
    ]

    nbs = _neighbors(world, agent_id, map_)[:LL_NEIGHBORS]
    for gap, j in nbs:
        v = world.vehicles[j]
        oloc = world.locations[j]
        rx, ry = _to_ego(v.x, v.y, ego.x, ego.y, c, s)
        d_other = map_.lane_radius(oloc.lane_index) - oloc.lateral_offset
        block = [
            _clip(rx / D_NORM),
            _clip(ry / D_NORM),
            wrap_angle(v.heading - ego.heading) / math.pi,
            _clip(v.speed / config.v_max),
            _lane_norm(map_, oloc.lane_index),
            _clip(gap / D_NORM),
            _clip((d_ego - d_other) / D_NORM),
        ]
        for px, py in _path_points(map_, oloc, world.targets[j], NEIGHBOR_REF_POINTS, ref_spacing):
            ex, ey = _to_ego(px, py, ego.x, ego.y, c, s)
            block += [_clip(ex / D_NORM), _clip(ey / D_NORM)]
        out += block
    for _ in range(LL_NEIGHBORS - len(nbs)):
        out += [0.0] * 5 + [1.0] + [0.0] * 5
    return np.array(out)
