"""Parametric two-lane loop map built from lanelets.

The road is a stadium: two straights joined by two semicircles, travelled
counter-clockwise. Every lane centerline is the set of points at a fixed
distance from one base segment, so projecting a point onto any lane reduces to
projecting it onto that segment. Lane 0 is the inner (left) lane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# pieces of the loop in travel order
_BOTTOM, _RIGHT, _TOP, _LEFT = range(4)

_POINT_SPACING = 0.05  # m, sampling of lanelet point arrays


class MapError(ValueError):
    """Invalid map geometry or a query outside the road."""


class OffMapError(MapError):
    pass


@dataclass(frozen=True)
class Lanelet:
    id: int
    lane_index: int
    centerline: np.ndarray
    left_boundary: np.ndarray
    right_boundary: np.ndarray
    successor_id: int
    left_neighbor_id: int | None = None
    right_neighbor_id: int | None = None
    # arc-length range along the own lane centerline
    s_start: float = 0.0
    s_end: float = 0.0

    @property
    def neighbor_id(self) -> int | None:
        """Adjacent lanelet in the other lane (right one preferred)."""
        return self.right_neighbor_id if self.right_neighbor_id is not None else self.left_neighbor_id


@dataclass(frozen=True)
class Location:
    lanelet_id: int
    lane_index: int
    arc_length: float
    lateral_offset: float
    # loop piece and fraction along it; shared by all lanes
    piece: int = 0
    frac: float = 0.0


@dataclass(frozen=True)
class ReferencePath:
    points: np.ndarray
    target_lane: int
    source_lanelet_id: int
    # arc length (target lane) of every point
    arc_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class MapGraph:
    """Immutable stadium loop. Construct with :func:`build_loop_map`."""

    lanelets: tuple[Lanelet, ...]
    n_lanes: int
    lane_width: float
    straight_length: float
    curve_radius: float
    lanelet_length: float
    origin: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0

    # -- derived geometry -------------------------------------------------

    def lane_radius(self, lane: int) -> float:
        return self.curve_radius + lane * self.lane_width

    def lane_length(self, lane: int) -> float:
        return 2.0 * self.straight_length + 2.0 * math.pi * self.lane_radius(lane)

    @property
    def loop_length(self) -> float:
        return self.lane_length(0)

    @property
    def inner_edge(self) -> float:
        """Distance from the base segment to the inner road boundary."""
        return self.curve_radius - 0.5 * self.lane_width

    @property
    def outer_edge(self) -> float:
        return self.curve_radius + (self.n_lanes - 0.5) * self.lane_width

    @property
    def half_extent(self) -> tuple[float, float]:
        return (0.5 * self.straight_length + self.outer_edge, self.outer_edge)

    @property
    def lanelets_per_lane(self) -> int:
        return len(self.lanelets) // self.n_lanes

    def _piece_counts(self) -> tuple[int, int]:
        n_straight = math.ceil(self.straight_length / self.lanelet_length - 1e-9)
        n_curve = math.ceil(math.pi * self.curve_radius / self.lanelet_length - 1e-9)
        return n_straight, n_curve

    def _piece_lengths(self, lane: int) -> tuple[float, float, float, float]:
        arc = math.pi * self.lane_radius(lane)
        return (self.straight_length, arc, self.straight_length, arc)

    def lanelet(self, lanelet_id: int) -> Lanelet:
        return self.lanelets[lanelet_id]

    # -- frames -----------------------------------------------------------

    def to_local(self, x: float, y: float) -> tuple[float, float]:
        dx, dy = x - self.origin[0], y - self.origin[1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return c * dx + s * dy, -s * dx + c * dy

    def to_world(self, x: float, y: float) -> tuple[float, float]:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.origin[0] + c * x - s * y, self.origin[1] + s * x + c * y

    # -- projection -------------------------------------------------------

    def project(self, x: float, y: float) -> tuple[int, float, float, float, float]:
        """Project a world point onto the base segment.

        Returns ``(piece, frac, d, nx, ny)``: loop piece, fraction along it,
        distance from the base segment and the outward unit normal (world
        frame).
        """
        lx, ly = self.to_local(x, y)
        half = 0.5 * self.straight_length
        if -half <= lx <= half:
            d = abs(ly)
            if ly < 0.0:
                piece, frac, nx, ny = _BOTTOM, (lx + half) / self.straight_length, 0.0, -1.0
            else:
                piece, frac, nx, ny = _TOP, (half - lx) / self.straight_length, 0.0, 1.0
        else:
            cx = half if lx > half else -half
            dx, dy = lx - cx, ly
            d = math.hypot(dx, dy)
            nx, ny = dx / d, dy / d
            phi = math.atan2(dy, dx)
            if lx > half:
                piece, frac = _RIGHT, (phi + 0.5 * math.pi) / math.pi
            else:
                piece, frac = _LEFT, ((phi - 0.5 * math.pi) % (2.0 * math.pi)) / math.pi
        frac = min(max(frac, 0.0), 1.0)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return piece, frac, d, c * nx - s * ny, s * nx + c * ny

    def arc_length_at(self, lane: int, piece: int, frac: float) -> float:
        lengths = self._piece_lengths(lane)
        return sum(lengths[:piece]) + frac * lengths[piece]

    def piece_at(self, lane: int, s: float) -> tuple[int, float]:
        s = s % self.lane_length(lane)
        for piece, length in enumerate(self._piece_lengths(lane)):
            if s <= length or piece == 3:
                return piece, min(s / length, 1.0)
            s -= length
        raise AssertionError("unreachable")

    def lanelet_index_at(self, piece: int, frac: float) -> int:
        n_straight, n_curve = self._piece_counts()
        counts = (n_straight, n_curve, n_straight, n_curve)
        start = sum(counts[:piece])
        return start + min(int(frac * counts[piece]), counts[piece] - 1)

    def pose_at(self, lane: int, s: float, offset: float = 0.0) -> tuple[float, float, float]:
        """World ``(x, y, heading)`` at arc length ``s`` on ``lane``.

        ``offset`` shifts the point laterally, positive to the left.
        """
        piece, frac = self.piece_at(lane, s)
        return self.pose_at_piece(self.lane_radius(lane) - offset, piece, frac)

    def pose_at_piece(self, dist: float, piece: int, frac: float) -> tuple[float, float, float]:
        half = 0.5 * self.straight_length
        if piece == _BOTTOM:
            lx, ly, h = -half + frac * self.straight_length, -dist, 0.0
        elif piece == _TOP:
            lx, ly, h = half - frac * self.straight_length, dist, math.pi
        else:
            phi = frac * math.pi + (-0.5 * math.pi if piece == _RIGHT else 0.5 * math.pi)
            cx = half if piece == _RIGHT else -half
            lx, ly = cx + dist * math.cos(phi), dist * math.sin(phi)
            h = phi + 0.5 * math.pi
        x, y = self.to_world(lx, ly)
        return x, y, wrap_angle(h + self.rotation)

    def road_heading(self, nx: float, ny: float) -> float:
        """Travel direction for an outward normal (counter-clockwise loop)."""
        return math.atan2(nx, -ny)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; angles already in range are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def build_loop_map(
    n_lanes: int = 2,
    lane_width: float = 0.3,
    straight_length: float = 2.0,
    curve_radius: float = 1.0,
    lanelet_length: float = 0.25,
    origin: tuple[float, float] = (0.0, 0.0),
    rotation: float = 0.0,
) -> MapGraph:
    """Build a closed stadium loop with ``n_lanes`` concentric lanes.

    Lanelets split each straight and each semicircle into equal parts; the
    partition is shared by all lanes, so lanelet ``i`` of one lane sits beside
    lanelet ``i`` of its neighbours.
    """
    if n_lanes < 2:
        raise MapError(f"need at least 2 lanes, got {n_lanes}")
    if min(lane_width, straight_length, curve_radius, lanelet_length) <= 0:
        raise MapError("all lengths must be positive")
    if lanelet_length >= straight_length:
        raise MapError("lanelet_length must be shorter than straight_length")
    if curve_radius <= lane_width * n_lanes:
        raise MapError(
            f"curve_radius {curve_radius} too small for {n_lanes} lanes of width {lane_width}"
        )

    skeleton = MapGraph(
        lanelets=(),
        n_lanes=n_lanes,
        lane_width=lane_width,
        straight_length=straight_length,
        curve_radius=curve_radius,
        lanelet_length=lanelet_length,
        origin=(float(origin[0]), float(origin[1])),
        rotation=float(rotation),
    )
    n_straight, n_curve = skeleton._piece_counts()
    counts = (n_straight, n_curve, n_straight, n_curve)
    per_lane = sum(counts)

    lanelets = []
    for lane in range(n_lanes):
        radius = skeleton.lane_radius(lane)
        lengths = skeleton._piece_lengths(lane)
        idx = 0
        s_offset = 0.0
        for piece, count in enumerate(counts):
            seg_len = lengths[piece] / count
            n_pts = max(2, math.ceil(seg_len / _POINT_SPACING) + 1)
            for k in range(count):
                fracs = np.linspace(k / count, (k + 1) / count, n_pts)
                center = [skeleton.pose_at_piece(radius, piece, f)[:2] for f in fracs]
                left = [skeleton.pose_at_piece(radius - 0.5 * lane_width, piece, f)[:2] for f in fracs]
                right = [skeleton.pose_at_piece(radius + 0.5 * lane_width, piece, f)[:2] for f in fracs]
                lid = lane * per_lane + idx
                lanelets.append(
                    Lanelet(
                        id=lid,
                        lane_index=lane,
                        centerline=np.array(center),
                        left_boundary=np.array(left),
                        right_boundary=np.array(right),
                        successor_id=lane * per_lane + (idx + 1) % per_lane,
                        left_neighbor_id=(lane - 1) * per_lane + idx if lane > 0 else None,
                        right_neighbor_id=(lane + 1) * per_lane + idx if lane < n_lanes - 1 else None,
                        s_start=s_offset + k * seg_len,
                        s_end=s_offset + (k + 1) * seg_len,
                    )
                )
                idx += 1
            s_offset += lengths[piece]

    return MapGraph(
        lanelets=tuple(lanelets),
        n_lanes=n_lanes,
        lane_width=lane_width,
        straight_length=straight_length,
        curve_radius=curve_radius,
        lanelet_length=lanelet_length,
        origin=skeleton.origin,
        rotation=skeleton.rotation,
    )


def locate(map_: MapGraph, position) -> Location:
    """Nearest lanelet to ``position`` and the signed offset from its centerline.

    The offset is positive toward the left boundary.

    Raises:
        OffMapError: the point is more than two lane widths from every centerline.
    """
    piece, frac, d, _, _ = map_.project(float(position[0]), float(position[1]))
    lane = int(round((d - map_.curve_radius) / map_.lane_width))
    lane = min(max(lane, 0), map_.n_lanes - 1)
    offset = map_.lane_radius(lane) - d
    if abs(offset) > 2.0 * map_.lane_width:
        raise OffMapError(f"point {tuple(position)} is {abs(offset):.3f} m from the nearest centerline")
    idx = map_.lanelet_index_at(piece, frac)
    return Location(
        lanelet_id=lane * map_.lanelets_per_lane + idx,
        lane_index=lane,
        arc_length=map_.arc_length_at(lane, piece, frac),
        lateral_offset=offset,
        piece=piece,
        frac=frac,
    )


def reference_path_for(
    map_: MapGraph,
    position,
    target_lane: int,
    n_points: int = 6,
    spacing: float = 0.2,
) -> ReferencePath:
    """Sample ``n_points`` centerline points of ``target_lane`` ahead of ``position``.

    The path starts from the target-lane arc length closest to the vehicle
    and places its first point one ``spacing`` further along the loop, so the
    lane-keeping and lane-change cases share one rule.
    """
    if not 0 <= target_lane < map_.n_lanes:
        raise MapError(f"target_lane {target_lane} outside [0, {map_.n_lanes})")
    if n_points < 1:
        raise MapError("n_points must be >= 1")
    loc = locate(map_, position)
    s0 = map_.arc_length_at(target_lane, loc.piece, loc.frac)
    length = map_.lane_length(target_lane)
    arcs = np.array([(s0 + k * spacing) % length for k in range(1, n_points + 1)])
    points = np.array([map_.pose_at(target_lane, s)[:2] for s in arcs])
    source = target_lane * map_.lanelets_per_lane + map_.lanelet_index_at(loc.piece, loc.frac)
    return ReferencePath(points=points, target_lane=target_lane, source_lanelet_id=source, arc_lengths=arcs)


# -- serialization ------------------------------------------------------------

MAP_FORMAT = "lanemoe.map/1"


def map_to_dict(map_: MapGraph) -> dict:
    return {
        "format": MAP_FORMAT,
        "geometry": {
            "kind": "stadium",
            "n_lanes": map_.n_lanes,
            "lane_width": map_.lane_width,
            "straight_length": map_.straight_length,
            "curve_radius": map_.curve_radius,
            "lanelet_length": map_.lanelet_length,
            "origin": list(map_.origin),
            "rotation": map_.rotation,
        },
        "loop_length": map_.loop_length,
        "lanelets": [
            {
                "id": ll.id,
                "lane_index": ll.lane_index,
                "successor_id": ll.successor_id,
                "left_neighbor_id": ll.left_neighbor_id,
                "right_neighbor_id": ll.right_neighbor_id,
                "centerline": ll.centerline.tolist(),
                "left_boundary": ll.left_boundary.tolist(),
                "right_boundary": ll.right_boundary.tolist(),
            }
            for ll in map_.lanelets
        ],
    }


def map_from_dict(doc: dict) -> MapGraph:
    if doc.get("format") != MAP_FORMAT:
        raise MapError(f"unsupported map format {doc.get('format')!r}")
    geo = dict(doc["geometry"])
    if geo.pop("kind", "stadium") != "stadium":
        raise MapError("only stadium maps are supported")
    geo["origin"] = tuple(geo.get("origin", (0.0, 0.0)))
    map_ = build_loop_map(**geo)
    if "lanelets" in doc and len(doc["lanelets"]) != len(map_.lanelets):
        raise MapError("lanelet list does not match the stored geometry")
    return map_


def save_map(map_: MapGraph, path) -> None:
    Path(path).write_text(json.dumps(map_to_dict(map_)))


def load_map(spec: str, **params) -> MapGraph:
    """Resolve a ``--map`` argument: ``builtin:stadium`` or a JSON file path."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name != "stadium":
            raise MapError(f"unknown builtin map {name!r}")
        return build_loop_map(**params)
    return map_from_dict(json.loads(Path(spec).read_text()))
