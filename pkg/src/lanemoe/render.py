"""Static SVG frames and a per-step summary table from a rollout trace."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geometry import MapGraph
from .sim import SimConfig, _corner_list

_AGENT_COLOR = "#1f77b4"
_SLOW_COLOR = "#7f7f7f"
_CRASH_COLOR = "#d62728"


def _edge_points(map_: MapGraph, dist: float, per_piece: int = 24) -> list[tuple[float, float]]:
    pts = []
    for piece in range(4):
        for frac in np.linspace(0.0, 1.0, per_piece, endpoint=False):
            x, y, _ = map_.pose_at_piece(dist, piece, float(frac))
            pts.append((x, y))
    return pts


def _poly(points, **attrs) -> str:
    coords = " ".join(f"{x:.4f},{-y:.4f}" for x, y in points)
    extra = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<polygon points="{coords}" {extra}/>'


def frame_svg(record: dict, map_: MapGraph, sim: SimConfig, scale: float = 120.0) -> str:
    """One trace record as an SVG document (y axis flipped so +y points up)."""
    hx, hy = map_.half_extent
    span = 1.1 * max(hx, hy)
    ox, oy = map_.origin
    view = f"{ox - span:.3f} {-oy - span:.3f} {2 * span:.3f} {2 * span:.3f}"
    size = int(2 * span * scale)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="{view}">',
        _poly(_edge_points(map_, map_.outer_edge), fill="#dddddd", stroke="black", stroke_width=0.01),
        _poly(_edge_points(map_, map_.inner_edge), fill="white", stroke="black", stroke_width=0.01),
    ]
    collisions = record.get("collisions", [])
    for v in record["vehicles"]:
        i = v["id"]
        hit = i < len(collisions) and any(collisions[i])
        color = _SLOW_COLOR if v["is_slow"] else (_CRASH_COLOR if hit else _AGENT_COLOR)
        pts = _corner_list(v["x"], v["y"], v["heading"], sim.vehicle_length, sim.vehicle_width)
        parts.append(_poly(pts, fill=color))
    parts.append(f'<text x="{ox - span + 0.05:.3f}" y="{-oy - span + 0.15:.3f}" font-size="0.12">step {record["step_index"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def summary_rows(records: list[dict]) -> list[dict]:
    rows = []
    for rec in records:
        agents = [v for v in rec["vehicles"] if not v["is_slow"]]
        flags = rec["collisions"]
        rows.append(
            {
                "step_index": rec["step_index"],
                "agent_collisions": sum(bool(a) for a, _ in flags),
                "boundary_collisions": sum(bool(b) for _, b in flags),
                "mean_speed": round(float(np.mean([v["speed"] for v in agents])), 6) if agents else 0.0,
                "decisions_changing_lane": sum(d != l for d, l in zip(rec["decisions"], rec["lanes_before"])),
            }
        )
    return rows


def render_trace(records: list[dict], map_: MapGraph, sim: SimConfig, out_dir, every: int = 1) -> dict:
    """Write ``frame_XXXXX.svg`` for every ``every``-th record plus ``summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_frames = 0
    for k, rec in enumerate(records):
        if k % every:
            continue
        (out_dir / f"frame_{rec['step_index']:05d}.svg").write_text(frame_svg(rec, map_, sim))
        n_frames += 1
    rows = summary_rows(records)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        fields = ["step_index", "agent_collisions", "boundary_collisions", "mean_speed", "decisions_changing_lane"]
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return {"frames": n_frames, "rows": len(rows)}
