"""Evaluation: collision counting over seeded rollouts, threshold sweeps, decision analysis."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import build_loop_map, reference_path_for
from .neural import SchemaMismatchError, load_checkpoint
from .observation import observe_high, observe_low, schema_hash
from .policy import GREEDY, ExpertPool, HighLevelPolicy, LowLevelExpert
from .reward import HLRewardConfig, LLRewardConfig
from .sim import ControlAction, SimConfig, detect_collisions, move, respawn_collided, spawn, with_targets
from .training import EnvSpec

DECISION_MODES = ("hierarchy", "fixed", "random")


class TraceError(ValueError):
    """Malformed trace file."""


@dataclass
class System:
    env: EnvSpec
    gate: HighLevelPolicy
    experts: ExpertPool
    manifest: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    seeds: list[int]
    counts: list[int]  # combined per-seed collision events
    agent_counts: list[int]
    boundary_counts: list[int]
    steps: int
    mode: str = "hierarchy"
    config: dict = field(default_factory=dict)

    @property
    def avg(self) -> float:
        return float(statistics.fmean(self.counts))

    @property
    def std(self) -> float:
        return float(statistics.stdev(self.counts)) if len(self.counts) > 1 else 0.0

    @property
    def best(self) -> int:
        return min(self.counts)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.update(avg=self.avg, std=self.std, best=self.best, total=sum(self.counts))
        return doc


# -- loading --------------------------------------------------------------------


def load_system(manifest_path) -> System:
    """Rebuild map, configs and policies from a training manifest.

    Raises:
        SchemaMismatchError: manifest or a checkpoint was written for another observation layout.
    """
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    current = schema_hash()
    if doc.get("schema_hash") != current:
        raise SchemaMismatchError(f"manifest schema {doc.get('schema_hash')} does not match {current}")
    geo = dict(doc["map"])
    geo.pop("kind", None)
    geo["origin"] = tuple(geo.get("origin", (0.0, 0.0)))
    map_ = build_loop_map(**geo)
    sim = SimConfig(**doc["sim"])
    env = EnvSpec(
        map_, sim, HLRewardConfig(**doc["hl_reward"]), LLRewardConfig(**doc["ll_reward"]), doc.get("ref_spacing", 0.2)
    )
    base = manifest_path.parent
    gate = load_gate(base / doc["gate"])
    experts = [load_expert(base / name) for name in doc["experts"]]
    return System(env, gate, ExpertPool(experts), doc)


def load_gate(path) -> HighLevelPolicy:
    nets, ck = load_checkpoint(path, schema_hash())
    gate = HighLevelPolicy(int(ck["meta"]["n_lanes"]))
    gate.actor, gate.critic = nets["actor"], nets["critic"]
    return gate


def load_expert(path) -> LowLevelExpert:
    nets, ck = load_checkpoint(path, schema_hash())
    meta = ck["meta"]
    expert = LowLevelExpert(int(meta["target_lane"]), meta["low"], meta["high"])
    expert.actor, expert.critic = nets["actor"], nets["critic"]
    return expert


# -- rollouts -------------------------------------------------------------------


def _r(x: float) -> float:
    return round(float(x), 6)


def run_rollout(
    system: System,
    seed: int,
    steps: int,
    mode: str = "hierarchy",
    trace_path=None,
    sim_overrides: dict | None = None,
) -> list[dict]:
    """Greedy closed-loop rollout; returns one trace record per step.

    ``mode`` selects the lane decisions: the trained gate (``hierarchy``),
    the agent's current lane (``fixed``) or a uniform random lane (``random``).
    Experts always act greedily.
    """
    if mode not in DECISION_MODES:
        raise ValueError(f"unknown decision mode {mode!r}")
    env = system.env
    sim = replace(env.sim, seed=seed, **(sim_overrides or {}))
    map_ = env.map
    rng = np.random.default_rng([seed, 7919])
    world = spawn(map_, sim)
    n = world.n_agents
    records = []
    out = open(trace_path, "w") if trace_path is not None else None
    try:
        for _ in range(steps):
            lanes_before = [world.locations[i].lane_index for i in range(n)]
            if mode == "hierarchy":
                hl_obs = np.array([observe_high(world, i, map_, sim) for i in range(n)])
                dec = [int(d) for d in system.gate.act(hl_obs, GREEDY, rng)[0]]
            elif mode == "fixed":
                dec = lanes_before
            else:
                dec = [int(d) for d in rng.integers(0, map_.n_lanes, size=n)]
            world = with_targets(world, dec)
            refs = [reference_path_for(map_, world.vehicles[i].position, dec[i], 6, env.ref_spacing) for i in range(n)]
            ll_obs = np.array([observe_low(world, i, map_, refs[i], sim, env.ref_spacing) for i in range(n)])
            _, a, _, _ = system.experts.act(dec, ll_obs, GREEDY, rng)
            acts = [ControlAction(float(a[i, 0]), float(a[i, 1])) for i in range(n)]
            mid = detect_collisions(move(world, acts, map_, sim), map_)
            world = respawn_collided(mid, map_, sim)
            rec = trace_record(mid, dec, lanes_before, world.respawned)
            records.append(rec)
            if out is not None:
                out.write(json.dumps(rec, separators=(",", ":")) + "\n")
    finally:
        if out is not None:
            out.close()
    return records


def trace_record(world, decisions, lanes_before, respawned) -> dict:
    """One JSON-lines trace entry (poses are taken before any respawn)."""
    return {
        "step_index": world.step_index,
        "vehicles": [
            {
                "id": i,
                "x": _r(v.x),
                "y": _r(v.y),
                "heading": _r(v.heading),
                "speed": _r(v.speed),
                "lane": v.lane,
                "is_slow": v.is_slow,
            }
            for i, v in enumerate(world.vehicles)
        ],
        "decisions": [int(d) for d in decisions],
        "lanes_before": [int(x) for x in lanes_before],
        "collisions": [[bool(a), bool(b)] for a, b in world.collision_flags],
        "respawned": [bool(x) for x in respawned],
    }


def read_trace(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}:{line_no}: {exc}") from exc
    return records


def count_collision_events(records: Iterable[dict]) -> dict[str, int]:
    """Rising edges of the per-agent collision flags.

    ``total`` counts rising edges of "agent or boundary", so a step where
    both flags rise counts once there.
    """
    counts = {"agent": 0, "boundary": 0, "total": 0}
    prev = None
    for rec in records:
        flags = rec.get("collisions")
        if flags is None:
            raise TraceError(f"record {rec.get('step_index')} has no collision flags")
        if prev is None:
            prev = [[False, False] for _ in flags]
        for i, (a, b) in enumerate(flags):
            pa, pb = prev[i]
            counts["agent"] += a and not pa
            counts["boundary"] += b and not pb
            counts["total"] += (a or b) and not (pa or pb)
        prev = flags
    return counts


def evaluate(
    system: System,
    seeds: Sequence[int],
    steps: int = 2000,
    out_dir=None,
    mode: str = "hierarchy",
    sim_overrides: dict | None = None,
) -> EvalReport:
    """Collision events per seed for greedy rollouts of ``steps`` steps."""
    counts, agent, boundary = [], [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        trace = out_dir / f"trace_{mode}_seed{seed}.jsonl" if out_dir is not None else None
        c = count_collision_events(run_rollout(system, seed, steps, mode, trace, sim_overrides))
        counts.append(c["total"])
        agent.append(c["agent"])
        boundary.append(c["boundary"])
    snapshot = {
        "sim": asdict(replace(system.env.sim, **(sim_overrides or {}))),
        "hl_reward": asdict(system.env.hl_reward),
        "manifest_hash": system.manifest.get("content_hash"),
    }
    report = EvalReport(list(seeds), counts, agent, boundary, steps, mode, snapshot)
    if out_dir is not None:
        (out_dir / f"report_{mode}.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def sweep_threshold(manifests: dict[float, str], seeds: Sequence[int], steps: int, out_csv=None):
    """Evaluate one trained system per safety threshold; writes ``threshold,avg,std,best``."""
    if not manifests:
        raise FileNotFoundError("no manifests given for the threshold sweep")
    rows = []
    for threshold, path in manifests.items():
        if not Path(path).exists():
            raise FileNotFoundError(f"missing manifest for threshold {threshold}: {path}")
        rows.append((float(threshold), evaluate(load_system(path), seeds, steps)))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "avg", "std", "best"])
            for thr, rep in rows:
                w.writerow([thr, f"{rep.avg:.4f}", f"{rep.std:.4f}", rep.best])
    return rows


# -- decision analysis ----------------------------------------------------------


@dataclass(frozen=True)
class LaneChangeEvent:
    agent_id: int
    start_step: int
    end_step: int
    from_lane: int
    to_lane: int
    run_length: int
    lane_changed: bool
    completed: bool
    hesitation: bool
    outcome: str  # completed | unstable | hesitation | aborted | open


def _agent_series(records: list[dict]):
    if not records:
        raise TraceError("empty trace")
    n = None
    series = []
    last_step = -math.inf
    for rec in records:
        try:
            step = rec["step_index"]
            dec = rec["decisions"]
            before = rec["lanes_before"]
            flags = rec["collisions"]
            resp = rec.get("respawned", [False] * len(dec))
            vehicles = rec["vehicles"]
        except KeyError as exc:
            raise TraceError(f"trace record missing field {exc}") from exc
        if step <= last_step:
            raise TraceError(f"step_index {step} is not increasing")
        last_step = step
        if n is None:
            n = len(dec)
        if not (len(dec) == len(before) == len(flags) == n):
            raise TraceError(f"inconsistent agent count at step {step}")
        after = [vehicles[i]["lane"] for i in range(n)]
        series.append((step, dec, before, after, [bool(a or b) for a, b in flags], resp))
    return n, series


def analyze_decisions(records: list[dict], consistency_window: int = 10) -> tuple[list[LaneChangeEvent], dict]:
    """Split each agent's decision sequence into runs and label lane changes.

    A run whose decision differs from the lane the agent was in when the run
    started is a lane-change attempt. It is ``completed`` when the agent ends
    the run in the decided lane after at least ``consistency_window``
    consecutive identical decisions, ``unstable`` when it got there with a
    shorter run, a ``hesitation`` when it reverted within fewer than 3 steps
    without leaving its lane, ``aborted`` otherwise, and ``open`` when the
    trace ends mid-manoeuvre.
    """
    n, series = _agent_series(records)
    events = []
    for agent in range(n):
        runs = []  # (start_idx, end_idx, decision)
        start = 0
        for k in range(1, len(series) + 1):
            at_end = k == len(series)
            if at_end or series[k][1][agent] != series[start][1][agent] or series[k - 1][5][agent] or series[k - 1][4][agent]:
                runs.append((start, k - 1, series[start][1][agent]))
                start = k
        for r_idx, (a, b, d) in enumerate(runs):
            from_lane = series[a][2][agent]
            if d == from_lane:
                continue
            length = b - a + 1
            crashed = series[b][4][agent]
            changed = not crashed and series[b][3][agent] == d
            stayed = all(series[k][3][agent] == from_lane for k in range(a, b + 1))
            next_dec = runs[r_idx + 1][2] if r_idx + 1 < len(runs) else None
            if changed:
                outcome = "completed" if length >= consistency_window else "unstable"
            elif length < 3 and stayed and next_dec == from_lane and not crashed:
                outcome = "hesitation"
            elif b == len(series) - 1 and not crashed:
                outcome = "open"
            else:
                outcome = "aborted"
            events.append(
                LaneChangeEvent(
                    agent_id=agent,
                    start_step=series[a][0],
                    end_step=series[b][0],
                    from_lane=from_lane,
                    to_lane=d,
                    run_length=length,
                    lane_changed=changed,
                    completed=outcome == "completed",
                    hesitation=outcome == "hesitation",
                    outcome=outcome,
                )
            )
    events.sort(key=lambda e: (e.start_step, e.agent_id))
    changed = [e for e in events if e.lane_changed]
    summary = {
        "events": len(events),
        "consistency_window": consistency_window,
        **{k: sum(e.outcome == k for e in events) for k in ("completed", "unstable", "hesitation", "aborted", "open")},
        "lane_changes": len(changed),
        "mean_run_length": float(np.mean([e.run_length for e in changed])) if changed else 0.0,
    }
    return events, summary


# -- expert competence ------------------------------------------------------------


def expert_competence(
    env: EnvSpec,
    expert: LowLevelExpert,
    n_starts: int = 50,
    steps: int = 400,
    hold_steps: int = 100,
    seed: int = 10_000,
) -> dict:
    """Fraction of greedy single-agent runs that reach and hold the expert's lane.

    A run reaches the lane when the agent stays within a quarter lane width of
    the target centerline for ``hold_steps`` consecutive steps.
    """
    map_ = env.map
    lane = expert.target_lane
    tol = 0.25 * map_.lane_width
    reached, clean = 0, 0
    rng = np.random.default_rng(seed)
    for k in range(n_starts):
        sim = replace(env.sim, n_agents=1, n_slow=0, seed=seed + k)
        world = with_targets(spawn(map_, sim), [lane])
        run = best = 0
        hit_boundary = False
        for _ in range(steps):
            ref = reference_path_for(map_, world.vehicles[0].position, lane, 6, env.ref_spacing)
            obs = observe_low(world, 0, map_, ref, sim, env.ref_spacing)[None, :]
            _, a, _, _ = expert.act(obs, GREEDY, rng)
            world = detect_collisions(move(world, [ControlAction(float(a[0, 0]), float(a[0, 1]))], map_, sim), map_)
            hit_boundary |= bool(world.collision_flags[0, 1])
            loc = world.locations[0]
            run = run + 1 if loc.lane_index == lane and abs(loc.lateral_offset) < tol else 0
            best = max(best, run)
            world = with_targets(respawn_collided(world, map_, sim), [lane])
        reached += best >= hold_steps
        clean += not hit_boundary
    return {"starts": n_starts, "reach_rate": reached / n_starts, "boundary_free_rate": clean / n_starts}
