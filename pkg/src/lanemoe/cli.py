"""Command-line entry point: ``lanemoe <command> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 on a usage or configuration error and 2 when
the command itself fails (missing files, schema mismatch, aborted training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import evaluation as ev
from .config import ConfigError, RunConfig, load_config, save_config
from .observation import schema
from .render import render_trace
from .training import (
    TrainingAborted,
    build_policies,
    params_hash,
    run_curriculum,
    train_experts,
    train_gate,
    write_manifest,
)

log = logging.getLogger("lanemoe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int, help="override the simulation and training seed")
    p.add_argument("--out", type=Path, help="output directory (default: runs/<command>-<timestamp>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lanemoe", description="Hierarchical lane-change policies: train, evaluate, inspect.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-expert", help="train one lane expert")
    _common(p)
    p.add_argument("--lane", type=int, required=True)

    p = sub.add_parser("train-gate", help="train the lane-selection gate on frozen experts in --out")
    _common(p)

    p = sub.add_parser("train", help="full curriculum: every expert, then the gate")
    _common(p)

    p = sub.add_parser("evaluate", help="collision counts of a trained system over seeds")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="default: the [eval] seeds of the config")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=ev.DECISION_MODES, default="hierarchy")

    p = sub.add_parser("sweep-threshold", help="evaluate one trained system per safety threshold")
    _common(p)
    p.add_argument(
        "--manifest",
        action="append",
        default=[],
        metavar="THRESHOLD=PATH",
        help="explicit manifest per threshold; otherwise <out>/threshold-<t>/manifest.json",
    )
    p.add_argument("--train", action="store_true", help="train systems for thresholds without a manifest")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("analyze", help="lane-change events and decision consistency of a trace")
    _common(p)
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--window", type=int, help="consistency window (default from config)")

    p = sub.add_parser("rollout", help="one seeded rollout written as a JSON-lines trace")
    _common(p)
    p.add_argument("--manifest", type=Path, help="trained system; untrained policies when omitted")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--mode", choices=ev.DECISION_MODES, default="hierarchy")

    p = sub.add_parser("schema", help="print the observation layouts")
    _common(p)

    p = sub.add_parser("render", help="trace to SVG frames and a summary CSV")
    _common(p)
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--every", type=int, default=1)
    return parser


def _out_dir(args, create: bool = True) -> Path:
    out = args.out or Path("runs") / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _progress(it, reward, rec):
    print(f"iter {it:4d}  reward {reward:10.4f}  loss {rec['loss']:.4f}", file=sys.stderr)


def _print(doc) -> None:
    print(json.dumps(doc, indent=2))


def cmd_train_expert(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    if not 0 <= args.lane < cfg.map.n_lanes:
        raise UsageError(f"--lane must be in [0, {cfg.map.n_lanes - 1}]")
    env = cfg.env()
    policies = build_policies(env.map.n_lanes, env.sim, cfg.train)
    train_experts(env, policies, cfg.train, out, lanes=[args.lane], progress=_progress)
    save_config(cfg, out / "config.ini")
    _print({"expert": str(out / f"expert-{args.lane}.json")})


def cmd_train_gate(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    env = cfg.env()
    policies = build_policies(env.map.n_lanes, env.sim, cfg.train)
    for lane in range(env.map.n_lanes):
        path = out / f"expert-{lane}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing expert checkpoint {path}; run train-expert --lane {lane} first")
        policies["experts"].experts[lane] = ev.load_expert(path)
    train_gate(env, policies, cfg.train, out, progress=_progress)
    hashes = [params_hash(e) for e in policies["experts"].experts]
    save_config(cfg, out / "config.ini")
    _print({"manifest": str(write_manifest(out, env, cfg.train, {"expert_hashes": hashes}))})


def cmd_train(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    save_config(cfg, out / "config.ini")
    _print({"manifest": str(run_curriculum(cfg.env(), cfg.train, out, progress=_progress))})


def cmd_evaluate(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    system = ev.load_system(args.manifest)
    seeds = args.seeds or list(cfg.eval.seeds)
    report = ev.evaluate(system, seeds, args.steps or cfg.eval.steps, out, args.mode)
    _print(report.to_dict())


def _parse_manifest_args(items) -> dict[float, Path]:
    found = {}
    for item in items:
        thr, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--manifest expects THRESHOLD=PATH, got {item!r}")
        try:
            found[float(thr)] = Path(path)
        except ValueError as exc:
            raise UsageError(f"bad threshold {thr!r}") from exc
    return found


def cmd_sweep_threshold(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    manifests = _parse_manifest_args(args.manifest)
    for thr in cfg.eval.thresholds:
        if thr in manifests:
            continue
        path = out / f"threshold-{thr}" / "manifest.json"
        if not path.exists() and args.train:
            tcfg = replace(cfg, reward_high=replace(cfg.reward_high, safety_threshold=thr))
            (path.parent).mkdir(parents=True, exist_ok=True)
            run_curriculum(tcfg.env(), tcfg.train, path.parent, progress=_progress)
        manifests[thr] = path
    rows = ev.sweep_threshold(
        dict(sorted(manifests.items(), reverse=True)),
        args.seeds or list(cfg.eval.seeds),
        args.steps or cfg.eval.steps,
        out / "threshold_sweep.csv",
    )
    _print([{"threshold": t, "avg": r.avg, "std": r.std, "best": r.best} for t, r in rows])


def cmd_analyze(args, cfg: RunConfig) -> None:
    events, summary = ev.analyze_decisions(ev.read_trace(args.trace), args.window or cfg.eval.consistency_window)
    doc = {"summary": summary, "events": [e.__dict__ for e in events]}
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "analysis.json").write_text(json.dumps(doc, indent=2))
    _print(summary)


def cmd_rollout(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    if args.manifest is not None:
        system = ev.load_system(args.manifest)
    else:
        env = cfg.env()
        policies = build_policies(env.map.n_lanes, env.sim, cfg.train)
        system = ev.System(env, policies["gate"], policies["experts"])
    seed = args.seed if args.seed is not None else cfg.sim.seed
    trace = out / f"trace_seed{seed}.jsonl"
    records = ev.run_rollout(system, seed, args.steps, args.mode, trace)
    _print({"trace": str(trace), "steps": len(records), **ev.count_collision_events(records)})


def cmd_schema(args, cfg: RunConfig) -> None:
    doc = schema()
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "schema.json").write_text(json.dumps(doc, indent=2))
    _print(doc)


def cmd_render(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    if args.every < 1:
        raise UsageError("--every must be at least 1")
    info = render_trace(ev.read_trace(args.trace), cfg.map.build(), cfg.sim, out, args.every)
    _print({"out": str(out), **info})


COMMANDS = {
    "train-expert": cmd_train_expert,
    "train-gate": cmd_train_gate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep-threshold": cmd_sweep_threshold,
    "analyze": cmd_analyze,
    "rollout": cmd_rollout,
    "schema": cmd_schema,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"{parser.format_usage()}lanemoe: config error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError, ev.TraceError, TrainingAborted, FloatingPointError) as exc:
        print(f"lanemoe: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
