"""
Command-line entry point for the multi-robot navigation simulator.

Usage:
    python simulate.py run --episode data/suite/ep_0000.episode --seed 7 --out data/runs
    python simulate.py batch --suite data/suite --agents 1..4 --rcomm 5.0 --tau 10
    python simulate.py eval --traces data/runs
    python simulate.py render --trace data/runs/ep_0000_n4/trace.jsonl --kind trajectory --out traj.svg
    python simulate.py gen-scenes --count 20 --seed 0 --out data/suite
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import List, Optional, Sequence

from src.config import COOLDOWN_STEPS, LOG_LEVEL, MAX_STEPS, R_COMM_M
from src.coordination import CommConfig
from src.errors import SimulationError
from src.gridworld import DetectionNoise, load_scene
from src.harness import (
    RunConfig,
    default_out_dir,
    eval_traces,
    run_batch,
    run_comm_ablation,
    run_episode,
    suite_configs,
    write_report,
)
from src.render import render
from src.scenegen import write_suite

logger = logging.getLogger(__name__)


def parse_agents(text: str) -> List[int]:
    """
    "1..4" -> [1, 2, 3, 4]; "2,4" -> [2, 4]; "3" -> [3].
    """
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"Invalid agent range {text!r}.") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"Agent counts must be >= 1, got {text!r}.")
    return values


def _base_config(args: argparse.Namespace, episode_path: str = "") -> RunConfig:
    return RunConfig(
        episode_path=episode_path,
        scene_dir=args.scene_dir,
        comm=CommConfig(r_comm=args.rcomm, tau=args.tau),
        default_noise=DetectionNoise(p_miss=args.p_miss, p_fp=args.p_fp),
        max_steps=args.max_steps,
        oracle_alignment=args.oracle_alignment,
    )


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = dataclasses.replace(
        _base_config(args, args.episode),
        n_agents=args.agents,
        seed=args.seed,
        out_dir=args.out,
        dump_alignments=args.dump_alignments,
    )
    result = run_episode(cfg)
    row = {
        "episode_id": result.outcome.episode_id,
        "found": result.outcome.found_count,
        "goals": result.outcome.n_goals,
        "steps": result.outcome.steps,
        "max_dj": round(result.outcome.max_distance, 4),
        "d_star": result.outcome.d_star,
        "trace_hash": result.trace.hash,
        "run_dir": result.run_dir,
    }
    _print_json(row)
    return 0


def cmd_batch(args: argparse.Namespace) -> int:
    cfgs = suite_configs(args.suite, args.agents, _base_config(args))
    if not cfgs:
        print(f"No .episode files found in {args.suite}.", file=sys.stderr)
        return 1
    out_dir = args.out or default_out_dir("batch")
    if args.ablation:
        report = run_comm_ablation(cfgs, r_off=args.r_off, out_dir=out_dir, workers=args.workers)
        _print_json({"on": report["on"]["aggregate"], "off": report["off"]["aggregate"], "paired": len(report["paired"])})
        evaluated = report["on"]["evaluated"]
    else:
        report = run_batch(cfgs, out_dir=out_dir, workers=args.workers)
        _print_json({"aggregate": report["aggregate"], "failed": report["failed"]})
        evaluated = report["evaluated"]
    return 0 if evaluated else 1


def cmd_eval(args: argparse.Namespace) -> int:
    report = eval_traces(args.traces)
    if args.out:
        write_report(report, args.out, prefix="eval_")
    violations = sum(len(a["cooldown"]) + len(a["causality"]) for a in report["audits"])
    _print_json({"aggregate": report["aggregate"], "failed": report["failed"], "violations": violations})
    if not report["evaluated"] and not report["failed"]:
        print(f"No runs found under {args.traces}.", file=sys.stderr)
        return 1
    return 1 if violations else 0


def cmd_render(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene) if args.scene else None
    path = render(args.kind, args.trace, args.out, scene)
    print(path)
    return 0


def cmd_gen_scenes(args: argparse.Namespace) -> int:
    scenes, episodes = write_suite(args.out, args.count, args.seed, n_agents=args.agents, n_goals=args.goals, max_steps=args.max_steps)
    print(f"Wrote {len(scenes)} scenes and {len(episodes)} episodes to {args.out}")
    return 0


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scene-dir", default=None, help="Directory holding <scene_id>.scene files (default: next to the episode).")
    parser.add_argument("--rcomm", type=float, default=R_COMM_M, help="Communication range in meters.")
    parser.add_argument("--tau", type=int, default=COOLDOWN_STEPS, help="Full-map cooldown in steps.")
    parser.add_argument("--max-steps", type=int, default=None, help="Override the episode step budget.")
    parser.add_argument("--p-miss", type=float, default=0.0, help="Detection miss probability.")
    parser.add_argument("--p-fp", type=float, default=0.0, help="Spurious detection probability per step.")
    parser.add_argument("--oracle-alignment", action="store_true", help="Seed transform caches with ground-truth frames.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Decentralised multi-robot multi-object navigation simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one episode and write its trace.")
    run.add_argument("--episode", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--agents", type=int, default=None, help="Use the first N start poses.")
    run.add_argument("--out", default=None)
    run.add_argument("--dump-alignments", action="store_true", help="Write every accepted alignment for merge overlays.")
    _add_run_options(run)
    run.set_defaults(func=cmd_run)

    batch = sub.add_parser("batch", help="Evaluate every episode of a suite per team size.")
    batch.add_argument("--suite", required=True)
    batch.add_argument("--agents", type=parse_agents, default=[1, 2, 3, 4], help='Team sizes, e.g. "1..4" or "2,4".')
    batch.add_argument("--workers", type=int, default=1)
    batch.add_argument("--ablation", action="store_true", help="Also run with communication off and pair the results.")
    batch.add_argument("--r-off", type=float, default=0.1, help="Communication range for the ablation's off arm.")
    batch.add_argument("--out", default=None)
    _add_run_options(batch)
    batch.set_defaults(func=cmd_batch)

    evaluate = sub.add_parser("eval", help="Recompute metrics and protocol audits from written traces.")
    evaluate.add_argument("--traces", required=True)
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(func=cmd_eval)

    draw = sub.add_parser("render", help="Render a trace or map snapshot to SVG.")
    draw.add_argument("--trace", required=True, help="trace.jsonl, alignment stem or map snapshot stem.")
    draw.add_argument("--kind", choices=("trajectory", "merge_overlay", "frontier"), default="trajectory")
    draw.add_argument("--scene", default=None, help="Scene file drawn under trajectories.")
    draw.add_argument("--out", required=True)
    draw.set_defaults(func=cmd_render)

    gen = sub.add_parser("gen-scenes", help="Write a seeded synthetic scene/episode suite.")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--agents", type=int, default=4)
    gen.add_argument("--goals", type=int, default=3)
    gen.add_argument("--max-steps", type=int, default=MAX_STEPS)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_scenes)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=LOG_LEVEL.upper(), format="%(asctime)s %(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, SimulationError, ValueError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
