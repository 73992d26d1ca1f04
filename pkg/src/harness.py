"""
Episode runner, trace logging, batch evaluation and the communication ablation.

A run is fully determined by its RunConfig: one SeedSequence spawns the
world stream (observation noise) and one stream per robot (alignment RANSAC).
"""

from __future__ import annotations

import csv
import dataclasses
import glob
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.agent import AgentConfig, AgentState, Decision, Mode, decide, relative_transform, retract_goal_events
from src.alignment import AlignmentResult, alignment_to_json
from src.config import FORWARD_STEP_M, OUTPUT_DIR
from src.coordination import CommConfig, connectivity, message_kind, message_size
from src.errors import ConfigError, InfeasibleInstanceError
from src.gridworld import (
    Action,
    DetectionNoise,
    Episode,
    GridScene,
    Modality,
    NoiseModel,
    SensorConfig,
    distance_to_cells,
    load_episode,
    load_scene,
    observe,
    step_agent,
)
from src.mapping import pose_to_json, write_snapshot
from src.metrics import (
    EpisodeOutcome,
    GoalOutcome,
    aggregate,
    build_makespan_instance,
    optimal_makespan,
    outcome_row,
)

logger = logging.getLogger(__name__)

CSV_FIELDS = ("episode_id", "n", "m", "found", "sr", "mspl", "d_star", "max_dj", "steps")


@dataclass(frozen=True)
class RunConfig:
    episode_path: str
    scene_dir: Optional[str] = None
    n_agents: Optional[int] = None
    comm: CommConfig = field(default_factory=CommConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    noise: Mapping[Modality, DetectionNoise] = field(default_factory=dict)
    default_noise: DetectionNoise = field(default_factory=DetectionNoise)
    max_steps: Optional[int] = None
    seed: Optional[int] = None
    out_dir: Optional[str] = None
    oracle_alignment: bool = False
    dump_alignments: bool = False
    compute_optimal: bool = True
    agent: AgentConfig = field(default_factory=AgentConfig)

    def validate(self) -> None:
        if self.n_agents is not None and self.n_agents < 1:
            raise ConfigError(f"n_agents must be >= 1, got {self.n_agents}.")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}.")
        for profile in [self.default_noise, *self.noise.values()]:
            if not (0 <= profile.p_miss <= 1 and 0 <= profile.p_fp <= 1):
                raise ConfigError(f"Noise probabilities must lie in [0, 1]: {profile}.")

    def scene_path(self, scene_id: str) -> str:
        base = self.scene_dir or os.path.dirname(os.path.abspath(self.episode_path))
        return os.path.join(base, f"{scene_id}.scene")

    def summary(self) -> dict:
        return {
            "episode_path": self.episode_path,
            "n_agents": self.n_agents,
            "r_comm": self.comm.r_comm,
            "tau": self.comm.tau,
            "fov_deg": float(np.degrees(self.sensor.fov)),
            "range_m": self.sensor.range_m,
            "noise": {m.value: dataclasses.asdict(p) for m, p in sorted(self.noise.items())},
            "max_steps": self.max_steps,
            "seed": self.seed,
            "oracle_alignment": self.oracle_alignment,
        }


@dataclass
class EpisodeTrace:
    records: List[dict] = field(default_factory=list)

    def lines(self) -> List[str]:
        return [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]

    @property
    def hash(self) -> str:
        digest = hashlib.sha256()
        for line in self.lines():
            digest.update(line.encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()


@dataclass
class EpisodeResult:
    trace: EpisodeTrace
    outcome: EpisodeOutcome
    agents: List[AgentState]
    run_dir: Optional[str] = None


# ---------------------------------------------------------------------------
# Single episode


def validate_goal_event(scene: GridScene, episode: Episode, goal_id: int, x: float, y: float) -> bool:
    goal = next((g for g in episode.goals if g.goal_id == goal_id), None)
    if goal is None:
        return False
    return any(
        distance_to_cells((x, y), scene.instance(i).footprint, scene.resolution) <= goal.success_radius
        for i in sorted(goal.valid_instance_ids)
    )


def _seed_oracle_alignments(agents: Sequence[AgentState]) -> None:
    for receiver in agents:
        for sender in agents:
            if sender.robot_id == receiver.robot_id:
                continue
            result = AlignmentResult(relative_transform(receiver.frame, sender.frame), 0, 1.0, True)
            receiver.transform_cache.put(sender.robot_id, result)
            receiver.peer(sender.robot_id).cached_transform = result


def _record(step: int, robot: int, pose, decision: Decision, state: AgentState, blocked: bool, received, events, distance: float) -> dict:
    return {
        "step": step,
        "robot": robot,
        "pose": pose_to_json(pose),
        "action": decision.action.value,
        "blocked": blocked,
        "mode": state.mode.value,
        "goal": state.mode_goal,
        "target": list(state.mode_target) if state.mode_target is not None else None,
        "sent": [{"kind": message_kind(m), "receiver": m.receiver, "size": message_size(m)} for m in decision.outbox],
        "received": [{"kind": message_kind(m), "sender": m.sender, "sent_step": m.sent_step} for m in received],
        "goal_events": events,
        "distance": round(distance, 6),
    }


def run_episode(cfg: RunConfig) -> EpisodeResult:
    """
    Step the world until the budget runs out, every goal is found or every
    robot is done. Each step: connectivity, observe and decide for every
    robot, deliver outboxes (read next step), then move.
    """
    cfg.validate()
    header = load_episode(cfg.episode_path)
    scene = load_scene(cfg.scene_path(header.scene_id))
    episode = load_episode(cfg.episode_path, scene)
    n = cfg.n_agents or len(episode.start_poses)
    if n > len(episode.start_poses):
        raise ConfigError(f"Episode {episode.episode_id} has {len(episode.start_poses)} starts, asked for {n} robots.")
    max_steps = episode.max_steps if cfg.max_steps is None else cfg.max_steps
    seed = episode.seed if cfg.seed is None else cfg.seed

    world_seq, *agent_seqs = np.random.SeedSequence(seed).spawn(n + 1)
    world_rng = np.random.default_rng(world_seq)
    noise = NoiseModel.for_episode(scene, episode.goals, cfg.noise, cfg.default_noise)
    agent_cfg = dataclasses.replace(cfg.agent, tau=cfg.comm.tau, dump_alignments=cfg.dump_alignments)
    agents = [
        AgentState.create(i, episode.start_poses[i], episode.goals, scene.resolution, np.random.default_rng(agent_seqs[i]), agent_cfg)
        for i in range(n)
    ]
    if cfg.oracle_alignment:
        _seed_oracle_alignments(agents)

    logger.info("[Episode] %s: %d robots, %d goals, %d steps", episode.episode_id, n, len(episode.goals), max_steps)
    poses = list(episode.start_poses[:n])
    distances = [0.0] * n
    inboxes: List[list] = [[] for _ in range(n)]
    found: Dict[int, GoalOutcome] = {}
    trace = EpisodeTrace()
    last_event_step: Optional[int] = None

    for step in range(max_steps):
        graph = connectivity(poses, cfg.comm)
        decisions, checked = [], []
        for i in range(n):
            obs = observe(scene, poses[i], cfg.sensor, world_rng, noise, robot_id=i)
            decision = decide(agents[i], obs, inboxes[i], step=step, neighbors=sorted(graph.neighbors(i)))
            verdicts = [(e, validate_goal_event(scene, episode, e.goal_id, poses[i].x, poses[i].y)) for e in decision.goal_events]
            rejected = [e for e, valid in verdicts if not valid]
            for event in rejected:
                logger.warning("[Episode] %s: robot %d reported goal %d from an invalid pose", episode.episode_id, i, event.goal_id)
            decisions.append(retract_goal_events(agents[i], decision, rejected))
            checked.append(verdicts)

        outgoing = sorted((m for d in decisions for m in d.outbox), key=lambda m: (m.sender, m.receiver))
        delivered: List[list] = [[] for _ in range(n)]
        for msg in outgoing:
            delivered[msg.receiver].append(msg)

        for i, decision in enumerate(decisions):
            events = []
            for event, valid in checked[i]:
                if valid and event.goal_id not in found:
                    found[event.goal_id] = GoalOutcome(event.goal_id, True, i, step)
                    last_event_step = step
                events.append({"goal_id": event.goal_id, "valid": valid})
            new_pose = step_agent(scene, poses[i], decision.action)
            blocked = decision.action == Action.FORWARD and new_pose == poses[i]
            if decision.action == Action.FORWARD and not blocked:
                distances[i] += FORWARD_STEP_M
            trace.records.append(_record(step, i, poses[i], decision, agents[i], blocked, inboxes[i], events, distances[i]))
            poses[i] = new_pose
        inboxes = delivered

        if len(found) == len(episode.goals):
            break
        if all(a.mode == Mode.DONE for a in agents):
            break

    all_found = len(found) == len(episode.goals)
    steps = last_event_step + 1 if all_found and last_event_step is not None else max_steps
    goals = tuple(found.get(g.goal_id, GoalOutcome(g.goal_id, False)) for g in sorted(episode.goals, key=lambda g: g.goal_id))
    d_star = _optimal(scene, episode, n) if cfg.compute_optimal else None
    outcome = EpisodeOutcome(episode.episode_id, goals, tuple(distances), steps, d_star)
    logger.info(
        "[Episode] %s done: %d/%d goals, max d_j=%.2f, d*=%s",
        episode.episode_id,
        outcome.found_count,
        outcome.n_goals,
        outcome.max_distance,
        "n/a" if d_star is None else f"{d_star:.2f}",
    )

    result = EpisodeResult(trace, outcome, agents)
    if cfg.out_dir:
        result.run_dir = write_run(cfg, episode, result, n)
    return result


def _optimal(scene: GridScene, episode: Episode, n: int) -> Optional[float]:
    try:
        return optimal_makespan(build_makespan_instance(scene, episode, n)).d_star
    except InfeasibleInstanceError as exc:
        logger.warning("[Metrics] %s: %s", episode.episode_id, exc)
        return None


def write_run(cfg: RunConfig, episode: Episode, result: EpisodeResult, n: int) -> str:
    """
    Write trace.jsonl, run.json, final maps and (optionally) alignment dumps.
    """
    run_dir = os.path.join(cfg.out_dir, f"{episode.episode_id}_n{n}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "trace.jsonl"), "w", encoding="utf-8") as handle:
        for line in result.trace.lines():
            handle.write(line + "\n")
    run = {
        "episode_id": episode.episode_id,
        "config": cfg.summary(),
        "tau": cfg.comm.tau,
        "goals": [g.goal_id for g in episode.goals],
        "max_steps": episode.max_steps if cfg.max_steps is None else cfg.max_steps,
        "d_star": result.outcome.d_star,
        "trace_hash": result.trace.hash,
        "outcome": outcome_row(result.outcome),
    }
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as handle:
        json.dump(run, handle, indent=2)
    for state in result.agents:
        peers = {str(j): pose_to_json(p.last_known_pose) for j, p in sorted(state.peers.items()) if p.last_known_pose}
        write_snapshot(state.map, state.registry, os.path.join(run_dir, "maps", f"robot_{state.robot_id}"), {"pose": pose_to_json(state.pose), "peers": peers})
        for k, (sender, own_map, other_map, alignment) in enumerate(state.debug_alignments):
            stem = os.path.join(run_dir, "alignments", f"robot{state.robot_id}_from{sender}_{k}")
            write_snapshot(own_map, [], f"{stem}_a")
            write_snapshot(other_map, [], f"{stem}_b")
            with open(f"{stem}.json", "w", encoding="utf-8") as handle:
                json.dump(alignment_to_json(alignment), handle, indent=2)
    return run_dir


# ---------------------------------------------------------------------------
# Batches


def suite_configs(suite_dir: str, agents: Sequence[int], base: Optional[RunConfig] = None) -> List[RunConfig]:
    episodes = sorted(glob.glob(os.path.join(suite_dir, "*.episode")))
    base = base or RunConfig(episode_path="")
    return [dataclasses.replace(base, episode_path=path, n_agents=n) for n in agents for path in episodes]


def _run_row(cfg: RunConfig) -> dict:
    return outcome_row(run_episode(cfg).outcome)


def run_batch(cfgs: Sequence[RunConfig], out_dir: Optional[str] = None, workers: int = 1) -> Dict[str, object]:
    """
    Run every config; a failing episode is reported, never fatal.
    """
    if not cfgs:
        return {"evaluated": [], "failed": [], "aggregate": []}
    evaluated, failed = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(cfg, pool.submit(_run_row, cfg)) for cfg in cfgs]
            for cfg, future in futures:
                try:
                    evaluated.append(future.result())
                except Exception as exc:
                    failed.append({"source": cfg.episode_path, "n": cfg.n_agents, "error": str(exc)})
    else:
        for k, cfg in enumerate(cfgs):
            try:
                evaluated.append(_run_row(cfg))
            except Exception as exc:
                failed.append({"source": cfg.episode_path, "n": cfg.n_agents, "error": str(exc)})
            logger.info("[Batch] %d/%d episodes processed", k + 1, len(cfgs))
    for item in failed:
        logger.warning("[Batch] skipped %s (n=%s): %s", item["source"], item["n"], item["error"])
    report = {"evaluated": evaluated, "failed": failed, "aggregate": aggregate(evaluated)}
    if out_dir:
        write_report(report, out_dir)
    return report


def write_report(report: Dict[str, object], out_dir: str, prefix: str = "") -> Tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{prefix}results.csv")
    json_path = os.path.join(out_dir, f"{prefix}summary.json")
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in report["evaluated"]:
            writer.writerow({k: row[k] for k in CSV_FIELDS})
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump({"aggregate": report["aggregate"], "failed": report["failed"]}, handle, indent=2)
    return csv_path, json_path


def run_comm_ablation(cfgs: Sequence[RunConfig], r_off: float = 0.1, out_dir: Optional[str] = None, workers: int = 1) -> Dict[str, object]:
    """
    Paired comms-on / comms-off batches over the same episodes.
    """
    off_cfgs = [dataclasses.replace(c, comm=dataclasses.replace(c.comm, r_comm=r_off)) for c in cfgs]
    on = run_batch(cfgs, workers=workers)
    off = run_batch(off_cfgs, workers=workers)
    off_rows = {(r["episode_id"], r["n"]): r for r in off["evaluated"]}
    paired = []
    for row in on["evaluated"]:
        other = off_rows.get((row["episode_id"], row["n"]))
        if other is None:
            continue
        paired.append(
            {
                "episode_id": row["episode_id"],
                "n": row["n"],
                "sr_on": row["sr"],
                "sr_off": other["sr"],
                "makespan_on": row["max_dj"],
                "makespan_off": other["max_dj"],
            }
        )
    report = {"on": on, "off": off, "paired": paired}
    if out_dir:
        write_report(on, out_dir, prefix="comm_on_")
        write_report(off, out_dir, prefix="comm_off_")
        with open(os.path.join(out_dir, "ablation.json"), "w", encoding="utf-8") as handle:
            json.dump({"paired": paired, "on": on["aggregate"], "off": off["aggregate"]}, handle, indent=2)
    return report


# ---------------------------------------------------------------------------
# Trace evaluation


def read_trace(path: str) -> List[dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


def audit_trace(records: Sequence[dict], tau: int) -> Dict[str, list]:
    """
    Cooldown violations (full maps to one receiver closer than tau steps) and
    causality violations (a message read in the step it was sent).
    """
    sends: Dict[Tuple[int, int], List[int]] = {}
    causality = []
    for rec in records:
        for msg in rec["sent"]:
            if msg["kind"] == "full_map":
                sends.setdefault((rec["robot"], msg["receiver"]), []).append(rec["step"])
        for msg in rec["received"]:
            if msg["sent_step"] >= rec["step"]:
                causality.append({"step": rec["step"], "robot": rec["robot"], "sender": msg["sender"]})
    cooldown = []
    for (sender, receiver), steps in sorted(sends.items()):
        for a, b in zip(steps, steps[1:]):
            if b - a < tau:
                cooldown.append({"sender": sender, "receiver": receiver, "steps": [a, b]})
    return {"cooldown": cooldown, "causality": causality}


def outcome_from_trace(records: Sequence[dict], run: dict) -> EpisodeOutcome:
    found: Dict[int, GoalOutcome] = {}
    distances: Dict[int, float] = {}
    for rec in records:
        distances[rec["robot"]] = rec["distance"]
        for event in rec["goal_events"]:
            if event["valid"] and event["goal_id"] not in found:
                found[event["goal_id"]] = GoalOutcome(event["goal_id"], True, rec["robot"], rec["step"])
    goal_ids = sorted(run["goals"])
    goals = tuple(found.get(g, GoalOutcome(g, False)) for g in goal_ids)
    all_found = all(g.found for g in goals)
    steps = max(g.step for g in goals) + 1 if goals and all_found else int(run["max_steps"])
    robots = run["outcome"]["n"]
    return EpisodeOutcome(run["episode_id"], goals, tuple(distances.get(i, 0.0) for i in range(robots)), steps, run.get("d_star"))


def eval_traces(trace_dir: str) -> Dict[str, object]:
    """
    Recompute per-episode metrics and protocol audits from written runs.
    """
    evaluated, failed, audits = [], [], []
    for run_path in sorted(glob.glob(os.path.join(trace_dir, "**", "run.json"), recursive=True)):
        run_dir = os.path.dirname(run_path)
        try:
            with open(run_path, "r", encoding="utf-8") as handle:
                run = json.load(handle)
            records = read_trace(os.path.join(run_dir, "trace.jsonl"))
            evaluated.append(outcome_row(outcome_from_trace(records, run)))
            audits.append({"run": os.path.basename(run_dir), **audit_trace(records, int(run["tau"]))})
        except Exception as exc:
            failed.append({"source": run_dir, "error": str(exc)})
    return {"evaluated": evaluated, "failed": failed, "aggregate": aggregate(evaluated), "audits": audits}


def default_out_dir(name: str) -> str:
    return os.path.join(OUTPUT_DIR, name)
