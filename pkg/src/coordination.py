"""
Decentralised coordination: range-based connectivity, the per-neighbor
message exchange with a full-map cooldown, intent conflict resolution and
neighbor-aware frontier weighting.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, FrozenSet, List, Optional, Sequence, Tuple, Union

import networkx as nx

from src import alignment
from src.alignment import AlignmentResult, merge_maps, merge_registry
from src.config import COOLDOWN_STEPS, R_COMM_M
from src.gridgraph import Cell
from src.gridworld import HEADING_INCREMENT, HEADING_STEPS, Pose
from src.mapping import DistanceField, Frontier, InstanceRecord, LogOddsMap, pose_to_json, snapshot_to_json

if TYPE_CHECKING:
    from src.agent import AgentState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CommConfig:
    r_comm: float = R_COMM_M
    tau: int = COOLDOWN_STEPS

    def __post_init__(self):
        if self.r_comm < 0 or self.tau < 0:
            raise ValueError(f"CommConfig needs r_comm >= 0 and tau >= 0, got {self}.")


def connectivity(positions: Sequence[Pose], cfg: CommConfig) -> nx.Graph:
    """
    Undirected graph over robot ids; an edge wherever two robots are within
    Euclidean radio range.
    """
    graph = nx.Graph()
    graph.add_nodes_from(range(len(positions)))
    for i, a in enumerate(positions):
        for j in range(i + 1, len(positions)):
            b = positions[j]
            if math.hypot(a.x - b.x, a.y - b.y) <= cfg.r_comm:
                graph.add_edge(i, j)
    return graph


# ---------------------------------------------------------------------------
# Messages


@dataclass(frozen=True)
class ExploreFrontier:
    cell: Cell


@dataclass(frozen=True)
class Intent:
    sender: int
    target: Union[int, ExploreFrontier]  # goal id or exploration frontier
    score: float
    priority: int

    @property
    def goal_id(self) -> Optional[int]:
        return self.target if isinstance(self.target, int) else None


@dataclass(frozen=True, eq=False)
class FullMapMessage:
    sender: int
    receiver: int
    sent_step: int
    grid: LogOddsMap
    registry: Tuple[InstanceRecord, ...]


@dataclass(frozen=True)
class LocationMessage:
    sender: int
    receiver: int
    sent_step: int
    pose: Pose  # sender's local frame


@dataclass(frozen=True)
class GoalStatusMessage:
    sender: int
    receiver: int
    sent_step: int
    completed: FrozenSet[int]


@dataclass(frozen=True)
class IntentMessage:
    sender: int
    receiver: int
    sent_step: int
    intent: Intent


Message = Union[FullMapMessage, LocationMessage, GoalStatusMessage, IntentMessage]

_KINDS = {
    FullMapMessage: "full_map",
    LocationMessage: "location",
    GoalStatusMessage: "goal_status",
    IntentMessage: "intent",
}


def message_kind(msg: Message) -> str:
    return _KINDS[type(msg)]


def _intent_to_json(intent: Intent) -> dict:
    target = {"goal_id": intent.target} if isinstance(intent.target, int) else {"frontier": list(intent.target.cell)}
    return {"sender": intent.sender, "score": intent.score, "priority": intent.priority, **target}


def message_to_wire(msg: Message) -> dict:
    base = {"kind": message_kind(msg), "sender": msg.sender, "receiver": msg.receiver, "sent_step": msg.sent_step}
    if isinstance(msg, FullMapMessage):
        base["map"] = snapshot_to_json(msg.grid, msg.registry)
    elif isinstance(msg, LocationMessage):
        base["pose"] = pose_to_json(msg.pose)
    elif isinstance(msg, GoalStatusMessage):
        base["completed"] = sorted(msg.completed)
    else:
        base["intent"] = _intent_to_json(msg.intent)
    return base


def message_size(msg: Message) -> int:
    return len(json.dumps(message_to_wire(msg), separators=(",", ":")).encode("utf-8"))


@dataclass
class PeerState:
    last_fullmap_sent_step: Optional[int] = None
    cached_transform: Optional[AlignmentResult] = None
    last_known_pose: Optional[Pose] = None
    last_known_intent: Optional[Intent] = None


# ---------------------------------------------------------------------------
# Exchange


def plan_exchange(state: "AgentState", neighbor_id: int, step: int, tau: int = COOLDOWN_STEPS) -> List[Message]:
    """
    Messages for one connected neighbor this step. The full map is only sent
    when at least `tau` steps have passed since the last one to this neighbor.
    """
    peer = state.peer(neighbor_id)
    outbox: List[Message] = []
    if peer.last_fullmap_sent_step is None or step - peer.last_fullmap_sent_step >= tau:
        outbox.append(
            FullMapMessage(state.robot_id, neighbor_id, step, state.map.copy(), tuple(_copy_record(r) for r in state.registry))
        )
        peer.last_fullmap_sent_step = step
    outbox.append(LocationMessage(state.robot_id, neighbor_id, step, state.pose))
    outbox.append(GoalStatusMessage(state.robot_id, neighbor_id, step, frozenset(state.completed)))
    if state.current_intent is not None:
        outbox.append(IntentMessage(state.robot_id, neighbor_id, step, state.current_intent))
    return outbox


def _copy_record(record: InstanceRecord) -> InstanceRecord:
    return InstanceRecord(
        record.local_instance_id,
        record.category,
        set(record.cells),
        record.centroid,
        record.best_score,
        record.observation_count,
        record.source_instance_id,
    )


def transform_pose(pose: Pose, result: AlignmentResult) -> Pose:
    x, y = result.transform.apply_point(pose.x, pose.y)
    turns = int(round(result.transform.theta / HEADING_INCREMENT))
    return Pose(x, y, (pose.heading_index + turns) % HEADING_STEPS)


def apply_message(state: "AgentState", msg: Message) -> None:
    """
    Fold one received message into the robot's state. Failures are absorbed:
    a map that cannot be aligned is dropped, everything else still applies.
    """
    peer = state.peer(msg.sender)
    if isinstance(msg, FullMapMessage):
        _apply_full_map(state, peer, msg)
    elif isinstance(msg, LocationMessage):
        cached = state.transform_cache.get(msg.sender)
        if cached is not None:
            peer.cached_transform = cached
            peer.last_known_pose = transform_pose(msg.pose, cached)
    elif isinstance(msg, GoalStatusMessage):
        newly = set(msg.completed) - state.completed
        if newly:
            state.mark_completed(newly)
            logger.debug("[Coordination] robot %d learned goals %s done from %d", state.robot_id, sorted(newly), msg.sender)
    else:
        peer.last_known_intent = msg.intent


def _apply_full_map(state: "AgentState", peer: PeerState, msg: FullMapMessage) -> None:
    params = state.config.alignment
    result = state.transform_cache.get(msg.sender)
    if result is not None:
        iou, _, overlap = alignment.validate_alignment(state.map, msg.grid, result.transform, params)
        if overlap >= params.min_overlap and iou < params.iou_min:
            # enough shared space and the newer maps disagree: align from scratch
            state.transform_cache.discard(msg.sender)
            peer.cached_transform = None
            result = None
            logger.warning(
                "[Alignment] robot %d dropped cached transform for %d: iou=%.2f overlap=%d",
                state.robot_id,
                msg.sender,
                iou,
                overlap,
            )
    fresh = result is None
    if fresh:
        result = alignment.align_maps(state.map, state.registry, msg.grid, list(msg.registry), state.rng, params)
        if result is None or not result.accepted:
            if result is not None:
                logger.debug(
                    "[Alignment] robot %d rejected map of %d: iou=%.2f overlap=%d",
                    state.robot_id,
                    msg.sender,
                    result.iou,
                    result.overlap_cells,
                )
            return
        state.transform_cache.put(msg.sender, result)
        peer.cached_transform = result
        logger.info(
            "[Alignment] robot %d aligned with %d: theta=%.3f t=(%.2f, %.2f) iou=%.2f",
            state.robot_id,
            msg.sender,
            result.transform.theta,
            result.transform.tx,
            result.transform.ty,
            result.iou,
        )
        if state.config.dump_alignments:
            state.debug_alignments.append((msg.sender, state.map.copy(), msg.grid, result))
    merge_maps(state.map, msg.grid, result.transform)
    merge_registry(state.registry, msg.registry, result.transform, state.map.resolution)
    state.merge_log.append((msg.sender, msg.sent_step, fresh))


# ---------------------------------------------------------------------------
# Conflict resolution


class Resolution(str, Enum):
    KEEP = "keep"
    YIELD = "yield"


def resolve_intent(own: Intent, incoming: Intent) -> Resolution:
    """
    Yield to a strictly higher score; equal scores go to the lower priority value.
    """
    if own.goal_id is None or own.goal_id != incoming.goal_id:
        return Resolution.KEEP
    if incoming.score > own.score:
        return Resolution.YIELD
    if incoming.score == own.score and incoming.priority < own.priority:
        return Resolution.YIELD
    return Resolution.KEEP


# ---------------------------------------------------------------------------
# Frontier weighting


def frontier_weight(frontier: Frontier, own: DistanceField, neighbors: Sequence[DistanceField] = ()) -> float:
    """
    Nearest neighbor distance over own distance to the frontier. Without any
    neighbor that can reach it this falls back to 1/d (nearest frontier).
    A frontier the robot stands on counts as one cell step away.
    """
    d_own = own.to_frontier(frontier)
    if not math.isfinite(d_own):
        return -math.inf
    d_own = max(d_own, own.resolution)
    d_peer = min((n.to_frontier(frontier) for n in neighbors), default=math.inf)
    if not math.isfinite(d_peer):
        return 1.0 / d_own
    return d_peer / d_own


@dataclass(frozen=True)
class ScoredFrontier:
    frontier: Frontier
    weight: float
    own_distance: float


def score_frontiers(
    frontiers: Sequence[Frontier],
    own: DistanceField,
    neighbors: Sequence[DistanceField] = (),
    excluded: Sequence[Cell] = (),
) -> List[ScoredFrontier]:
    blocked = set(excluded)
    scored = []
    for frontier in frontiers:
        if frontier.representative in blocked:
            continue
        scored.append(ScoredFrontier(frontier, frontier_weight(frontier, own, neighbors), own.to_frontier(frontier)))
    return scored


def select_frontier(
    frontiers: Sequence[Frontier],
    own: DistanceField,
    neighbors: Sequence[DistanceField] = (),
    excluded: Sequence[Cell] = (),
) -> Optional[Frontier]:
    best: Optional[ScoredFrontier] = None
    for item in score_frontiers(frontiers, own, neighbors, excluded):
        if item.weight == -math.inf:
            continue
        if best is None or item.weight > best.weight or (item.weight == best.weight and item.own_distance < best.own_distance):
            best = item
    return best.frontier if best else None
