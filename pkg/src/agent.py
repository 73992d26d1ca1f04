"""
Per-robot decision loop.

Each robot keeps its map in its own frame: the origin is its start cell and
the axes follow its start heading rounded to a quarter turn, so ground-truth
cells map onto local cells one-to-one. `decide` is the only entry point the
episode runner uses; everything else is exposed for tests.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage

from src.alignment import AlignmentParams, RigidTransform2D, TransformCache
from src.config import (
    COOLDOWN_STEPS,
    EXPLORE_INTENT_SCORE,
    FORWARD_STEP_M,
    GOAL_RING_CELLS,
    HEADING_DEADBAND_DEG,
    LOOKAHEAD_CELLS,
    MATCH_THRESHOLD,
    SAFE_RADIUS_CELLS,
    UNKNOWN_PENALTY,
)
from src.coordination import (
    ExploreFrontier,
    GoalStatusMessage,
    Intent,
    Message,
    PeerState,
    Resolution,
    apply_message,
    message_kind,
    plan_exchange,
    resolve_intent,
    score_frontiers,
)
from src.gridgraph import Cell, distance_field
from src.gridworld import (
    HEADING_INCREMENT,
    HEADING_STEPS,
    Action,
    Detection,
    GoalSpec,
    Observation,
    Pose,
    distance_to_cells,
    heading_vector,
)
from src.mapping import (
    CellClass,
    DistanceField,
    Frontier,
    InstanceRecord,
    LogOddsMap,
    LogOddsParams,
    classify,
    disk,
    extract_frontiers,
    integrate_observation,
    plan_path,
    planning_grids,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Local frame


@dataclass(frozen=True)
class LocalFrame:
    """
    World <-> robot-local conversion for a start cell and a quarter-turn count.
    """

    start_cell: Cell
    quarter_turns: int
    resolution: float

    @classmethod
    def from_start(cls, pose: Pose, resolution: float) -> "LocalFrame":
        quarter = int(round(pose.heading / (math.pi / 2))) % 4
        return cls(pose.cell(resolution), quarter, resolution)

    def _rotate(self, u: np.ndarray, v: np.ndarray, turns: int) -> Tuple[np.ndarray, np.ndarray]:
        for _ in range(turns % 4):
            u, v = -v, u
        return u, v

    def cells_to_local(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        u, v = cells[:, 1] - self.start_cell[1], cells[:, 0] - self.start_cell[0]
        u, v = self._rotate(u, v, -self.quarter_turns)
        return np.stack([v, u], axis=1)

    def point_to_local(self, x: float, y: float) -> Tuple[float, float]:
        res = self.resolution
        u = np.array([x - (self.start_cell[1] + 0.5) * res])
        v = np.array([y - (self.start_cell[0] + 0.5) * res])
        u, v = self._rotate(u, v, -self.quarter_turns)
        return round(float(u[0]) + res / 2, 12), round(float(v[0]) + res / 2, 12)

    def pose_to_local(self, pose: Pose) -> Pose:
        x, y = self.point_to_local(pose.x, pose.y)
        return Pose(x, y, (pose.heading_index - 3 * self.quarter_turns) % HEADING_STEPS)

    def local_to_world(self) -> RigidTransform2D:
        theta = self.quarter_turns * math.pi / 2
        c, s = round(math.cos(theta)), round(math.sin(theta))
        h = self.resolution / 2
        cx, cy = (self.start_cell[1] + 0.5) * self.resolution, (self.start_cell[0] + 0.5) * self.resolution
        return RigidTransform2D(theta, cx - (c * h - s * h), cy - (s * h + c * h))

    def observation_to_local(self, obs: Observation) -> Observation:
        detections = tuple(
            Detection(d.instance_id, d.category, tuple(map(tuple, self.cells_to_local(np.asarray(d.observed_cells)).tolist())), d.score)
            for d in obs.detections
        )
        cells = self.cells_to_local(obs.cells) if len(obs.cells) else np.empty((0, 2), dtype=np.int64)
        return Observation(obs.robot_id, self.pose_to_local(obs.pose), cells, obs.obstacle, detections)


def relative_transform(receiver: LocalFrame, sender: LocalFrame) -> RigidTransform2D:
    """
    Ground-truth transform from the sender's frame into the receiver's.
    """
    return receiver.local_to_world().inverse().compose(sender.local_to_world())


# ---------------------------------------------------------------------------
# State


class Mode(str, Enum):
    EXPLORE = "explore"
    GOTO_GOAL = "goto_goal"
    DONE = "done"


@dataclass(frozen=True)
class AgentConfig:
    match_threshold: float = MATCH_THRESHOLD
    goal_ring: int = GOAL_RING_CELLS
    safe_radius: int = SAFE_RADIUS_CELLS
    lookahead: int = LOOKAHEAD_CELLS
    deadband_deg: float = HEADING_DEADBAND_DEG
    explore_score: float = EXPLORE_INTENT_SCORE
    unknown_penalty: float = UNKNOWN_PENALTY
    tau: int = COOLDOWN_STEPS
    logodds: LogOddsParams = field(default_factory=LogOddsParams)
    alignment: AlignmentParams = field(default_factory=AlignmentParams)
    dump_alignments: bool = False


@dataclass(frozen=True)
class GoalMatch:
    goal_id: int
    record: InstanceRecord
    score: float


@dataclass(frozen=True)
class GoalEvent:
    goal_id: int
    robot_id: int
    step: int
    instance_id: int
    record_id: Optional[int] = None


@dataclass
class AgentState:
    robot_id: int
    frame: LocalFrame
    goals: Dict[int, GoalSpec]
    rng: np.random.Generator
    config: AgentConfig = field(default_factory=AgentConfig)
    priority: int = -1
    pose: Pose = Pose(0.0, 0.0, 0)
    map: LogOddsMap = None
    registry: List[InstanceRecord] = field(default_factory=list)
    pending_goals: List[int] = field(default_factory=list)
    completed: Set[int] = field(default_factory=set)
    current_intent: Optional[Intent] = None
    peers: Dict[int, PeerState] = field(default_factory=dict)
    transform_cache: TransformCache = None
    mode: Mode = Mode.EXPLORE
    mode_goal: Optional[int] = None
    mode_target: Optional[Cell] = None
    frontier_blacklist: Set[Cell] = field(default_factory=set)
    frontier_dwell: int = 0
    rejected_records: Set[int] = field(default_factory=set)
    merge_log: List[Tuple[int, int, bool]] = field(default_factory=list)
    debug_alignments: list = field(default_factory=list)
    last_action: Optional[Action] = None
    detour_heading: Optional[int] = None

    def __post_init__(self):
        if self.priority < 0:
            self.priority = self.robot_id
        if self.map is None:
            self.map = LogOddsMap(self.frame.resolution, frame_id=self.robot_id)
        if self.transform_cache is None:
            self.transform_cache = TransformCache(self.robot_id)
        if not self.pending_goals:
            self.pending_goals = sorted(set(self.goals) - self.completed)

    @classmethod
    def create(
        cls,
        robot_id: int,
        start: Pose,
        goals: Sequence[GoalSpec],
        resolution: float,
        rng: np.random.Generator,
        config: Optional[AgentConfig] = None,
    ) -> "AgentState":
        frame = LocalFrame.from_start(start, resolution)
        state = cls(robot_id, frame, {g.goal_id: g for g in goals}, rng, config or AgentConfig())
        state.pose = frame.pose_to_local(start)
        return state

    def peer(self, neighbor_id: int) -> PeerState:
        return self.peers.setdefault(neighbor_id, PeerState())

    def set_mode(self, mode: Mode, goal_id: Optional[int] = None, target: Optional[Cell] = None) -> None:
        self.mode, self.mode_goal, self.mode_target = mode, goal_id, target

    def mark_completed(self, goal_ids) -> None:
        self.completed |= set(goal_ids)
        self.pending_goals = [g for g in self.pending_goals if g not in self.completed]
        if self.mode_goal is not None and self.mode_goal in self.completed:
            self.set_mode(Mode.EXPLORE)
            self.current_intent = None

    def retract_completed(self, goal_ids) -> None:
        self.completed -= set(goal_ids)
        self.pending_goals = sorted(set(self.goals) - self.completed)
        if self.pending_goals and self.mode == Mode.DONE:
            self.set_mode(Mode.EXPLORE)


# ---------------------------------------------------------------------------
# Goal matching


def rank_goal_matches(
    registry: Sequence[InstanceRecord],
    pending_goals: Sequence[int],
    goals: Dict[int, GoalSpec],
    threshold: float,
    pose: Optional[Pose] = None,
    resolution: float = 0.25,
    excluded: Sequence[int] = (),
) -> List[GoalMatch]:
    """
    Every (pending goal, record) pair whose record is a valid instance of the
    goal and scores at least `threshold`, best first. Spurious records never match.
    """
    blocked = set(excluded)
    ranked = []
    for goal_id in pending_goals:
        if goal_id in blocked or goal_id not in goals:
            continue
        valid = goals[goal_id].valid_instance_ids
        for record in registry:
            if record.is_spurious or record.source_instance_id not in valid or record.best_score < threshold:
                continue
            dist = distance_to_cells((pose.x, pose.y), record.cells, resolution) if pose is not None else 0.0
            ranked.append((-record.best_score, dist, goal_id, record.local_instance_id, GoalMatch(goal_id, record, record.best_score)))
    ranked.sort(key=lambda item: item[:4])
    return [item[-1] for item in ranked]


def match_goals(
    registry: Sequence[InstanceRecord],
    pending_goals: Sequence[int],
    goals: Dict[int, GoalSpec],
    threshold: float = MATCH_THRESHOLD,
    pose: Optional[Pose] = None,
    resolution: float = 0.25,
) -> Optional[GoalMatch]:
    ranked = rank_goal_matches(registry, pending_goals, goals, threshold, pose, resolution)
    return ranked[0] if ranked else None


# ---------------------------------------------------------------------------
# Goal region and local planning


def select_goal_region(
    grid: LogOddsMap,
    record: InstanceRecord,
    pose: Pose,
    ring: int = GOAL_RING_CELLS,
    unknown_penalty: float = UNKNOWN_PENALTY,
) -> Optional[Cell]:
    """
    Dilate the instance footprint, cluster the explored-free cells of the ring,
    keep clusters reachable from the pose and return the cell nearest the
    instance centroid in the closest cluster (equally near cells go to the one
    the robot reaches first). None when no cluster is reachable.
    """
    if not record.cells:
        return None
    footprint = sorted(record.cells)
    start = grid.local_cell(pose.x, pose.y)
    corners = [(r + dr, c + dc) for r, c in footprint for dr, dc in ((-ring, -ring), (ring, ring))]
    occupied, unknown, origin = planning_grids(grid, footprint + corners + [start])

    fp = np.zeros(occupied.shape, dtype=bool)
    rows = np.array([r for r, _ in footprint]) + origin[0]
    cols = np.array([c for _, c in footprint]) + origin[1]
    fp[rows, cols] = True
    candidates = ndimage.binary_dilation(fp, structure=disk(ring)) & ~fp & ~occupied & ~unknown
    labels, count = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return None

    passable = ~occupied
    s = (start[0] + origin[0], start[1] + origin[1])
    passable[s] = True
    dist, _ = distance_field(passable, s, grid.resolution, np.where(unknown, unknown_penalty, 1.0))

    best_label, best_dist = None, math.inf
    for label in range(1, count + 1):
        d = float(dist[labels == label].min())
        if d < best_dist:
            best_label, best_dist = label, d
    if best_label is None:
        return None

    cx, cy = record.centroid
    ii, jj = np.nonzero(labels == best_label)

    def rank(k: int):
        i, j = int(ii[k]), int(jj[k])
        gap = math.hypot((j - origin[1] + 0.5) * grid.resolution - cx, (i - origin[0] + 0.5) * grid.resolution - cy)
        return round(gap, 9), float(dist[i, j]), i, j

    best = min(range(len(ii)), key=rank)
    return int(ii[best]) - origin[0], int(jj[best]) - origin[1]


def line_clear(grid: LogOddsMap, start: Tuple[float, float], cell: Cell, ignore: Sequence[Cell] = ()) -> bool:
    """
    True when the segment from a point to a cell center crosses no Occupied cell.
    """
    tx, ty = grid.cell_center(cell)
    length = math.hypot(tx - start[0], ty - start[1])
    n = max(1, int(math.ceil(length / (grid.resolution / 4))))
    ts = np.linspace(0.0, 1.0, n + 1)
    xs, ys = start[0] + ts * (tx - start[0]), start[1] + ts * (ty - start[1])
    cells = np.unique(np.stack([np.floor(ys / grid.resolution), np.floor(xs / grid.resolution)], axis=1).astype(np.int64), axis=0)
    skip = set(ignore)
    rows, cols = grid.to_index(cells)
    h, w = grid.shape
    occupied = grid.occupied_mask()
    for (r, c), i, j in zip(cells.tolist(), rows, cols):
        if (r, c) in skip or not (0 <= i < h and 0 <= j < w):
            continue
        if occupied[i, j]:
            return False
    return True


def next_waypoint(
    grid: LogOddsMap,
    pose: Pose,
    target: Cell,
    safe_radius: int = SAFE_RADIUS_CELLS,
    lookahead: int = LOOKAHEAD_CELLS,
    unknown_penalty: float = UNKNOWN_PENALTY,
) -> Optional[Cell]:
    """
    Farthest cell of the planned path within the lookahead radius that can be
    reached in a straight line. None when the target is unreachable.
    """
    start = grid.local_cell(pose.x, pose.y)
    if start == tuple(target):
        return tuple(target)
    path = plan_path(grid, start, target, safe_radius, unknown_penalty)
    if path is None:
        return None
    cells = path.cells[1:]
    radius = lookahead
    while radius >= 1:
        for cell in reversed(cells):
            if math.hypot(cell[0] - start[0], cell[1] - start[1]) > radius:
                continue
            if line_clear(grid, (pose.x, pose.y), cell):
                return cell
        radius //= 2
    return cells[0]


def steer(pose: Pose, waypoint: Tuple[float, float], deadband_deg: float = HEADING_DEADBAND_DEG) -> Action:
    """
    Greedy heading controller: turn toward the waypoint outside the deadband,
    otherwise drive forward.
    """
    desired = math.atan2(waypoint[1] - pose.y, waypoint[0] - pose.x)
    error = (desired - pose.heading + math.pi) % (2 * math.pi) - math.pi
    if abs(error) > math.radians(deadband_deg):
        return Action.TURN_RIGHT if error > 0 else Action.TURN_LEFT
    return Action.FORWARD


# ---------------------------------------------------------------------------
# Intent reconciliation


def claimed_goals(state: AgentState) -> Set[int]:
    """
    Goals a peer has announced that this robot must leave alone.
    """
    claimed = set()
    for neighbor_id in sorted(state.peers):
        incoming = state.peers[neighbor_id].last_known_intent
        if incoming is None or incoming.goal_id is None or incoming.goal_id in state.completed:
            continue
        own = state.current_intent
        if own is not None and own.goal_id == incoming.goal_id and resolve_intent(own, incoming) == Resolution.KEEP:
            continue
        claimed.add(incoming.goal_id)
    return claimed


def reconcile_intents(state: AgentState) -> bool:
    """
    Drop the pursued goal if a peer's intent on it wins. Returns True on yield.
    """
    own = state.current_intent
    if own is None or own.goal_id is None:
        return False
    if own.goal_id in claimed_goals(state):
        logger.debug("[Coordination] robot %d yields goal %d", state.robot_id, own.goal_id)
        state.set_mode(Mode.EXPLORE)
        state.current_intent = None
        return True
    return False


# ---------------------------------------------------------------------------
# Decision


@dataclass(frozen=True)
class Decision:
    action: Action
    outbox: Tuple[Message, ...]
    goal_events: Tuple[GoalEvent, ...] = ()
    waypoint: Optional[Cell] = None


_KIND_ORDER = {"full_map": 0, "location": 1, "goal_status": 2, "intent": 3}


def _goal_events(state: AgentState, step: int) -> List[GoalEvent]:
    events = []
    res = state.map.resolution
    point = (state.pose.x, state.pose.y)
    for goal_id in list(state.pending_goals):
        goal = state.goals[goal_id]
        for record in state.registry:
            if record.is_spurious or record.local_instance_id in state.rejected_records:
                continue
            if record.source_instance_id not in goal.valid_instance_ids:
                continue
            if record.best_score < state.config.match_threshold:
                continue
            if distance_to_cells(point, record.cells, res) > goal.success_radius:
                continue
            nearest = min(record.cells, key=lambda c: (distance_to_cells(point, [c], res), c))
            if line_clear(state.map, point, nearest, ignore=record.cells):
                events.append(GoalEvent(goal_id, state.robot_id, step, record.source_instance_id, record.local_instance_id))
                break
    return events


def _neighbor_fields(state: AgentState) -> List[DistanceField]:
    fields = []
    for neighbor_id in sorted(state.peers):
        pose = state.peers[neighbor_id].last_known_pose
        if pose is not None:
            fields.append(DistanceField(state.map, state.map.local_cell(pose.x, pose.y), state.config.unknown_penalty))
    return fields


def _pursue_goal(state: AgentState) -> Optional[Cell]:
    cfg = state.config
    matches = rank_goal_matches(
        [r for r in state.registry if r.local_instance_id not in state.rejected_records],
        state.pending_goals,
        state.goals,
        cfg.match_threshold,
        state.pose,
        state.map.resolution,
        excluded=sorted(claimed_goals(state)),
    )
    if state.mode == Mode.GOTO_GOAL:
        matches.sort(key=lambda m: m.goal_id != state.mode_goal)
    for match in matches:
        target = select_goal_region(state.map, match.record, state.pose, cfg.goal_ring, cfg.unknown_penalty)
        if target is None:
            continue
        waypoint = next_waypoint(state.map, state.pose, target, cfg.safe_radius, cfg.lookahead, cfg.unknown_penalty)
        if waypoint is None:
            continue
        state.set_mode(Mode.GOTO_GOAL, match.goal_id, target)
        state.current_intent = Intent(state.robot_id, match.goal_id, float(min(max(match.score, 0.0), 1.0)), state.priority)
        return waypoint
    return None


def _look_target(grid: LogOddsMap, frontier: Frontier, own_cell: Cell) -> Cell:
    """
    Unknown cell bordering the frontier that is closest to the robot.
    """
    unknown = {
        (r + dr, c + dc)
        for r, c in frontier.cells
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
        if classify(grid, (r + dr, c + dc)) == CellClass.UNKNOWN
    }
    return min(
        unknown,
        key=lambda cell: (math.hypot(cell[0] - own_cell[0], cell[1] - own_cell[1]), cell),
        default=frontier.representative,
    )


def _explore(state: AgentState) -> Optional[Cell]:
    """
    Head for the best-weighted frontier. Beside its representative the robot
    faces the unknown side instead; a frontier that survives a full turn of
    looking is blacklisted.
    """
    cfg = state.config
    own_cell = state.map.local_cell(state.pose.x, state.pose.y)
    frontiers = extract_frontiers(state.map)
    own = DistanceField(state.map, own_cell, cfg.unknown_penalty)
    scored = score_frontiers(frontiers, own, _neighbor_fields(state), sorted(state.frontier_blacklist))
    scored = [s for s in scored if s.weight != -math.inf]
    scored.sort(key=lambda s: (-s.weight, s.own_distance))
    for item in scored:
        rep = item.frontier.representative
        if max(abs(rep[0] - own_cell[0]), abs(rep[1] - own_cell[1])) <= 1:
            same = state.mode == Mode.EXPLORE and state.mode_target == rep
            if same and state.frontier_dwell >= HEADING_STEPS:
                state.frontier_blacklist.add(rep)
                continue
            state.frontier_dwell = state.frontier_dwell + 1 if same else 1
            waypoint = _look_target(state.map, item.frontier, own_cell)
        else:
            waypoint = next_waypoint(state.map, state.pose, rep, cfg.safe_radius, cfg.lookahead, cfg.unknown_penalty)
            if waypoint is None:
                state.frontier_blacklist.add(rep)
                continue
            state.frontier_dwell = 0
        state.set_mode(Mode.EXPLORE, target=rep)
        state.current_intent = Intent(state.robot_id, ExploreFrontier(rep), cfg.explore_score, state.priority)
        return waypoint
    return None


def _forward_cell(pose: Pose, heading_index: int, resolution: float) -> Cell:
    ux, uy = heading_vector(heading_index)
    x, y = pose.x + FORWARD_STEP_M * ux, pose.y + FORWARD_STEP_M * uy
    return int(math.floor(y / resolution)), int(math.floor(x / resolution))


def _turn_toward(current: int, wanted: int) -> Action:
    diff = (wanted - current) % HEADING_STEPS
    return Action.TURN_RIGHT if diff <= HEADING_STEPS // 2 else Action.TURN_LEFT


def _drive(state: AgentState, waypoint: Cell, blocked: bool) -> Action:
    """
    Steer toward the waypoint; when the cell ahead is known Occupied (or the
    last forward move did not happen) commit to the closest free heading for
    one move.
    """
    pose, res = state.pose, state.map.resolution
    if state.detour_heading is not None:
        if pose.heading_index == state.detour_heading:
            state.detour_heading = None
            return Action.FORWARD
        return _turn_toward(pose.heading_index, state.detour_heading)

    wx, wy = state.map.cell_center(waypoint)
    action = steer(pose, (wx, wy), state.config.deadband_deg)
    if action != Action.FORWARD:
        return action
    occupied = state.map.occupied_mask()

    def free_ahead(k: int) -> bool:
        cell = _forward_cell(pose, k, res)
        if not state.map.contains(cell):
            return True
        i, j = cell[0] + state.map.origin[0], cell[1] + state.map.origin[1]
        return not occupied[i, j]

    if not blocked and free_ahead(pose.heading_index):
        return action
    desired = math.atan2(wy - pose.y, wx - pose.x)
    options = [
        k
        for k in range(HEADING_STEPS)
        if k != pose.heading_index % HEADING_STEPS and free_ahead(k)
    ]
    if not options:
        return Action.TURN_RIGHT
    best = min(options, key=lambda k: (abs((k * HEADING_INCREMENT - desired + math.pi) % (2 * math.pi) - math.pi), k))
    state.detour_heading = best
    return _turn_toward(pose.heading_index, best)


def decide(
    state: AgentState,
    obs: Observation,
    inbox: Sequence[Message] = (),
    *,
    step: int = 0,
    neighbors: Sequence[int] = (),
) -> Decision:
    """
    One control step: integrate, absorb messages, resolve intents, check for
    goals, choose a target and steer toward it, then queue the outbox. The
    state is updated in place.
    """
    previous_pose = state.pose
    local = state.frame.observation_to_local(obs)
    state.pose = local.pose
    integrate_observation(state.map, state.registry, local, state.config.logodds)

    for msg in sorted(inbox, key=lambda m: (m.sender, _KIND_ORDER[message_kind(m)])):
        apply_message(state, msg)
    reconcile_intents(state)

    events = _goal_events(state, step)
    for event in events:
        logger.info("[Agent] robot %d stops for goal %d at step %d", state.robot_id, event.goal_id, step)
    if events:
        state.mark_completed(e.goal_id for e in events)

    waypoint = None
    action = Action.STOP
    if state.pending_goals:
        waypoint = _pursue_goal(state)
        if waypoint is None:
            if state.mode == Mode.GOTO_GOAL:
                state.set_mode(Mode.EXPLORE)
                state.current_intent = None
            waypoint = _explore(state)
    if waypoint is None:
        state.set_mode(Mode.DONE)
        state.current_intent = None
        state.detour_heading = None
    elif not events:
        blocked = state.last_action == Action.FORWARD and previous_pose == state.pose
        action = _drive(state, waypoint, blocked)

    outbox = tuple(m for j in sorted(neighbors) for m in plan_exchange(state, j, step, state.config.tau))
    state.last_action = action
    return Decision(action, outbox, tuple(events), waypoint)


def retract_goal_events(state: AgentState, decision: Decision, rejected: Sequence[GoalEvent]) -> Decision:
    """
    Undo goal reports that failed the ground-truth check. The goals become
    pending again, the records behind them are no longer reported or pursued,
    and the goal ids are scrubbed from this step's GoalStatus messages.
    """
    if not rejected:
        return decision
    goal_ids = {event.goal_id for event in rejected}
    state.retract_completed(goal_ids)
    state.rejected_records.update(event.record_id for event in rejected if event.record_id is not None)
    logger.info("[Agent] robot %d retracts goals %s", state.robot_id, sorted(goal_ids))
    outbox = tuple(
        replace(msg, completed=msg.completed - goal_ids) if isinstance(msg, GoalStatusMessage) else msg
        for msg in decision.outbox
    )
    return replace(decision, outbox=outbox)
