"""
Evaluation metrics: success rate, SPL, the multi-agent MSPL and the exact
min-max open-path makespan that serves as its optimal reference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.config import CLUSTER_REPRESENTATIVES
from src.errors import EmptySetError, InfeasibleInstanceError, UndefinedOptimalError
from src.gridgraph import Cell
from src.gridworld import Episode, GridScene, SceneDistances, cell_center, distance_to_cells

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GoalOutcome:
    goal_id: int
    found: bool
    finder: Optional[int] = None
    step: Optional[int] = None


@dataclass(frozen=True)
class EpisodeOutcome:
    episode_id: str
    goals: Tuple[GoalOutcome, ...]
    robot_distances: Tuple[float, ...]
    steps: int
    d_star: Optional[float] = None

    @property
    def n_robots(self) -> int:
        return len(self.robot_distances)

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    @property
    def found_count(self) -> int:
        return sum(1 for g in self.goals if g.found)

    @property
    def success_rate(self) -> float:
        return self.found_count / self.n_goals if self.n_goals else 0.0

    @property
    def max_distance(self) -> float:
        return max(self.robot_distances, default=0.0)


def _efficiency(d_star: float, d: float) -> float:
    denominator = max(d_star, d)
    return 1.0 if denominator == 0 else d_star / denominator


def compute_spl(success: bool, d_star: float, d: float) -> float:
    """
    S · d* / max(d, d*).
    """
    if not math.isfinite(d_star):
        raise UndefinedOptimalError("Optimal distance is unreachable.")
    if d_star < 0 or d < 0:
        raise ValueError(f"Distances must be non-negative (d*={d_star}, d={d}).")
    if not success:
        return 0.0
    return _efficiency(d_star, d)


def compute_sr(outcomes: Sequence[EpisodeOutcome]) -> float:
    """
    Found goals over all goals, pooled across episodes.
    """
    total = sum(o.n_goals for o in outcomes)
    if not outcomes or total == 0:
        raise EmptySetError("Success rate needs at least one goal.")
    return sum(o.found_count for o in outcomes) / total


def compute_mspl(success_rate: float, d_star: float, distances: Sequence[float]) -> float:
    """
    SR · d* / max(d*, max_j d_j). With one robot and one goal this equals SPL.
    """
    if not math.isfinite(d_star):
        raise UndefinedOptimalError("Optimal makespan is unreachable.")
    if d_star < 0 or any(d < 0 for d in distances):
        raise ValueError("Distances must be non-negative.")
    if not 0.0 <= success_rate <= 1.0:
        raise ValueError(f"Success rate {success_rate} outside [0, 1].")
    if success_rate == 0:
        return 0.0
    return success_rate * _efficiency(d_star, max(distances, default=0.0))


def episode_mspl(outcome: EpisodeOutcome) -> float:
    if outcome.d_star is None:
        raise UndefinedOptimalError(f"Episode {outcome.episode_id} has no optimal makespan.")
    return compute_mspl(outcome.success_rate, outcome.d_star, outcome.robot_distances)


# ---------------------------------------------------------------------------
# Makespan instances


@dataclass(frozen=True, eq=False)
class MakespanInstance:
    """
    Node 0..n-1 are robot starts; every cluster lists the nodes that satisfy
    one goal. `dist` is the all-pairs node distance matrix.
    """

    starts: Tuple[int, ...]
    clusters: Tuple[Tuple[int, ...], ...]
    dist: np.ndarray
    goal_ids: Tuple[int, ...] = ()
    cells: Tuple[Cell, ...] = ()
    excluded_goals: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.goal_ids:
            object.__setattr__(self, "goal_ids", tuple(range(len(self.clusters))))
        if any(not c for c in self.clusters):
            raise ValueError("Every goal cluster needs at least one node.")

    @property
    def n_robots(self) -> int:
        return len(self.starts)

    @property
    def n_goals(self) -> int:
        return len(self.clusters)


@dataclass(frozen=True)
class MakespanSolution:
    d_star: float
    assignment: Dict[int, int]  # goal id -> robot
    routes: Tuple[Tuple[Tuple[int, int], ...], ...]  # per robot: (goal id, node)
    robot_costs: Tuple[float, ...]


def instance_from_cells(
    scene: GridScene,
    start_cells: Sequence[Cell],
    clusters: Sequence[Sequence[Cell]],
    goal_ids: Sequence[int] = (),
    distances: Optional[SceneDistances] = None,
) -> MakespanInstance:
    """
    Build the node distance matrix from scene geodesics.
    """
    distances = distances or SceneDistances(scene)
    cells: List[Cell] = [tuple(c) for c in start_cells]
    index: Dict[Cell, int] = {}
    node_clusters = []
    for cluster in clusters:
        nodes = []
        for cell in cluster:
            cell = (int(cell[0]), int(cell[1]))
            if cell not in index:
                index[cell] = len(cells)
                cells.append(cell)
            nodes.append(index[cell])
        node_clusters.append(tuple(sorted(set(nodes))))
    dist = np.array([[distances.between(a, b) for b in cells] for a in cells], dtype=float)
    return MakespanInstance(
        starts=tuple(range(len(start_cells))),
        clusters=tuple(node_clusters),
        dist=dist,
        goal_ids=tuple(goal_ids) or tuple(range(len(clusters))),
        cells=tuple(cells),
    )


def success_region(scene: GridScene, footprint: Sequence[Cell], radius: float) -> List[Cell]:
    """
    Free cells whose centers lie within `radius` of the footprint.
    """
    reach = int(math.ceil(radius / scene.resolution)) + 1
    rows = [r for r, _ in footprint]
    cols = [c for _, c in footprint]
    region = []
    for r in range(max(0, min(rows) - reach), min(scene.height_cells, max(rows) + reach + 1)):
        for c in range(max(0, min(cols) - reach), min(scene.width_cells, max(cols) + reach + 1)):
            if scene.occupancy[r, c]:
                continue
            if distance_to_cells(cell_center((r, c), scene.resolution), footprint, scene.resolution) <= radius:
                region.append((r, c))
    return region


def _representatives(region: Sequence[Cell], start_fields: Sequence[np.ndarray], k: int) -> List[Cell]:
    reachable = [c for c in region if any(np.isfinite(f[c]) for f in start_fields)]
    if not reachable:
        return []
    chosen: List[Cell] = []
    for f in start_fields:
        nearest = min(reachable, key=lambda c: (f[c], c))
        if np.isfinite(f[nearest]) and nearest not in chosen:
            chosen.append(nearest)
    chosen = chosen[:k]
    pts = np.asarray(reachable, dtype=float)
    while len(chosen) < min(k, len(reachable)):
        picked = np.asarray(chosen, dtype=float)
        gap = np.sqrt(((pts[:, None, :] - picked[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
        best = int(np.argmax(gap))
        if gap[best] == 0:
            break
        chosen.append(reachable[best])
    return sorted(chosen)


def build_makespan_instance(
    scene: GridScene,
    episode: Episode,
    n: Optional[int] = None,
    k_c: int = CLUSTER_REPRESENTATIVES,
    distances: Optional[SceneDistances] = None,
) -> MakespanInstance:
    """
    Clusters are success-region representatives of every valid instance:
    the cell nearest each start plus farthest-point spread up to `k_c` cells
    per instance. Goals no start can reach are excluded with a warning.
    """
    n = n or len(episode.start_poses)
    distances = distances or SceneDistances(scene)
    start_cells = [p.cell(scene.resolution) for p in episode.start_poses[:n]]
    fields = [distances.field(c) for c in start_cells]

    clusters, goal_ids, excluded = [], [], []
    for goal in episode.goals:
        cluster: List[Cell] = []
        for instance_id in sorted(goal.valid_instance_ids):
            region = success_region(scene, scene.instance(instance_id).footprint, goal.success_radius)
            cluster.extend(c for c in _representatives(region, fields, k_c) if c not in cluster)
        if not cluster:
            logger.warning("[Metrics] episode %s goal %d unreachable from every start; excluded from d*", episode.episode_id, goal.goal_id)
            excluded.append(goal.goal_id)
            continue
        clusters.append(sorted(cluster))
        goal_ids.append(goal.goal_id)

    inst = instance_from_cells(scene, start_cells, clusters, goal_ids, distances)
    return MakespanInstance(inst.starts, inst.clusters, inst.dist, inst.goal_ids, inst.cells, tuple(excluded))


# ---------------------------------------------------------------------------
# Solvers


def _extend(inst: MakespanInstance, nodes: Tuple[int, ...], values: np.ndarray, goal: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Layered cell-choice step: best cost of ending at every node of `goal`'s cluster.
    """
    nxt = inst.clusters[goal]
    step = values[:, None] + inst.dist[np.ix_(nodes, nxt)]
    return step.min(axis=0), step.argmin(axis=0)


def _check_feasible(inst: MakespanInstance) -> None:
    if inst.n_robots < 1:
        raise InfeasibleInstanceError("Need at least one robot.")
    for g, cluster in enumerate(inst.clusters):
        if not np.isfinite(inst.dist[np.ix_(inst.starts, cluster)]).any():
            raise InfeasibleInstanceError(f"Goal {inst.goal_ids[g]} is unreachable from every start.")


def _route_cells(inst: MakespanInstance, robot: int, goals: Sequence[int]) -> Tuple[float, Tuple[Tuple[int, int], ...]]:
    nodes: Tuple[int, ...] = (inst.starts[robot],)
    values = np.zeros(1)
    back = []
    for g in goals:
        values, arg = _extend(inst, nodes, values, g)
        back.append((nodes, arg))
        nodes = inst.clusters[g]
    if not goals:
        return 0.0, ()
    end = int(np.argmin(values))
    cost = float(values[end])
    chosen = []
    for g, (_, arg) in zip(reversed(goals), reversed(back)):
        chosen.append((inst.goal_ids[g], inst.clusters[g][end]))
        end = int(arg[end])
    return cost, tuple(reversed(chosen))


def _solution(inst: MakespanInstance, routes: Sequence[Sequence[int]]) -> MakespanSolution:
    built = [_route_cells(inst, r, goals) for r, goals in enumerate(routes)]
    assignment = {inst.goal_ids[g]: r for r, goals in enumerate(routes) for g in goals}
    costs = tuple(c for c, _ in built)
    return MakespanSolution(max(costs, default=0.0), assignment, tuple(v for _, v in built), costs)


def greedy_makespan(inst: MakespanInstance) -> MakespanSolution:
    """
    Append, one at a time, the (robot, goal) pair that keeps the makespan
    smallest. Always feasible when every goal is reachable by some robot.
    """
    _check_feasible(inst)
    routes: List[List[int]] = [[] for _ in inst.starts]
    ends = [((inst.starts[r],), np.zeros(1)) for r in range(inst.n_robots)]
    costs = [0.0] * inst.n_robots
    remaining = list(range(inst.n_goals))
    while remaining:
        best = None
        for g in remaining:
            for r in range(inst.n_robots):
                nodes, values = ends[r]
                new_values, _ = _extend(inst, nodes, values, g)
                cost = float(new_values.min())
                span = max(max(costs[:r] + costs[r + 1 :], default=0.0), cost)
                key = (span, cost, g, r)
                if best is None or key < best[0]:
                    best = (key, g, r, new_values)
        (span, cost, _, _), g, r, new_values = best
        if not math.isfinite(cost):
            raise InfeasibleInstanceError("Greedy construction reached an unreachable goal.")
        routes[r].append(g)
        ends[r] = (inst.clusters[g], new_values)
        costs[r] = cost
        remaining.remove(g)
    return _solution(inst, routes)


@dataclass
class _Search:
    inst: MakespanInstance
    best_cost: float
    best_assignment: Tuple[int, ...]
    best_routes: List[List[int]]
    nearest_from_start: np.ndarray = field(default=None)  # robot x goal
    expanded: int = 0


def optimal_makespan(inst: MakespanInstance) -> MakespanSolution:
    """
    Exact min-max open-path assignment by depth-first branch and bound.

    Robots are filled in id order; each node either appends an unassigned goal
    to the current robot (cluster cell choice kept as a layered cost vector)
    or closes it. The bound is the largest of the closed makespan, the open
    route cost and, for every unassigned goal, the cheapest way any
    still-open robot could reach it. Ties go to the lexicographically
    smallest assignment.
    """
    _check_feasible(inst)
    n, m = inst.n_robots, inst.n_goals
    if m == 0:
        return MakespanSolution(0.0, {}, tuple(() for _ in range(n)), tuple(0.0 for _ in range(n)))

    seed = greedy_makespan(inst)
    seed_routes = [[inst.goal_ids.index(gid) for gid, _ in route] for route in seed.routes]
    seed_assignment = tuple(seed.assignment[gid] for gid in inst.goal_ids)
    search = _Search(inst, seed.d_star, seed_assignment, seed_routes)
    search.nearest_from_start = np.array(
        [[inst.dist[inst.starts[r], list(inst.clusters[g])].min() for g in range(m)] for r in range(n)]
    )

    assignment = [-1] * m
    routes: List[List[int]] = [[] for _ in range(n)]

    def bound(robot: int, nodes, values, remaining, closed: float) -> float:
        lb = max(closed, float(values.min()))
        if not remaining:
            return lb
        own = np.array([(values[:, None] + inst.dist[np.ix_(nodes, inst.clusters[g])]).min() for g in remaining])
        if robot + 1 < n:
            later = search.nearest_from_start[robot + 1 :, remaining].min(axis=0)
            own = np.minimum(own, later)
        return max(lb, float(own.max()))

    def accept(cost: float) -> None:
        candidate = tuple(assignment)
        if cost < search.best_cost - TIE_TOLERANCE or (
            abs(cost - search.best_cost) <= TIE_TOLERANCE and candidate < search.best_assignment
        ):
            search.best_cost = cost
            search.best_assignment = candidate
            search.best_routes = [list(r) for r in routes]

    def visit(robot: int, nodes, values, remaining: List[int], closed: float) -> None:
        search.expanded += 1
        if not remaining:
            accept(max(closed, float(values.min())))
            return
        if bound(robot, nodes, values, remaining, closed) > search.best_cost + TIE_TOLERANCE:
            return
        for g in list(remaining):
            new_values, _ = _extend(inst, nodes, values, g)
            if not np.isfinite(new_values).any():
                continue
            assignment[g] = robot
            routes[robot].append(g)
            remaining.remove(g)
            visit(robot, inst.clusters[g], new_values, remaining, closed)
            remaining.append(g)
            remaining.sort()
            routes[robot].pop()
            assignment[g] = -1
        if robot + 1 < n:
            start = (inst.starts[robot + 1],)
            visit(robot + 1, start, np.zeros(1), remaining, max(closed, float(values.min())))

    visit(0, (inst.starts[0],), np.zeros(1), list(range(m)), 0.0)
    if not math.isfinite(search.best_cost):
        raise InfeasibleInstanceError("No finite assignment covers every goal.")
    logger.debug("[Makespan] solved n=%d m=%d after %d nodes: d*=%.3f", n, m, search.expanded, search.best_cost)
    return _solution(inst, search.best_routes)


# ---------------------------------------------------------------------------
# Aggregation


def outcome_row(outcome: EpisodeOutcome) -> dict:
    try:
        mspl = episode_mspl(outcome)
    except UndefinedOptimalError as exc:
        logger.warning("[Metrics] %s: MSPL recorded as 0 (%s)", outcome.episode_id, exc)
        mspl = 0.0
    return {
        "episode_id": outcome.episode_id,
        "n": outcome.n_robots,
        "m": outcome.n_goals,
        "found": outcome.found_count,
        "sr": outcome.success_rate,
        "mspl": mspl,
        "d_star": outcome.d_star if outcome.d_star is not None else float("nan"),
        "max_dj": outcome.max_distance,
        "steps": outcome.steps,
    }


def aggregate(rows: Iterable[dict]) -> List[dict]:
    """
    Per-team-size summary: pooled SR, mean MSPL, mean timesteps and mean makespan.
    """
    groups: Dict[int, List[dict]] = {}
    for row in rows:
        groups.setdefault(int(row["n"]), []).append(row)
    summary = []
    for n in sorted(groups):
        items = groups[n]
        goals = sum(r["m"] for r in items)
        summary.append(
            {
                "n": n,
                "episodes": len(items),
                "sr": sum(r["found"] for r in items) / goals if goals else 0.0,
                "mspl": float(np.mean([r["mspl"] for r in items])),
                "avg_timesteps": float(np.mean([r["steps"] for r in items])),
                "mean_makespan": float(np.mean([r["max_dj"] for r in items])),
            }
        )
    return summary
