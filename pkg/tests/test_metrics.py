import itertools
import logging
import math
from functools import lru_cache

import numpy as np
import pytest

from src.errors import EmptySetError, InfeasibleInstanceError, UndefinedOptimalError
from src.gridworld import Episode, GoalSpec, Modality, Pose, SceneDistances, load_episode, load_scene, scene_from_dict
from src.metrics import (
    EpisodeOutcome,
    GoalOutcome,
    MakespanInstance,
    aggregate,
    build_makespan_instance,
    compute_mspl,
    compute_spl,
    compute_sr,
    episode_mspl,
    greedy_makespan,
    instance_from_cells,
    optimal_makespan,
    outcome_row,
    success_region,
)
from tests.helpers import fixture_path


def _outcome(found, distances=(1.0,), d_star=1.0, steps=10, episode_id="ep"):
    goals = tuple(GoalOutcome(g, f, 0 if f else None, 3 if f else None) for g, f in enumerate(found))
    return EpisodeOutcome(episode_id, goals, tuple(distances), steps, d_star)


def _line_instance():
    points = np.array([0.0, 10.0, 1.0, 2.0, 8.0])
    return MakespanInstance(starts=(0, 1), clusters=((2,), (3,), (4,)), dist=np.abs(points[:, None] - points[None, :]))


def _random_instance(rng, n, m, max_cells=3, side=15):
    starts = [tuple(p) for p in rng.integers(0, side, size=(n, 2))]
    points = list(starts)
    clusters = []
    for _ in range(m):
        cluster = []
        for p in rng.integers(0, side, size=(int(rng.integers(1, max_cells + 1)), 2)):
            cluster.append(len(points))
            points.append(tuple(p))
        clusters.append(tuple(cluster))
    pts = np.asarray(points, dtype=float)
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    return MakespanInstance(starts=tuple(range(n)), clusters=tuple(clusters), dist=dist)


def _brute_force(inst):
    dist = inst.dist

    @lru_cache(maxsize=None)
    def route(robot, goals):
        if not goals:
            return 0.0
        best = math.inf
        for order in itertools.permutations(goals):
            for cells in itertools.product(*(inst.clusters[g] for g in order)):
                cost, prev = 0.0, inst.starts[robot]
                for c in cells:
                    cost += dist[prev, c]
                    prev = c
                best = min(best, cost)
        return best

    best = math.inf
    for assign in itertools.product(range(inst.n_robots), repeat=inst.n_goals):
        span = max(route(r, tuple(g for g in range(inst.n_goals) if assign[g] == r)) for r in range(inst.n_robots))
        best = min(best, span)
    return best


def _held_karp(dist, start, targets):
    m = len(targets)
    dp = {(1 << j, j): dist[start, targets[j]] for j in range(m)}
    for mask in range(1, 1 << m):
        for j in range(m):
            if (mask, j) not in dp:
                continue
            for k in range(m):
                if mask & (1 << k):
                    continue
                key = (mask | (1 << k), k)
                dp[key] = min(dp.get(key, math.inf), dp[(mask, j)] + dist[targets[j], targets[k]])
    return min(dp[((1 << m) - 1, j)] for j in range(m))


def _check_solution(inst, solution):
    assert sorted(solution.assignment) == sorted(inst.goal_ids)
    assert solution.d_star == pytest.approx(max(solution.robot_costs))
    visited = [gid for route in solution.routes for gid, _ in route]
    assert sorted(visited) == sorted(inst.goal_ids)
    for route in solution.routes:
        for gid, node in route:
            assert node in inst.clusters[inst.goal_ids.index(gid)]


# ---------------------------------------------------------------------------
# Scalar metrics


def test_spl_values():
    assert compute_spl(True, 4.0, 5.0) == pytest.approx(0.8)
    assert compute_spl(True, 4.0, 2.0) == pytest.approx(1.0)
    assert compute_spl(False, 4.0, 4.0) == 0.0
    assert compute_spl(True, 0.0, 0.0) == 1.0


def test_spl_rejects_bad_distances():
    with pytest.raises(UndefinedOptimalError):
        compute_spl(True, math.inf, 3.0)
    with pytest.raises(ValueError):
        compute_spl(True, 2.0, -1.0)


def test_success_rate_pools_goals():
    outcomes = [_outcome([True, False]), _outcome([True, True])]
    assert compute_sr(outcomes) == pytest.approx(0.75)
    with pytest.raises(EmptySetError):
        compute_sr([])


def test_mspl_values():
    assert compute_mspl(0.5, 4.0, [3.0, 5.0]) == pytest.approx(0.4)
    assert compute_mspl(1.0, 4.0, [2.0, 3.0]) == pytest.approx(1.0)
    assert compute_mspl(0.0, 4.0, [2.0]) == 0.0
    assert compute_mspl(1.0, 0.0, []) == 1.0


def test_mspl_with_one_robot_and_goal_is_spl():
    for d_star, d in [(3.0, 6.0), (2.5, 2.5), (1.0, 0.5)]:
        assert compute_mspl(1.0, d_star, [d]) == pytest.approx(compute_spl(True, d_star, d))


def test_mspl_equals_spl_for_random_single_robot_cases():
    rng = np.random.default_rng(17)
    for _ in range(200):
        found = bool(rng.random() < 0.5)
        d_star = float(rng.uniform(0.0, 20.0))
        d = float(rng.uniform(0.0, 40.0))
        assert compute_mspl(float(found), d_star, [d]) == compute_spl(found, d_star, d)


def test_mspl_input_validation():
    with pytest.raises(UndefinedOptimalError):
        compute_mspl(1.0, math.inf, [1.0])
    with pytest.raises(ValueError):
        compute_mspl(1.5, 1.0, [1.0])
    with pytest.raises(ValueError):
        compute_mspl(1.0, 1.0, [-2.0])


def test_episode_mspl_needs_optimal():
    assert episode_mspl(_outcome([True, False], distances=(2.0, 4.0), d_star=2.0)) == pytest.approx(0.25)
    with pytest.raises(UndefinedOptimalError):
        episode_mspl(_outcome([True], d_star=None))


# ---------------------------------------------------------------------------
# Makespan


def test_line_instance_makespan():
    inst = _line_instance()
    solution = optimal_makespan(inst)
    assert solution.d_star == pytest.approx(2.0)
    assert solution.assignment == {0: 0, 1: 0, 2: 1}
    assert greedy_makespan(inst).d_star >= solution.d_star - 1e-9


def test_corridor_makespan_from_geodesics():
    scene = load_scene(fixture_path("corridor_20x3.scene"))
    inst = instance_from_cells(scene, [(1, 2)], [[(1, 6)]])
    assert optimal_makespan(inst).d_star == pytest.approx(1.0)


def test_lwall_makespan_matches_brute_force():
    scene = load_scene(fixture_path("lwall_10x10.scene"))
    distances = SceneDistances(scene)
    inst = instance_from_cells(
        scene, [(0, 0), (9, 0)], [[(4, 9), (5, 9)], [(3, 6)], [(9, 9)]], goal_ids=[10, 11, 12], distances=distances
    )
    solution = optimal_makespan(inst)
    assert solution.d_star == pytest.approx(_brute_force(inst))
    assert set(solution.assignment) == {10, 11, 12}
    _check_solution(inst, solution)


@pytest.mark.parametrize("seed", range(30))
def test_optimal_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    inst = _random_instance(rng, n=int(rng.integers(1, 4)), m=int(rng.integers(1, 5)))
    solution = optimal_makespan(inst)
    assert solution.d_star == pytest.approx(_brute_force(inst))
    assert solution.d_star <= greedy_makespan(inst).d_star + 1e-9
    _check_solution(inst, solution)


@pytest.mark.slow
def test_optimal_matches_enumeration_many():
    rng = np.random.default_rng(1234)
    for _ in range(300):
        inst = _random_instance(rng, n=int(rng.integers(1, 4)), m=int(rng.integers(1, 5)))
        assert optimal_makespan(inst).d_star == pytest.approx(_brute_force(inst))


@pytest.mark.parametrize("seed", range(10))
def test_single_robot_matches_held_karp(seed):
    rng = np.random.default_rng(100 + seed)
    inst = _random_instance(rng, n=1, m=6, max_cells=1)
    targets = [c[0] for c in inst.clusters]
    assert optimal_makespan(inst).d_star == pytest.approx(_held_karp(inst.dist, 0, targets))


@pytest.mark.parametrize("seed", range(10))
def test_more_robots_never_increase_makespan(seed):
    rng = np.random.default_rng(200 + seed)
    full = _random_instance(rng, n=3, m=4)
    values = []
    for n in (1, 2, 3):
        inst = MakespanInstance(starts=full.starts[:n], clusters=full.clusters, dist=full.dist)
        values.append(optimal_makespan(inst).d_star)
    assert values[0] + 1e-9 >= values[1]
    assert values[1] + 1e-9 >= values[2]


def test_no_goals_has_zero_makespan():
    inst = MakespanInstance(starts=(0, 1), clusters=(), dist=np.zeros((2, 2)))
    solution = optimal_makespan(inst)
    assert solution.d_star == 0.0
    assert solution.routes == ((), ())


def test_unreachable_goal_is_infeasible():
    dist = np.array([[0.0, math.inf], [math.inf, 0.0]])
    inst = MakespanInstance(starts=(0,), clusters=((1,),), dist=dist)
    with pytest.raises(InfeasibleInstanceError):
        optimal_makespan(inst)
    with pytest.raises(InfeasibleInstanceError):
        greedy_makespan(inst)


def test_empty_cluster_is_rejected():
    with pytest.raises(ValueError):
        MakespanInstance(starts=(0,), clusters=((),), dist=np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# Instances from episodes


def test_success_region_surrounds_footprint():
    scene = load_scene(fixture_path("room_16x16.scene"))
    region = success_region(scene, scene.instance(1).footprint, 0.25)
    assert (8, 10) in region and (8, 12) in region and (7, 11) in region
    assert (8, 11) not in region
    assert (8, 9) not in region


def test_start_inside_success_region_has_zero_makespan():
    scene = load_scene(fixture_path("room_16x16.scene"))
    episode = load_episode(fixture_path("adjacent_goal.episode"), scene)
    inst = build_makespan_instance(scene, episode)
    assert inst.excluded_goals == ()
    assert optimal_makespan(inst).d_star == 0.0


def test_tworoom_makespan_is_positive_and_bounded_by_greedy():
    scene = load_scene(fixture_path("tworoom.scene"))
    episode = load_episode(fixture_path("tworoom_pair.episode"), scene)
    inst = build_makespan_instance(scene, episode)
    exact = optimal_makespan(inst).d_star
    assert 0.0 < exact <= greedy_makespan(inst).d_star + 1e-9
    assert inst.goal_ids == (0, 1)
    assert all(len(c) <= 5 for c in inst.clusters)


def test_unreachable_goal_is_excluded_from_instance():
    grid = [".......", ".###...", ".#.#...", ".###...", "......."]
    scene = scene_from_dict(
        {"scene_id": "sealed", "grid": grid, "instances": [
            {"id": 0, "category": "vase", "cells": [[2, 2]]},
            {"id": 1, "category": "lamp", "cells": [[4, 6]]},
        ]}
    )
    episode = Episode(
        "sealed_ep",
        "sealed",
        (Pose(0.125, 0.125, 0),),
        (
            GoalSpec(0, Modality.CATEGORY, frozenset({0}), 0.1),
            GoalSpec(1, Modality.CATEGORY, frozenset({1}), 0.25),
        ),
        50,
        0,
    )
    inst = build_makespan_instance(scene, episode)
    assert inst.excluded_goals == (0,)
    assert inst.goal_ids == (1,)
    assert math.isfinite(optimal_makespan(inst).d_star)


# ---------------------------------------------------------------------------
# Aggregation


def test_outcome_row_without_optimal(caplog):
    with caplog.at_level(logging.WARNING, logger="src.metrics"):
        row = outcome_row(_outcome([True], d_star=None, episode_id="ep_0007"))
    assert row["mspl"] == 0.0
    assert math.isnan(row["d_star"])
    assert "[Metrics] ep_0007: MSPL recorded as 0" in caplog.text


def test_aggregate_groups_by_team_size():
    rows = [
        outcome_row(_outcome([True, False], distances=(2.0,), d_star=2.0, steps=10)),
        outcome_row(_outcome([True, True], distances=(4.0,), d_star=2.0, steps=20)),
        outcome_row(_outcome([False], distances=(1.0, 3.0), d_star=1.0, steps=30)),
    ]
    summary = aggregate(rows)
    assert [s["n"] for s in summary] == [1, 2]
    one = summary[0]
    assert one["episodes"] == 2
    assert one["sr"] == pytest.approx(0.75)
    assert one["mspl"] == pytest.approx((0.5 + 0.5) / 2)
    assert one["avg_timesteps"] == pytest.approx(15.0)
    assert one["mean_makespan"] == pytest.approx(3.0)
    assert summary[1]["sr"] == 0.0
