import math

import numpy as np
import pytest

import src.alignment as alignment
from src.agent import AgentState
from src.alignment import AlignmentResult, RigidTransform2D
from src.coordination import (
    CommConfig,
    ExploreFrontier,
    FullMapMessage,
    GoalStatusMessage,
    Intent,
    IntentMessage,
    LocationMessage,
    Resolution,
    apply_message,
    connectivity,
    frontier_weight,
    message_kind,
    message_size,
    message_to_wire,
    plan_exchange,
    resolve_intent,
    select_frontier,
)
from src.gridworld import GoalSpec, Modality, Pose, load_scene
from src.mapping import DistanceField, Frontier, InstanceRecord, extract_frontiers
from tests.helpers import fixture_path, grid_from_cells, grid_from_rows


class _FakeField:
    resolution = 0.25

    def __init__(self, distances):
        self.distances = distances

    def to_frontier(self, frontier):
        return self.distances.get(frontier.representative, math.inf)


def _frontier(rep):
    return Frontier((rep,), rep)


def _state(robot_id=0, goals=()):
    return AgentState.create(robot_id, Pose(1.125, 1.125, 0), list(goals), 0.25, np.random.default_rng(robot_id))


def _goal(goal_id):
    return GoalSpec(goal_id, Modality.CATEGORY, frozenset({0}), 1.0)


def _tworoom_map():
    scene = load_scene(fixture_path("tworoom.scene"))
    cells = [(r, c) for r in range(scene.height_cells) for c in range(scene.width_cells)]
    return grid_from_cells(cells, [bool(scene.occupancy[c]) for c in cells])


def _plant_record():
    return InstanceRecord(0, "plant", {(7, 3)}, (0.875, 1.875), 0.9, 1, 1)


# ---------------------------------------------------------------------------
# Connectivity


def test_connectivity_respects_range():
    cfg = CommConfig(r_comm=5.0, tau=10)
    graph = connectivity([Pose(0.0, 0.0), Pose(4.9, 0.0), Pose(10.0, 0.0)], cfg)
    assert sorted(graph.nodes) == [0, 1, 2]
    assert graph.has_edge(0, 1)
    assert not graph.has_edge(1, 2)
    assert not connectivity([Pose(0.0, 0.0), Pose(5.1, 0.0)], cfg).has_edge(0, 1)


def test_tiny_range_disconnects_everyone():
    graph = connectivity([Pose(0.0, 0.0), Pose(0.25, 0.0), Pose(0.5, 0.0)], CommConfig(r_comm=0.1, tau=10))
    assert graph.number_of_edges() == 0


def test_negative_comm_config_is_rejected():
    with pytest.raises(ValueError):
        CommConfig(r_comm=-1.0, tau=10)


# ---------------------------------------------------------------------------
# Exchange


def test_full_map_respects_cooldown():
    state = _state()
    first = plan_exchange(state, 1, step=0, tau=10)
    assert [message_kind(m) for m in first] == ["full_map", "location", "goal_status"]
    assert [message_kind(m) for m in plan_exchange(state, 1, step=5, tau=10)] == ["location", "goal_status"]
    assert message_kind(plan_exchange(state, 1, step=10, tau=10)[0]) == "full_map"
    assert message_kind(plan_exchange(state, 2, step=5, tau=10)[0]) == "full_map"


def test_intent_is_shared_when_present():
    state = _state()
    state.current_intent = Intent(0, ExploreFrontier((2, 3)), 0.5, 0)
    kinds = [message_kind(m) for m in plan_exchange(state, 1, step=0, tau=10)]
    assert kinds[-1] == "intent"
    wire = message_to_wire(plan_exchange(state, 1, step=1, tau=10)[-1])
    assert wire["intent"]["frontier"] == [2, 3]


def test_full_map_dominates_message_size():
    state = _state()
    state.map = _tworoom_map()
    full_map, location, _ = plan_exchange(state, 1, step=0, tau=10)
    assert message_size(full_map) > 10 * message_size(location)


def test_sent_map_is_a_snapshot():
    state = _state()
    msg = plan_exchange(state, 1, step=0, tau=10)[0]
    state.map.occupancy[:] = 3.0
    assert not np.any(msg.grid.occupancy == 3.0)


def test_featureless_map_is_dropped():
    state = _state()
    msg = FullMapMessage(1, 0, 0, grid_from_rows(["....."] * 5), ())
    apply_message(state, msg)
    assert 1 not in state.transform_cache
    assert state.merge_log == []
    assert not state.map.explored.any()


def test_rejected_alignment_is_not_cached(monkeypatch):
    monkeypatch.setattr(alignment, "align_maps", lambda *a, **k: AlignmentResult(RigidTransform2D(), 6, 0.1, False, 50))
    state = _state()
    apply_message(state, FullMapMessage(1, 0, 0, _tworoom_map(), ()))
    assert 1 not in state.transform_cache
    assert not state.map.explored.any()


def test_accepted_transform_is_reused(monkeypatch):
    calls = []

    def fake_estimate(candidates, rng, params=None, resolution=0.25):
        calls.append(len(candidates))
        return RigidTransform2D(), [0, 1, 2, 3]

    monkeypatch.setattr(alignment, "estimate_transform", fake_estimate)
    state = _state()
    state.map = _tworoom_map()
    state.registry = [_plant_record()]

    apply_message(state, FullMapMessage(1, 0, 0, _tworoom_map(), (_plant_record(),)))
    apply_message(state, FullMapMessage(1, 0, 10, _tworoom_map(), (_plant_record(),)))

    assert len(calls) == 1
    assert 1 in state.transform_cache
    assert state.peer(1).cached_transform.accepted
    assert state.merge_log == [(1, 0, True), (1, 10, False)]
    assert state.registry[0].observation_count == 3


def test_cached_transform_is_dropped_when_new_maps_disagree(monkeypatch):
    fresh = AlignmentResult(RigidTransform2D(), 6, 0.9, True, 200)
    monkeypatch.setattr(alignment, "validate_alignment", lambda *a, **k: (0.1, False, 120))
    monkeypatch.setattr(alignment, "align_maps", lambda *a, **k: fresh)
    state = _state()
    state.transform_cache.put(1, AlignmentResult(RigidTransform2D(math.pi / 2, 1.0, 0.0), 10, 0.9, True))

    apply_message(state, FullMapMessage(1, 0, 10, _tworoom_map(), ()))
    assert state.transform_cache.get(1) is fresh
    assert state.peer(1).cached_transform is fresh
    assert state.merge_log == [(1, 10, True)]


def test_cached_transform_survives_thin_overlap(monkeypatch):
    cached = AlignmentResult(RigidTransform2D(), 10, 0.9, True)
    monkeypatch.setattr(alignment, "validate_alignment", lambda *a, **k: (0.0, False, 5))
    monkeypatch.setattr(alignment, "align_maps", lambda *a, **k: pytest.fail("cached transform was re-estimated"))
    state = _state()
    state.transform_cache.put(1, cached)

    apply_message(state, FullMapMessage(1, 0, 10, _tworoom_map(), ()))
    assert state.transform_cache.get(1) is cached
    assert state.merge_log == [(1, 10, False)]


def test_goal_status_removes_pending_goals():
    state = _state(goals=[_goal(3), _goal(4)])
    apply_message(state, GoalStatusMessage(1, 0, 0, frozenset({3})))
    assert state.completed == {3}
    assert state.pending_goals == [4]


def test_location_is_transformed_into_receiver_frame():
    state = _state()
    state.transform_cache.put(1, AlignmentResult(RigidTransform2D(math.pi / 2, 1.0, 0.0), 10, 0.9, True))
    apply_message(state, LocationMessage(1, 0, 0, Pose(1.0, 0.0, 0)))
    pose = state.peer(1).last_known_pose
    assert pose.x == pytest.approx(1.0)
    assert pose.y == pytest.approx(1.0)
    assert pose.heading_index == 3


def test_location_without_alignment_is_ignored():
    state = _state()
    apply_message(state, LocationMessage(1, 0, 0, Pose(1.0, 0.0, 0)))
    assert state.peer(1).last_known_pose is None


def test_intent_message_is_remembered():
    state = _state()
    intent = Intent(1, 2, 0.9, 1)
    apply_message(state, IntentMessage(1, 0, 0, intent))
    assert state.peer(1).last_known_intent == intent


# ---------------------------------------------------------------------------
# Conflict resolution


def test_higher_score_wins():
    own = Intent(0, 2, 0.7, 0)
    assert resolve_intent(own, Intent(1, 2, 0.9, 1)) == Resolution.YIELD
    assert resolve_intent(Intent(1, 2, 0.9, 1), own) == Resolution.KEEP


def test_equal_scores_go_to_lower_priority():
    assert resolve_intent(Intent(1, 2, 0.8, 1), Intent(0, 2, 0.8, 0)) == Resolution.YIELD
    assert resolve_intent(Intent(0, 2, 0.8, 0), Intent(1, 2, 0.8, 1)) == Resolution.KEEP


def test_different_targets_never_conflict():
    assert resolve_intent(Intent(0, 2, 0.5, 0), Intent(1, 3, 0.9, 1)) == Resolution.KEEP
    exploring = Intent(0, ExploreFrontier((1, 1)), 0.5, 0)
    assert resolve_intent(exploring, Intent(1, ExploreFrontier((1, 1)), 0.9, 1)) == Resolution.KEEP


# ---------------------------------------------------------------------------
# Frontier weighting


def test_frontier_weight_ratio_and_fallbacks():
    f = _frontier((0, 5))
    assert frontier_weight(f, _FakeField({(0, 5): 1.0}), [_FakeField({(0, 5): 3.0})]) == pytest.approx(3.0)
    assert frontier_weight(f, _FakeField({(0, 5): 2.0}), [_FakeField({(0, 5): 2.0})]) == pytest.approx(1.0)
    assert frontier_weight(f, _FakeField({(0, 5): 4.0})) == pytest.approx(0.25)
    assert frontier_weight(f, _FakeField({(0, 5): 4.0}), [_FakeField({})]) == pytest.approx(0.25)
    assert frontier_weight(f, _FakeField({})) == -math.inf


def test_frontier_under_the_robot_counts_as_one_step():
    f = _frontier((0, 5))
    assert frontier_weight(f, _FakeField({(0, 5): 0.0})) == pytest.approx(4.0)
    assert frontier_weight(f, _FakeField({(0, 5): 0.0}), [_FakeField({(0, 5): 1.0})]) == pytest.approx(4.0)
    assert select_frontier([f], _FakeField({(0, 5): 0.0})) == f


def test_frontier_weight_uses_nearest_neighbor():
    f = _frontier((0, 5))
    neighbors = [_FakeField({(0, 5): 6.0}), _FakeField({(0, 5): 2.0})]
    assert frontier_weight(f, _FakeField({(0, 5): 1.0}), neighbors) == pytest.approx(2.0)


def test_select_frontier_without_neighbors_is_nearest():
    frontiers = [_frontier((0, 4)), _frontier((0, 2)), _frontier((0, 8))]
    own = _FakeField({(0, 2): 2.0, (0, 4): 4.0, (0, 8): 8.0})
    assert select_frontier(frontiers, own).representative == (0, 2)
    assert select_frontier(frontiers, own, excluded=[(0, 2)]).representative == (0, 4)


def test_select_frontier_with_nothing_reachable():
    frontiers = [_frontier((0, 4)), _frontier((0, 2))]
    assert select_frontier(frontiers, _FakeField({})) is None
    assert select_frontier([], _FakeField({})) is None


def test_robots_split_between_opposite_frontiers():
    rows = ["?" + "#" * 11 + "?"] + ["?" + "." * 11 + "?"] * 11 + ["?" + "#" * 11 + "?"]
    grid = grid_from_rows(rows)
    frontiers = extract_frontiers(grid)
    assert sorted(f.representative for f in frontiers) == [(6, 1), (6, 11)]

    field_a, field_b = DistanceField(grid, (6, 5)), DistanceField(grid, (6, 3))
    assert select_frontier(frontiers, field_a, [field_b]).representative == (6, 11)
    assert select_frontier(frontiers, field_b, [field_a]).representative == (6, 1)
    assert select_frontier(frontiers, field_a).representative == (6, 1)
    assert select_frontier(frontiers, field_b).representative == (6, 1)
