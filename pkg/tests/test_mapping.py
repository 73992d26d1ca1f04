import math

import numpy as np
import pytest

from src.gridworld import Detection, Observation, Pose, load_scene
from src.mapping import (
    CellClass,
    DistanceField,
    LogOddsMap,
    LogOddsParams,
    classification_image,
    classify,
    extract_frontiers,
    fuse_detection,
    integrate_observation,
    plan_path,
    read_pgm,
    read_snapshot,
    write_snapshot,
)
from tests.helpers import fixture_path, grid_from_rows

PARAMS = LogOddsParams(occ=0.9, free=0.4, sem=0.9, l_max=5.0)


def _obs(cells, obstacle, detections=()):
    return Observation(
        robot_id=0,
        pose=Pose(0.125, 0.125, 0),
        cells=np.asarray(cells, dtype=np.int64).reshape(-1, 2),
        obstacle=np.asarray(obstacle, dtype=bool),
        detections=tuple(detections),
    )


def _value(grid, cell):
    rows, cols = grid.to_index(np.asarray([cell]))
    return float(grid.occupancy[rows[0], cols[0]])


# ---------------------------------------------------------------------------
# Log-odds accumulation


def test_single_obstacle_hit_sets_occupied():
    grid, registry = LogOddsMap(0.25), []
    integrate_observation(grid, registry, _obs([[0, 3]], [True]), PARAMS)
    assert _value(grid, (0, 3)) == pytest.approx(0.9)
    assert classify(grid, (0, 3)) == CellClass.OCCUPIED


def test_free_observations_outvote_one_hit():
    grid, registry = LogOddsMap(0.25), []
    integrate_observation(grid, registry, _obs([[0, 3]], [True]), PARAMS)
    for _ in range(3):
        integrate_observation(grid, registry, _obs([[0, 3]], [False]), PARAMS)
    assert _value(grid, (0, 3)) == pytest.approx(-0.3)
    assert classify(grid, (0, 3)) == CellClass.FREE_EXPLORED


def test_log_odds_are_clamped():
    grid, registry = LogOddsMap(0.25), []
    for _ in range(100):
        integrate_observation(grid, registry, _obs([[1, 1]], [True]), PARAMS)
    assert _value(grid, (1, 1)) == 5.0
    for _ in range(100):
        integrate_observation(grid, registry, _obs([[1, 1]], [False]), PARAMS)
    assert _value(grid, (1, 1)) == -5.0


def test_classify_boundaries():
    grid = grid_from_rows(["#.?"])
    grid.occupancy[0, 1] = 0.0
    assert classify(grid, (0, 0)) == CellClass.OCCUPIED
    assert classify(grid, (0, 1)) == CellClass.FREE_EXPLORED
    assert classify(grid, (0, 2)) == CellClass.UNKNOWN
    assert classify(grid, (50, -50)) == CellClass.UNKNOWN


def test_map_grows_for_negative_and_far_cells():
    grid, registry = LogOddsMap(0.25), []
    integrate_observation(grid, registry, _obs([[-20, 30], [4, -12]], [False, True]), PARAMS)
    assert grid.contains((-20, 30))
    assert grid.contains((4, -12))
    assert classify(grid, (-20, 30)) == CellClass.FREE_EXPLORED
    assert classify(grid, (4, -12)) == CellClass.OCCUPIED


def test_semantic_channel_and_registry_follow_detections():
    grid, registry = LogOddsMap(0.25), []
    chair = Detection(instance_id=7, category="chair", observed_cells=((0, 3),), score=0.9)
    integrate_observation(grid, registry, _obs([[0, 3], [0, 2]], [True, False], [chair]), PARAMS)
    channel = grid.semantic["chair"]
    rows, cols = grid.to_index(np.asarray([[0, 3], [0, 2]]))
    assert channel[rows[0], cols[0]] == pytest.approx(0.9)
    assert channel[rows[1], cols[1]] == pytest.approx(-0.4)
    assert len(registry) == 1
    assert registry[0].source_instance_id == 7
    assert registry[0].best_score == pytest.approx(0.9)


# ---------------------------------------------------------------------------
# Registry association


def test_fuse_detection_merges_nearby_same_category():
    registry = []
    first = fuse_detection(registry, "chair", [(0, 3)], 0.6, 2, 0.25)
    second = fuse_detection(registry, "chair", [(0, 4)], 0.9, 2, 0.25)
    assert second is first
    assert first.cells == {(0, 3), (0, 4)}
    assert first.best_score == pytest.approx(0.9)
    assert first.observation_count == 2
    assert first.centroid == pytest.approx((1.0, 0.125))


def test_fuse_detection_splits_on_category_or_distance():
    registry = []
    fuse_detection(registry, "chair", [(0, 3)], 0.6, 2, 0.25)
    fuse_detection(registry, "table", [(0, 3)], 0.6, 4, 0.25)
    fuse_detection(registry, "chair", [(10, 10)], 0.6, 5, 0.25)
    assert [r.local_instance_id for r in registry] == [0, 1, 2]


def test_spurious_record_takes_real_identity():
    registry = []
    record = fuse_detection(registry, "chair", [(0, 3)], 0.6, -12, 0.25)
    assert record.is_spurious
    fuse_detection(registry, "chair", [(0, 3)], 0.6, 3, 0.25)
    assert record.source_instance_id == 3


# ---------------------------------------------------------------------------
# Frontiers


def test_fully_explored_room_has_no_frontiers():
    grid = grid_from_rows(["#####", "#...#", "#...#", "#####"])
    assert extract_frontiers(grid) == []


def test_half_explored_room_has_one_frontier():
    rows = ["#####????"] + ["#....????"] * 5 + ["#####????"]
    frontiers = extract_frontiers(grid_from_rows(rows))
    assert len(frontiers) == 1
    assert frontiers[0].cells == tuple((r, 4) for r in range(1, 6))
    assert frontiers[0].representative == (3, 4)


def test_small_clusters_are_dropped():
    rows = ["#####", "#...?", "#####"]
    assert extract_frontiers(grid_from_rows(rows)) == []
    assert len(extract_frontiers(grid_from_rows(rows), min_cells=1)) == 1


def test_frontier_cells_match_brute_force_scan():
    scene = load_scene(fixture_path("tworoom.scene"))
    rows = [
        "".join(("#" if occ else ".") if c <= 10 else "?" for c, occ in enumerate(line))
        for line in scene.occupancy
    ]
    grid = grid_from_rows(rows)
    height, width = len(rows), len(rows[0])

    expected = set()
    for r in range(height):
        for c in range(width):
            if rows[r][c] != ".":
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                nr, nc = r + dr, c + dc
                if not (0 <= nr < height and 0 <= nc < width) or rows[nr][nc] == "?":
                    expected.add((r, c))
                    break

    found = {cell for f in extract_frontiers(grid, min_cells=1) for cell in f.cells}
    assert found == expected == {(4, 10), (5, 10)}


# ---------------------------------------------------------------------------
# Planning


CORRIDOR = ["#" + "." * 18 + "#"] * 3


def test_corridor_path_is_straight():
    grid = grid_from_rows(CORRIDOR)
    path = plan_path(grid, (1, 2), (1, 15))
    assert path is not None
    assert path.cost == pytest.approx(3.25)
    assert path.inflation == 0
    assert all(r == 1 for r, _ in path.cells)
    assert path.cells[0] == (1, 2) and path.cells[-1] == (1, 15)


def test_inflation_is_relaxed_through_narrow_gap():
    rows = [".......", ".......", "###.###", ".......", "......."]
    path = plan_path(grid_from_rows(rows), (0, 3), (4, 3), inflate=1)
    assert path is not None
    assert path.inflation == 0
    assert (2, 3) in path.cells


def test_inflation_kept_when_room_allows():
    path = plan_path(grid_from_rows(CORRIDOR), (1, 2), (1, 15), inflate=1)
    assert path is not None
    assert path.inflation == 1


def test_sealed_goal_has_no_path():
    rows = ["..#..", "..#..", "..#.."]
    assert plan_path(grid_from_rows(rows), (1, 0), (1, 4)) is None


def test_distance_field_charges_unknown_cells():
    grid = grid_from_rows(["..?.."])
    field = DistanceField(grid, (0, 0), unknown_penalty=2.0)
    assert field.to_cell((0, 4)) == pytest.approx(1.25)
    assert math.isinf(field.to_cell((40, 40)))
    assert field.to_cells([(0, 4), (0, 1)]) == pytest.approx(0.25)


# ---------------------------------------------------------------------------
# Snapshots


def test_snapshot_preserves_classes_and_registry(tmp_path):
    grid, registry = LogOddsMap(0.25, frame_id=2), []
    chair = Detection(instance_id=1, category="chair", observed_cells=((2, 3),), score=0.8)
    integrate_observation(grid, registry, _obs([[2, 3], [2, 2], [-1, 0]], [True, False, False], [chair]), PARAMS)

    stem = str(tmp_path / "maps" / "robot_0")
    pgm_path, _ = write_snapshot(grid, registry, stem, extra={"pose": [0.125, 0.125, 0]})
    loaded, loaded_registry, data = read_snapshot(stem)

    assert loaded.frame_id == 2
    assert data["pose"] == [0.125, 0.125, 0]
    for cell in [(2, 3), (2, 2), (-1, 0), (5, 5)]:
        assert classify(loaded, cell) == classify(grid, cell)
    assert loaded_registry == registry
    assert np.array_equal(read_pgm(pgm_path), classification_image(grid))


def test_read_snapshot_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_snapshot(str(tmp_path / "absent"))
