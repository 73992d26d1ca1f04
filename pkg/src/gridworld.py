"""
Ground-truth world: scenes, episodes, agent kinematics and the synthetic
observation model (ray-cast visibility plus a detection oracle).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import FORWARD_STEP_M, GRID_RESOLUTION_M, SENSOR_FOV_DEG, SENSOR_RANGE_M
from src.errors import InvalidCellError, SceneParseError, SceneValidationError
from src.gridgraph import Cell, distance_field

logger = logging.getLogger(__name__)

HEADING_STEPS = 12
HEADING_INCREMENT = math.pi / 6


class Action(str, Enum):
    FORWARD = "forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    STOP = "stop"


class Modality(str, Enum):
    CATEGORY = "category"
    LANGUAGE = "language"
    IMAGE = "image"


# Rounded so axis-aligned moves stay exact in binary floating point.
_UNIT = tuple(
    (round(math.cos(k * HEADING_INCREMENT), 12), round(math.sin(k * HEADING_INCREMENT), 12))
    for k in range(HEADING_STEPS)
)


def heading_vector(heading_index: int) -> Tuple[float, float]:
    return _UNIT[heading_index % HEADING_STEPS]


def cell_of(x: float, y: float, resolution: float) -> Cell:
    return int(math.floor(y / resolution)), int(math.floor(x / resolution))


def cell_center(cell: Cell, resolution: float) -> Tuple[float, float]:
    return (cell[1] + 0.5) * resolution, (cell[0] + 0.5) * resolution


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading_index: int = 0

    @property
    def heading(self) -> float:
        return (self.heading_index % HEADING_STEPS) * HEADING_INCREMENT

    def cell(self, resolution: float = GRID_RESOLUTION_M) -> Cell:
        return cell_of(self.x, self.y, resolution)


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: int
    category: str
    footprint: Tuple[Cell, ...]
    centroid: Tuple[float, float]


@dataclass(frozen=True, eq=False)
class GridScene:
    scene_id: str
    resolution: float
    occupancy: np.ndarray  # True = Obstacle
    instances: Tuple[ObjectInstance, ...] = ()

    @property
    def height_cells(self) -> int:
        return int(self.occupancy.shape[0])

    @property
    def width_cells(self) -> int:
        return int(self.occupancy.shape[1])

    @property
    def passable(self) -> np.ndarray:
        return ~self.occupancy

    @property
    def free_cell_count(self) -> int:
        return int((~self.occupancy).sum())

    @property
    def categories(self) -> List[str]:
        return sorted({inst.category for inst in self.instances})

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height_cells and 0 <= cell[1] < self.width_cells

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not bool(self.occupancy[cell])

    def instance(self, instance_id: int) -> ObjectInstance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)


@dataclass(frozen=True)
class GoalSpec:
    goal_id: int
    modality: Modality
    valid_instance_ids: FrozenSet[int]
    success_radius: float
    label: str = ""


@dataclass(frozen=True)
class Episode:
    episode_id: str
    scene_id: str
    start_poses: Tuple[Pose, ...]
    goals: Tuple[GoalSpec, ...]
    max_steps: int
    seed: int


@dataclass(frozen=True)
class SensorConfig:
    fov: float = math.radians(SENSOR_FOV_DEG)
    range_m: float = SENSOR_RANGE_M


@dataclass(frozen=True)
class DetectionNoise:
    p_miss: float = 0.0
    p_fp: float = 0.0
    score_mean: float = 1.0
    score_sd: float = 0.0


@dataclass(frozen=True)
class NoiseModel:
    """
    Detection noise keyed by object category; categories inherit the profile
    of the goal modality that references them.
    """
    default: DetectionNoise = field(default_factory=DetectionNoise)
    by_category: Mapping[str, DetectionNoise] = field(default_factory=dict)

    def profile_for(self, category: str) -> DetectionNoise:
        return self.by_category.get(category, self.default)

    def false_positive_categories(self, categories: Iterable[str]) -> List[str]:
        return [c for c in categories if self.profile_for(c).p_fp > 0]

    @classmethod
    def for_episode(
        cls,
        scene: GridScene,
        goals: Iterable[GoalSpec],
        by_modality: Mapping[Modality, DetectionNoise],
        default: Optional[DetectionNoise] = None,
    ) -> "NoiseModel":
        default = default or DetectionNoise()
        by_category: Dict[str, DetectionNoise] = {}
        for goal in goals:
            profile = by_modality.get(goal.modality, default)
            for instance_id in sorted(goal.valid_instance_ids):
                by_category.setdefault(scene.instance(instance_id).category, profile)
        return cls(default=default, by_category=by_category)


@dataclass(frozen=True)
class Detection:
    instance_id: int  # negative for spurious detections
    category: str
    observed_cells: Tuple[Cell, ...]
    score: float

    @property
    def is_spurious(self) -> bool:
        return self.instance_id < 0


@dataclass(frozen=True, eq=False)
class Observation:
    robot_id: int
    pose: Pose
    cells: np.ndarray  # (k, 2) int rows/cols, unique
    obstacle: np.ndarray  # (k,) bool
    detections: Tuple[Detection, ...] = ()

    @property
    def visible_cells(self) -> Dict[Cell, bool]:
        return {(int(r), int(c)): bool(o) for (r, c), o in zip(self.cells, self.obstacle)}


# ---------------------------------------------------------------------------
# Loading


def _read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SceneParseError(f"Malformed JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneParseError(f"Expected a JSON object in {path}.")
    return data


def _centroid(cells: Sequence[Cell], resolution: float) -> Tuple[float, float]:
    xs = [(c + 0.5) * resolution for _, c in cells]
    ys = [(r + 0.5) * resolution for r, _ in cells]
    return sum(xs) / len(xs), sum(ys) / len(ys)


def scene_from_dict(data: dict) -> GridScene:
    try:
        scene_id = str(data["scene_id"])
        resolution = float(data.get("resolution_m", GRID_RESOLUTION_M))
        rows = list(data["grid"])
        raw_instances = list(data.get("instances", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError(f"Scene is missing required fields: {exc}") from exc

    if not rows or not all(isinstance(row, str) for row in rows):
        raise SceneParseError("Scene grid must be a non-empty list of strings.")
    width = len(rows[0])
    if width == 0 or any(len(row) != width for row in rows):
        raise SceneParseError("Scene grid rows must share one non-zero length.")
    if any(ch not in ".#" for row in rows for ch in row):
        raise SceneParseError("Scene grid may only contain '.' and '#'.")
    if not resolution > 0:
        raise SceneValidationError(f"Resolution must be positive, got {resolution}.")

    occupancy = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    height = len(rows)

    instances = []
    seen_ids = set()
    for raw in raw_instances:
        try:
            instance_id = int(raw["id"])
            category = str(raw["category"])
            cells = [(int(r), int(c)) for r, c in raw["cells"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneParseError(f"Malformed instance entry {raw!r}: {exc}") from exc
        if instance_id in seen_ids:
            raise SceneValidationError(f"Duplicate instance id {instance_id}.")
        if not cells:
            raise SceneValidationError(f"Instance {instance_id} has an empty footprint.")
        for r, c in cells:
            if not (0 <= r < height and 0 <= c < width):
                raise SceneValidationError(
                    f"Instance {instance_id} cell ({r}, {c}) is outside the {height}x{width} grid."
                )
        seen_ids.add(instance_id)
        footprint = tuple(sorted(set(cells)))
        instances.append(
            ObjectInstance(instance_id, category, footprint, _centroid(footprint, resolution))
        )

    return GridScene(scene_id, resolution, occupancy, tuple(instances))


def load_scene(path: str) -> GridScene:
    """
    Load and validate a scene file.
    """
    return scene_from_dict(_read_json(path))


def scene_to_dict(scene: GridScene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "resolution_m": scene.resolution,
        "grid": ["".join("#" if v else "." for v in row) for row in scene.occupancy],
        "instances": [
            {"id": inst.instance_id, "category": inst.category, "cells": [list(c) for c in inst.footprint]}
            for inst in scene.instances
        ],
    }


def episode_from_dict(data: dict, scene: Optional[GridScene] = None, episode_id: str = "") -> Episode:
    try:
        scene_id = str(data["scene_id"])
        starts_raw = list(data["starts"])
        goals_raw = list(data["goals"])
        max_steps = int(data["max_steps"])
        seed = int(data["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneParseError(f"Episode is missing required fields: {exc}") from exc

    starts = []
    for raw in starts_raw:
        try:
            x, y, heading_deg = float(raw[0]), float(raw[1]), float(raw[2])
        except (IndexError, TypeError, ValueError) as exc:
            raise SceneParseError(f"Malformed start {raw!r}.") from exc
        if heading_deg % 30 != 0:
            raise SceneValidationError(f"Start heading {heading_deg} is not a multiple of 30 degrees.")
        starts.append(Pose(x, y, int(heading_deg // 30) % HEADING_STEPS))

    goals = []
    for raw in goals_raw:
        try:
            goal = GoalSpec(
                goal_id=int(raw["id"]),
                modality=Modality(str(raw.get("modality", "category")).lower()),
                valid_instance_ids=frozenset(int(i) for i in raw["valid_instance_ids"]),
                success_radius=float(raw["success_radius_m"]),
                label=str(raw.get("label", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneParseError(f"Malformed goal {raw!r}: {exc}") from exc
        goals.append(goal)

    if not starts:
        raise SceneValidationError("Episode needs at least one start pose.")
    if not goals:
        raise SceneValidationError("Episode needs at least one goal.")
    if max_steps < 0:
        raise SceneValidationError("max_steps must be non-negative.")
    for goal in goals:
        if not goal.valid_instance_ids:
            raise SceneValidationError(f"Goal {goal.goal_id} has no valid instances.")
        if not goal.success_radius > 0:
            raise SceneValidationError(f"Goal {goal.goal_id} needs a positive success radius.")

    if scene is not None:
        if scene.scene_id != scene_id:
            raise SceneValidationError(f"Episode targets scene {scene_id}, got {scene.scene_id}.")
        known = {inst.instance_id for inst in scene.instances}
        for goal in goals:
            missing = goal.valid_instance_ids - known
            if missing:
                raise SceneValidationError(f"Goal {goal.goal_id} references unknown instances {sorted(missing)}.")
        for pose in starts:
            if not scene.is_free(pose.cell(scene.resolution)):
                raise SceneValidationError(f"Start {pose} is not on a Free cell.")

    return Episode(
        episode_id=str(data.get("episode_id", episode_id or scene_id)),
        scene_id=scene_id,
        start_poses=tuple(starts),
        goals=tuple(goals),
        max_steps=max_steps,
        seed=seed,
    )


def load_episode(path: str, scene: Optional[GridScene] = None) -> Episode:
    stem = os.path.splitext(os.path.basename(path))[0]
    return episode_from_dict(_read_json(path), scene=scene, episode_id=stem)


def episode_to_dict(episode: Episode) -> dict:
    return {
        "episode_id": episode.episode_id,
        "scene_id": episode.scene_id,
        "starts": [[p.x, p.y, (p.heading_index % HEADING_STEPS) * 30] for p in episode.start_poses],
        "goals": [
            {
                "id": g.goal_id,
                "modality": g.modality.value,
                "valid_instance_ids": sorted(g.valid_instance_ids),
                "success_radius_m": g.success_radius,
                "label": g.label,
            }
            for g in episode.goals
        ],
        "max_steps": episode.max_steps,
        "seed": episode.seed,
    }


# ---------------------------------------------------------------------------
# Kinematics


def step_agent(scene: GridScene, pose: Pose, action: Action) -> Pose:
    """
    Apply one discrete action. Forward into an Obstacle or off the grid is a no-op.
    """
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading_index - 1) % HEADING_STEPS)
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading_index + 1) % HEADING_STEPS)
    if action != Action.FORWARD:
        return pose
    ux, uy = heading_vector(pose.heading_index)
    x, y = pose.x + FORWARD_STEP_M * ux, pose.y + FORWARD_STEP_M * uy
    if not scene.is_free(cell_of(x, y, scene.resolution)):
        return pose
    return Pose(x, y, pose.heading_index % HEADING_STEPS)


# ---------------------------------------------------------------------------
# Observation model


def _traverse(x: float, y: float, angles: np.ndarray, resolution: float, range_m: float):
    """
    Every cell each ray passes through, in order, with the ray length at
    which it enters the cell. A ray through a cell corner steps the row
    first, so it never slips between two diagonal cells.
    """
    dx, dy = np.cos(angles), np.sin(angles)
    col = np.full(angles.shape, math.floor(x / resolution), dtype=np.int64)
    row = np.full(angles.shape, math.floor(y / resolution), dtype=np.int64)
    step_c = np.where(dx > 0, 1, -1)
    step_r = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_c = np.where(dx != 0, ((col + (dx > 0)) * resolution - x) / dx, np.inf)
        next_r = np.where(dy != 0, ((row + (dy > 0)) * resolution - y) / dy, np.inf)
        delta_c = np.where(dx != 0, resolution / np.abs(dx), np.inf)
        delta_r = np.where(dy != 0, resolution / np.abs(dy), np.inf)

    rows, cols, entry = [row], [col], [np.zeros(angles.shape)]
    for _ in range(int(math.ceil(2 * range_m / resolution)) + 2):
        along_c = next_c < next_r
        entry.append(np.where(along_c, next_c, next_r))
        col = col + np.where(along_c, step_c, 0)
        row = row + np.where(along_c, 0, step_r)
        next_c = np.where(along_c, next_c + delta_c, next_c)
        next_r = np.where(along_c, next_r, next_r + delta_r)
        rows.append(row)
        cols.append(col)
    return np.stack(rows, axis=1), np.stack(cols, axis=1), np.stack(entry, axis=1)


def cast_rays(
    occupancy: np.ndarray,
    resolution: float,
    x: float,
    y: float,
    heading: float,
    sensor: SensorConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cells crossed by rays fanned across the field of view; each ray stops at
    the first Obstacle (which is kept) or at the grid border.
    """
    if not (0 < sensor.fov <= 2 * math.pi) or not sensor.range_m > 0:
        raise ValueError(f"Invalid sensor configuration {sensor}.")
    spacing = math.atan(0.5 * resolution / sensor.range_m)
    if sensor.fov >= 2 * math.pi - 1e-12:
        n_rays = int(math.ceil(2 * math.pi / spacing))
        angles = heading - math.pi + np.arange(n_rays) * (2 * math.pi / n_rays)
    else:
        n_rays = int(math.ceil(sensor.fov / spacing)) + 1
        angles = heading + np.linspace(-sensor.fov / 2, sensor.fov / 2, n_rays)

    rows, cols, entry = _traverse(x, y, angles, resolution, sensor.range_m)
    within = entry <= sensor.range_m
    height, width = occupancy.shape
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    blocked = np.zeros_like(inside)
    blocked[inside] = occupancy[rows[inside], cols[inside]]
    stop = (blocked | ~inside) & within
    n_cells = rows.shape[1]
    first_stop = np.where(stop.any(axis=1), stop.argmax(axis=1), n_cells)
    order = np.arange(n_cells)[None, :]
    keep = within & ((order < first_stop[:, None]) | ((order == first_stop[:, None]) & blocked))

    cells = np.unique(np.stack([rows[keep], cols[keep]], axis=1), axis=0)
    if cells.size == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=bool)
    return cells, occupancy[cells[:, 0], cells[:, 1]]


def observe(
    scene: GridScene,
    pose: Pose,
    sensor: SensorConfig,
    rng: np.random.Generator,
    noise: Optional[NoiseModel] = None,
    robot_id: int = 0,
) -> Observation:
    """
    Ray-cast visibility plus oracle detections. Zero noise is the
    ground-truth-semantics regime. A spurious detection draws a category
    uniformly and fires with that category's own p_fp.
    """
    noise = noise or NoiseModel()
    cells, obstacle = cast_rays(scene.occupancy, scene.resolution, pose.x, pose.y, pose.heading, sensor)
    visible = np.zeros(scene.occupancy.shape, dtype=bool)
    if cells.size:
        visible[cells[:, 0], cells[:, 1]] = True

    detections: List[Detection] = []
    for inst in scene.instances:
        seen = tuple(c for c in inst.footprint if visible[c])
        if not seen:
            continue
        profile = noise.profile_for(inst.category)
        if profile.p_miss > 0 and rng.random() < profile.p_miss:
            continue
        detections.append(Detection(inst.instance_id, inst.category, seen, _draw_score(profile, rng)))

    categories = scene.categories
    free_visible = cells[~obstacle] if cells.size else cells
    if len(free_visible) and noise.false_positive_categories(categories):
        category = categories[int(rng.integers(len(categories)))]
        profile = noise.profile_for(category)
        if profile.p_fp > 0 and rng.random() < profile.p_fp:
            r, c = free_visible[int(rng.integers(len(free_visible)))]
            pseudo_id = -1 - int(rng.integers(0, 2**31 - 1))
            detections.append(Detection(pseudo_id, category, ((int(r), int(c)),), _draw_score(profile, rng)))

    return Observation(robot_id, pose, cells, obstacle, tuple(detections))


def _draw_score(profile: DetectionNoise, rng: np.random.Generator) -> float:
    if profile.score_sd > 0:
        return float(np.clip(rng.normal(profile.score_mean, profile.score_sd), 0.0, 1.0))
    return float(np.clip(profile.score_mean, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Distances


def distance_to_cells(point: Tuple[float, float], cells: Iterable[Cell], resolution: float) -> float:
    """
    Euclidean distance from a point to the closest point of any cell square.
    """
    arr = np.asarray(list(cells), dtype=float)
    if arr.size == 0:
        return math.inf
    x, y = point
    x0, y0 = arr[:, 1] * resolution, arr[:, 0] * resolution
    dx = np.maximum(np.maximum(x0 - x, x - (x0 + resolution)), 0.0)
    dy = np.maximum(np.maximum(y0 - y, y - (y0 + resolution)), 0.0)
    return float(np.min(np.hypot(dx, dy)))


def _as_cell(scene: GridScene, a: Union[Pose, Cell]) -> Cell:
    return a.cell(scene.resolution) if isinstance(a, Pose) else (int(a[0]), int(a[1]))


def geodesic_distance(scene: GridScene, a: Union[Pose, Cell], b: Cell) -> float:
    """
    8-connected shortest path length in meters over Free cells; inf when unreachable.
    """
    source = _as_cell(scene, a)
    if not scene.in_bounds(b):
        raise InvalidCellError(f"Cell {b} is outside the scene.")
    if not scene.is_free(source):
        raise InvalidCellError(f"Source {source} is not a Free cell.")
    if source == tuple(b):
        return 0.0
    dist, _ = distance_field(scene.passable, source, scene.resolution)
    return float(dist[b[0], b[1]])


class SceneDistances:
    """
    Memoised geodesic distance fields keyed by source cell.
    """

    def __init__(self, scene: GridScene):
        self.scene = scene
        self._fields: Dict[Cell, np.ndarray] = {}

    def field(self, source: Cell) -> np.ndarray:
        source = (int(source[0]), int(source[1]))
        if source not in self._fields:
            self._fields[source], _ = distance_field(self.scene.passable, source, self.scene.resolution)
        return self._fields[source]

    def between(self, a: Cell, b: Cell) -> float:
        return float(self.field(a)[b[0], b[1]])
