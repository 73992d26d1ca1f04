"""
Per-robot log-odds semantic map, instance registry, frontier extraction and
grid planning. Maps live in the owning robot's local frame; cells are
(row, col) in that frame and may be negative.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.config import (
    ASSOC_RADIUS_M,
    FRONTIER_MIN_CELLS,
    GRID_RESOLUTION_M,
    LOGODDS_FREE,
    LOGODDS_MAX,
    LOGODDS_OCC,
    LOGODDS_SEM,
    UNKNOWN_PENALTY,
)
from src.gridgraph import Cell, distance_field, reconstruct_path
from src.gridworld import Observation, Pose

logger = logging.getLogger(__name__)

GROW_MARGIN = 8


class CellClass(str, Enum):
    OCCUPIED = "occupied"
    FREE_EXPLORED = "free_explored"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class LogOddsParams:
    occ: float = LOGODDS_OCC
    free: float = LOGODDS_FREE
    sem: float = LOGODDS_SEM
    l_max: float = LOGODDS_MAX


@dataclass
class InstanceRecord:
    local_instance_id: int
    category: str
    cells: set
    centroid: Tuple[float, float]
    best_score: float
    observation_count: int = 1
    source_instance_id: int = -1  # detection-oracle identity, negative when spurious

    @property
    def is_spurious(self) -> bool:
        return self.source_instance_id < 0


@dataclass(frozen=True)
class Frontier:
    cells: Tuple[Cell, ...]
    representative: Cell

    @property
    def size(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class PlannedPath:
    cells: List[Cell]
    cost: float
    inflation: int


class LogOddsMap:
    """
    Multi-channel log-odds grid that grows on demand.
    """

    def __init__(self, resolution: float = GRID_RESOLUTION_M, frame_id: int = 0, size: int = 2 * GROW_MARGIN + 1):
        self.resolution = resolution
        self.frame_id = frame_id
        self.origin = (size // 2, size // 2)
        self.occupancy = np.zeros((size, size), dtype=float)
        self.explored = np.zeros((size, size), dtype=bool)
        self.semantic: Dict[str, np.ndarray] = {}

    # -- geometry ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, int]:
        return self.occupancy.shape

    def local_cell(self, x: float, y: float) -> Cell:
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def cell_center(self, cell: Cell) -> Tuple[float, float]:
        return (cell[1] + 0.5) * self.resolution, (cell[0] + 0.5) * self.resolution

    def to_index(self, cells: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        return cells[:, 0] + self.origin[0], cells[:, 1] + self.origin[1]

    def to_cell(self, i: int, j: int) -> Cell:
        return int(i) - self.origin[0], int(j) - self.origin[1]

    def contains(self, cell: Cell) -> bool:
        i, j = cell[0] + self.origin[0], cell[1] + self.origin[1]
        return 0 <= i < self.shape[0] and 0 <= j < self.shape[1]

    def ensure(self, cells: np.ndarray) -> None:
        """
        Grow all channels so every listed cell has an index.
        """
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        if cells.size == 0:
            return
        rows, cols = self.to_index(cells)
        top = max(0, GROW_MARGIN - int(rows.min())) if rows.min() < 0 else 0
        left = max(0, GROW_MARGIN - int(cols.min())) if cols.min() < 0 else 0
        bottom = int(rows.max()) - self.shape[0] + 1 + GROW_MARGIN if rows.max() >= self.shape[0] else 0
        right = int(cols.max()) - self.shape[1] + 1 + GROW_MARGIN if cols.max() >= self.shape[1] else 0
        if not (top or left or bottom or right):
            return
        pad = ((top, bottom), (left, right))
        self.occupancy = np.pad(self.occupancy, pad)
        self.explored = np.pad(self.explored, pad)
        for category in self.semantic:
            self.semantic[category] = np.pad(self.semantic[category], pad)
        self.origin = (self.origin[0] + top, self.origin[1] + left)

    def channel(self, category: str) -> np.ndarray:
        if category not in self.semantic:
            self.semantic[category] = np.zeros(self.shape, dtype=float)
        return self.semantic[category]

    # -- classification masks --------------------------------------------

    def occupied_mask(self) -> np.ndarray:
        return self.explored & (self.occupancy > 0)

    def free_mask(self) -> np.ndarray:
        return self.explored & (self.occupancy <= 0)

    def unknown_mask(self) -> np.ndarray:
        return ~self.explored

    def copy(self) -> "LogOddsMap":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Integration


def fuse_detection(
    registry: List[InstanceRecord],
    category: str,
    cells: Iterable[Cell],
    score: float,
    source_id: int,
    resolution: float,
    assoc_radius: float = ASSOC_RADIUS_M,
    count: int = 1,
) -> InstanceRecord:
    """
    Associate a detection with an existing record (same category, centroid
    within the association radius) or open a new one.
    """
    cell_set = {(int(r), int(c)) for r, c in cells}
    centroid = _cells_centroid(cell_set, resolution)
    best, best_dist = None, math.inf
    for record in registry:
        if record.category != category:
            continue
        dist = math.hypot(record.centroid[0] - centroid[0], record.centroid[1] - centroid[1])
        if dist <= assoc_radius and dist < best_dist:
            best, best_dist = record, dist
    if best is None:
        next_id = max((r.local_instance_id for r in registry), default=-1) + 1
        best = InstanceRecord(next_id, category, cell_set, centroid, float(score), count, int(source_id))
        registry.append(best)
        return best
    best.cells |= cell_set
    best.centroid = _cells_centroid(best.cells, resolution)
    best.best_score = max(best.best_score, float(score))
    best.observation_count += count
    if best.is_spurious and source_id >= 0:
        best.source_instance_id = int(source_id)
    return best


def _cells_centroid(cells: Iterable[Cell], resolution: float) -> Tuple[float, float]:
    arr = np.asarray(sorted(cells), dtype=float)
    return float(((arr[:, 1] + 0.5) * resolution).mean()), float(((arr[:, 0] + 0.5) * resolution).mean())


def integrate_observation(
    grid: LogOddsMap,
    registry: List[InstanceRecord],
    obs: Observation,
    params: LogOddsParams = LogOddsParams(),
    assoc_radius: float = ASSOC_RADIUS_M,
) -> None:
    """
    Accumulate one observation (already in the map's frame) into the map and registry.
    """
    cells = np.asarray(obs.cells, dtype=np.int64).reshape(-1, 2)
    grid.ensure(np.vstack([cells, [grid.local_cell(obs.pose.x, obs.pose.y)]]))
    if cells.size == 0:
        return
    rows, cols = grid.to_index(cells)
    delta = np.where(obs.obstacle, params.occ, -params.free)
    grid.occupancy[rows, cols] = np.clip(grid.occupancy[rows, cols] + delta, -params.l_max, params.l_max)
    grid.explored[rows, cols] = True

    detected: Dict[str, set] = {}
    for det in obs.detections:
        detected.setdefault(det.category, set()).update(det.observed_cells)
    for category in detected:
        grid.channel(category)

    visible = set(map(tuple, cells.tolist()))
    for category, channel in grid.semantic.items():
        hits = detected.get(category, set())
        misses = np.asarray([c for c in visible if c not in hits], dtype=np.int64).reshape(-1, 2)
        if misses.size:
            mr, mc = grid.to_index(misses)
            channel[mr, mc] = np.clip(channel[mr, mc] - params.free, -params.l_max, params.l_max)
        if hits:
            hr, hc = grid.to_index(np.asarray(sorted(hits), dtype=np.int64))
            channel[hr, hc] = np.clip(channel[hr, hc] + params.sem, -params.l_max, params.l_max)

    for det in obs.detections:
        fuse_detection(registry, det.category, det.observed_cells, det.score, det.instance_id, grid.resolution, assoc_radius)


def classify(grid: LogOddsMap, cell: Cell) -> CellClass:
    if not grid.contains(cell):
        return CellClass.UNKNOWN
    i, j = cell[0] + grid.origin[0], cell[1] + grid.origin[1]
    if not grid.explored[i, j]:
        return CellClass.UNKNOWN
    return CellClass.OCCUPIED if grid.occupancy[i, j] > 0 else CellClass.FREE_EXPLORED


# ---------------------------------------------------------------------------
# Frontiers


def frontier_mask(grid: LogOddsMap) -> np.ndarray:
    unknown = np.pad(grid.unknown_mask(), 1, constant_values=True)
    touches = unknown[:-2, 1:-1] | unknown[2:, 1:-1] | unknown[1:-1, :-2] | unknown[1:-1, 2:]
    return grid.free_mask() & touches


def extract_frontiers(grid: LogOddsMap, min_cells: int = FRONTIER_MIN_CELLS) -> List[Frontier]:
    """
    8-connected clusters of explored-free cells bordering unknown space.
    """
    labels, count = ndimage.label(frontier_mask(grid), structure=np.ones((3, 3), dtype=bool))
    frontiers = []
    for label in range(1, count + 1):
        ii, jj = np.nonzero(labels == label)
        if ii.size < min_cells:
            continue
        cells = sorted(grid.to_cell(i, j) for i, j in zip(ii, jj))
        arr = np.asarray(cells, dtype=float)
        centroid = arr.mean(axis=0)
        d2 = ((arr - centroid) ** 2).sum(axis=1)
        representative = cells[int(np.argmin(d2))]  # argmin keeps the first (row, col) on ties
        frontiers.append(Frontier(tuple(cells), representative))
    frontiers.sort(key=lambda f: (-f.size, f.representative[0], f.representative[1]))
    return frontiers


# ---------------------------------------------------------------------------
# Planning


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def inflate_obstacles(occupied: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return occupied.copy()
    return ndimage.binary_dilation(occupied, structure=disk(radius))


def planning_grids(grid: LogOddsMap, extra: Sequence[Cell] = ()) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int]]:
    """
    Occupied / unknown masks covering the map plus any extra cells, and the
    index of local cell (0, 0) in them.
    """
    occupied, unknown = grid.occupied_mask(), grid.unknown_mask()
    origin = grid.origin
    if extra:
        arr = np.asarray(extra, dtype=np.int64).reshape(-1, 2)
        rows, cols = arr[:, 0] + origin[0], arr[:, 1] + origin[1]
        top, left = max(0, 1 - int(rows.min())), max(0, 1 - int(cols.min()))
        bottom = max(0, int(rows.max()) + 2 - occupied.shape[0])
        right = max(0, int(cols.max()) + 2 - occupied.shape[1])
        if top or left or bottom or right:
            pad = ((top, bottom), (left, right))
            occupied = np.pad(occupied, pad)
            unknown = np.pad(unknown, pad, constant_values=True)
            origin = (origin[0] + top, origin[1] + left)
    return occupied, unknown, origin


def plan_path(
    grid: LogOddsMap,
    start: Cell,
    goal: Cell,
    inflate: int = 0,
    unknown_penalty: float = UNKNOWN_PENALTY,
) -> Optional[PlannedPath]:
    """
    Shortest 8-connected path avoiding Occupied cells dilated by `inflate`;
    the radius is reduced stepwise to 0 before giving up. Unknown cells cost
    `unknown_penalty` times a known free cell.
    """
    occupied, unknown, origin = planning_grids(grid, [start, goal])
    s = (start[0] + origin[0], start[1] + origin[1])
    g = (goal[0] + origin[0], goal[1] + origin[1])
    cost = np.where(unknown, unknown_penalty, 1.0)
    for radius in range(max(0, inflate), -1, -1):
        blocked = inflate_obstacles(occupied, radius)
        if blocked[s] or blocked[g]:
            continue
        dist, pred = distance_field(~blocked, s, grid.resolution, cost)
        if not np.isfinite(dist[g]):
            continue
        path = reconstruct_path(pred, s, g)
        if path is None:
            continue
        cells = [(i - origin[0], j - origin[1]) for i, j in path]
        return PlannedPath(cells, float(dist[g]), radius)
    return None


class DistanceField:
    """
    Geodesic distances on a robot's own map from one source cell, through
    non-Occupied cells with unknown space at a penalty.
    """

    def __init__(self, grid: LogOddsMap, source: Cell, unknown_penalty: float = UNKNOWN_PENALTY):
        occupied, unknown, origin = planning_grids(grid, [source])
        passable = ~occupied
        s = (source[0] + origin[0], source[1] + origin[1])
        passable[s] = True
        self.source = source
        self.origin = origin
        self.resolution = grid.resolution
        self.distances, _ = distance_field(passable, s, grid.resolution, np.where(unknown, unknown_penalty, 1.0))

    def to_cell(self, cell: Cell) -> float:
        i, j = cell[0] + self.origin[0], cell[1] + self.origin[1]
        if not (0 <= i < self.distances.shape[0] and 0 <= j < self.distances.shape[1]):
            return math.inf
        return float(self.distances[i, j])

    def to_cells(self, cells: Iterable[Cell]) -> float:
        return min((self.to_cell(c) for c in cells), default=math.inf)

    def to_frontier(self, frontier: Frontier) -> float:
        return self.to_cells(frontier.cells)


# ---------------------------------------------------------------------------
# Snapshots


def _registry_to_json(registry: Sequence[InstanceRecord]) -> list:
    return [
        {
            "local_instance_id": r.local_instance_id,
            "category": r.category,
            "cells": [list(c) for c in sorted(r.cells)],
            "centroid": list(r.centroid),
            "best_score": r.best_score,
            "observation_count": r.observation_count,
            "source_instance_id": r.source_instance_id,
        }
        for r in registry
    ]


def classification_image(grid: LogOddsMap) -> np.ndarray:
    image = np.full(grid.shape, 128, dtype=np.uint8)
    image[grid.free_mask()] = 255
    image[grid.occupied_mask()] = 0
    return image


def snapshot_to_json(grid: LogOddsMap, registry: Sequence[InstanceRecord], extra: Optional[dict] = None) -> dict:
    explored = np.argwhere(grid.explored)
    cells = [list(grid.to_cell(i, j)) for i, j in explored]
    data = {
        "resolution": grid.resolution,
        "frame_id": grid.frame_id,
        "origin": list(grid.origin),
        "shape": list(grid.shape),
        "explored": cells,
        "occupancy": [round(float(grid.occupancy[i, j]), 6) for i, j in explored],
        "semantic": {
            category: [[*grid.to_cell(i, j), round(float(ch[i, j]), 6)] for i, j in np.argwhere(ch != 0)]
            for category, ch in sorted(grid.semantic.items())
        },
        "registry": _registry_to_json(registry),
    }
    if extra:
        data.update(extra)
    return data


def snapshot_from_json(data: dict) -> Tuple[LogOddsMap, List[InstanceRecord]]:
    grid = LogOddsMap(float(data["resolution"]), int(data.get("frame_id", 0)))
    cells = np.asarray(data.get("explored", []), dtype=np.int64).reshape(-1, 2)
    sem_cells = [np.asarray([v[:2] for v in values], dtype=np.int64).reshape(-1, 2) for values in data.get("semantic", {}).values()]
    grid.ensure(np.vstack([cells] + sem_cells) if sem_cells else cells)
    if cells.size:
        rows, cols = grid.to_index(cells)
        grid.explored[rows, cols] = True
        grid.occupancy[rows, cols] = np.asarray(data["occupancy"], dtype=float)
    for category, values in data.get("semantic", {}).items():
        channel = grid.channel(category)
        for r, c, v in values:
            i, j = grid.to_index(np.asarray([[r, c]]))
            channel[i[0], j[0]] = float(v)
    registry = [
        InstanceRecord(
            int(r["local_instance_id"]),
            str(r["category"]),
            {(int(a), int(b)) for a, b in r["cells"]},
            (float(r["centroid"][0]), float(r["centroid"][1])),
            float(r["best_score"]),
            int(r["observation_count"]),
            int(r["source_instance_id"]),
        )
        for r in data.get("registry", [])
    ]
    return grid, registry


def write_pgm(path: str, image: np.ndarray) -> None:
    with open(path, "wb") as handle:
        handle.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        handle.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        raw = handle.read()
    magic, dims, _maxval, data = raw.split(b"\n", 3)
    if magic.strip() != b"P5":
        raise ValueError(f"{path} is not a binary PGM file.")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(data[: width * height], dtype=np.uint8).reshape(height, width)


def write_snapshot(grid: LogOddsMap, registry: Sequence[InstanceRecord], stem: str, extra: Optional[dict] = None) -> Tuple[str, str]:
    """
    Write `<stem>.pgm` (0 occupied / 128 unknown / 255 free) and `<stem>.json`.
    """
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    pgm_path, json_path = f"{stem}.pgm", f"{stem}.json"
    write_pgm(pgm_path, classification_image(grid))
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump(snapshot_to_json(grid, registry, extra), handle)
    return pgm_path, json_path


def read_snapshot(stem: str) -> Tuple[LogOddsMap, List[InstanceRecord], dict]:
    json_path = f"{stem}.json"
    if not os.path.exists(json_path):
        raise FileNotFoundError(f"File not found: {json_path}")
    with open(json_path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    grid, registry = snapshot_from_json(data)
    return grid, registry, data


def pose_to_json(pose: Pose) -> list:
    return [pose.x, pose.y, pose.heading_index]
