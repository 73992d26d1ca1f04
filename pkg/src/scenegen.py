"""
Seeded rooms-and-corridors scenes with furniture instances, and episodes
over them. Everything is drawn from one numpy Generator so a seed fully
determines the suite.
"""

from __future__ import annotations

import json
import logging
import os
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from src.config import MAX_STEPS
from src.gridgraph import Cell
from src.gridworld import (
    Episode,
    GoalSpec,
    GridScene,
    Modality,
    ObjectInstance,
    Pose,
    SceneDistances,
    cell_center,
    episode_to_dict,
    scene_to_dict,
)

logger = logging.getLogger(__name__)

CATEGORIES = ("chair", "table", "bed", "sofa", "plant", "tv", "toilet", "sink")
DOOR_WIDTH = 2


def _split_points(rng: np.random.Generator, length: int, parts: int, min_room: int) -> List[int]:
    """
    Interior wall coordinates dividing [1, length-2] into `parts` rooms.
    """
    cuts = []
    lo = 1
    for k in range(parts - 1):
        remaining = parts - 1 - k
        hi = length - 2 - remaining * (min_room + 1) - min_room
        lo_cut = lo + min_room
        if hi < lo_cut:
            break
        cut = int(rng.integers(lo_cut, hi + 1))
        cuts.append(cut)
        lo = cut + 1
    return cuts


def _connected(free: np.ndarray) -> bool:
    _, count = ndimage.label(free, structure=np.ones((3, 3), dtype=bool))
    return count == 1


def _layout(rng: np.random.Generator, height: int, width: int, min_room: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Border walls, one or two interior walls per axis and a door in every wall
    segment between neighbouring rooms. Returns (occupancy, door mask).
    """
    occupancy = np.zeros((height, width), dtype=bool)
    doors = np.zeros((height, width), dtype=bool)
    occupancy[0, :] = occupancy[-1, :] = True
    occupancy[:, 0] = occupancy[:, -1] = True

    row_cuts = _split_points(rng, height, int(rng.integers(1, 3)) + 1, min_room)
    col_cuts = _split_points(rng, width, int(rng.integers(1, 3)) + 1, min_room)
    for r in row_cuts:
        occupancy[r, :] = True
    for c in col_cuts:
        occupancy[:, c] = True

    row_bounds = [0] + row_cuts + [height - 1]
    col_bounds = [0] + col_cuts + [width - 1]
    for r in row_cuts:
        for a, b in zip(col_bounds[:-1], col_bounds[1:]):
            if b - a - 1 >= DOOR_WIDTH + 2:
                start = int(rng.integers(a + 1, b - DOOR_WIDTH))
                doors[r, start : start + DOOR_WIDTH] = True
    for c in col_cuts:
        for a, b in zip(row_bounds[:-1], row_bounds[1:]):
            if b - a - 1 >= DOOR_WIDTH + 2:
                start = int(rng.integers(a + 1, b - DOOR_WIDTH))
                doors[start : start + DOOR_WIDTH, c] = True
    occupancy &= ~doors
    return occupancy, doors


def generate_scene(
    seed: int,
    scene_id: Optional[str] = None,
    height: int = 32,
    width: int = 32,
    n_instances: int = 8,
    resolution: float = 0.25,
    min_room: int = 6,
    max_attempts: int = 200,
) -> GridScene:
    rng = np.random.default_rng(seed)
    occupancy, doors = _layout(rng, height, width, min_room)
    keep_clear = ndimage.binary_dilation(doors, structure=np.ones((5, 5), dtype=bool))

    instances: List[ObjectInstance] = []
    attempts = 0
    while len(instances) < n_instances and attempts < max_attempts:
        attempts += 1
        h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        r, c = int(rng.integers(1, height - h)), int(rng.integers(1, width - w))
        block = (slice(r, r + h), slice(c, c + w))
        if occupancy[block].any() or keep_clear[block].any():
            continue
        trial = occupancy.copy()
        trial[block] = True
        if not _connected(~trial):
            continue
        occupancy = trial
        footprint = tuple((rr, cc) for rr in range(r, r + h) for cc in range(c, c + w))
        category = CATEGORIES[len(instances) % len(CATEGORIES)]
        xs = [(cc + 0.5) * resolution for _, cc in footprint]
        ys = [(rr + 0.5) * resolution for rr, _ in footprint]
        instances.append(ObjectInstance(len(instances), category, footprint, (sum(xs) / len(xs), sum(ys) / len(ys))))

    if len(instances) < n_instances:
        logger.warning("[SceneGen] seed %d placed %d of %d instances", seed, len(instances), n_instances)
    return GridScene(scene_id or f"scene_{seed:04d}", resolution, occupancy, tuple(instances))


def _clustered_starts(
    rng: np.random.Generator, scene: GridScene, distances: SceneDistances, n_agents: int, spread_m: float
) -> List[Cell]:
    free = np.argwhere(~scene.occupancy)
    for _ in range(100):
        anchor = tuple(int(v) for v in free[int(rng.integers(len(free)))])
        field = distances.field(anchor)
        near = [tuple(int(v) for v in cell) for cell in free if field[tuple(cell)] <= spread_m]
        if len(near) >= n_agents:
            picks = rng.choice(len(near), size=n_agents, replace=False)
            return [near[int(i)] for i in sorted(picks)]
    raise ValueError(f"Scene {scene.scene_id} has no room for {n_agents} clustered starts.")


def generate_episode(
    scene: GridScene,
    seed: int,
    n_agents: int = 4,
    n_goals: int = 3,
    max_steps: int = MAX_STEPS,
    success_radius: float = 1.0,
    spread_m: float = 1.5,
    episode_id: Optional[str] = None,
) -> Episode:
    """
    Clustered starts and `n_goals` goals over distinct categories; each goal
    accepts every instance of its category.
    """
    rng = np.random.default_rng(seed)
    distances = SceneDistances(scene)
    starts = _clustered_starts(rng, scene, distances, n_agents, spread_m)
    anchor_field = distances.field(starts[0])

    def reachable(instance: ObjectInstance) -> bool:
        return any(
            np.isfinite(anchor_field[r + dr, c + dc])
            for r, c in instance.footprint
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
            if scene.in_bounds((r + dr, c + dc))
        )

    categories = sorted({inst.category for inst in scene.instances if reachable(inst)})
    if not categories:
        raise ValueError(f"Scene {scene.scene_id} has no reachable instances.")
    chosen = [categories[int(i)] for i in rng.choice(len(categories), size=min(n_goals, len(categories)), replace=False)]
    modalities = tuple(Modality)
    goals = tuple(
        GoalSpec(
            goal_id=k,
            modality=modalities[k % len(modalities)],
            valid_instance_ids=frozenset(inst.instance_id for inst in scene.instances if inst.category == category),
            success_radius=success_radius,
            label=category,
        )
        for k, category in enumerate(chosen)
    )
    poses = tuple(
        Pose(*cell_center(cell, scene.resolution), int(rng.integers(0, 12)))
        for cell in starts
    )
    return Episode(
        episode_id=episode_id or f"{scene.scene_id}_ep{seed:04d}",
        scene_id=scene.scene_id,
        start_poses=poses,
        goals=goals,
        max_steps=max_steps,
        seed=int(seed),
    )


def write_suite(
    out_dir: str,
    count: int,
    seed: int,
    n_agents: int = 4,
    n_goals: int = 3,
    max_steps: int = MAX_STEPS,
) -> Tuple[List[str], List[str]]:
    """
    Write `count` scene/episode pairs; returns (scene paths, episode paths).
    """
    os.makedirs(out_dir, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(count * 2)
    scene_paths, episode_paths = [], []
    for k in range(count):
        scene = generate_scene(int(seeds[2 * k]), scene_id=f"scene_{k:04d}")
        episode = generate_episode(
            scene, int(seeds[2 * k + 1]), n_agents, n_goals, max_steps, episode_id=f"ep_{k:04d}"
        )
        scene_path = os.path.join(out_dir, f"{scene.scene_id}.scene")
        episode_path = os.path.join(out_dir, f"{episode.episode_id}.episode")
        with open(scene_path, "w", encoding="utf-8") as handle:
            json.dump(scene_to_dict(scene), handle, indent=1)
        with open(episode_path, "w", encoding="utf-8") as handle:
            json.dump(episode_to_dict(episode), handle, indent=1)
        scene_paths.append(scene_path)
        episode_paths.append(episode_path)
    logger.info("[SceneGen] wrote %d scene/episode pairs to %s", count, out_dir)
    return scene_paths, episode_paths
