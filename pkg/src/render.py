"""
File-based figures: trajectory maps, four-panel merge overlays and frontier
snapshots, written as SVG with matplotlib's Agg backend.
"""

from __future__ import annotations

import json
import logging
import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.alignment import alignment_from_json, merge_maps, warp_cells  # noqa: E402
from src.coordination import frontier_weight  # noqa: E402
from src.errors import EmptyTraceError  # noqa: E402
from src.gridworld import GridScene  # noqa: E402
from src.harness import read_trace  # noqa: E402
from src.mapping import DistanceField, LogOddsMap, classification_image, extract_frontiers, read_snapshot  # noqa: E402

logger = logging.getLogger(__name__)

ROBOT_COLORS = ("tab:blue", "tab:red", "tab:green", "tab:orange", "tab:purple", "tab:brown")


def _extent(grid: LogOddsMap):
    left = -grid.origin[1] * grid.resolution
    top = -grid.origin[0] * grid.resolution
    return (left, left + grid.shape[1] * grid.resolution, top + grid.shape[0] * grid.resolution, top)


def _show_map(ax, grid: LogOddsMap, title: str) -> None:
    ax.imshow(classification_image(grid), cmap="gray", vmin=0, vmax=255, extent=_extent(grid), interpolation="nearest")
    ax.set_title(title)
    ax.set_aspect("equal")


def _save(fig, out_path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info("[Render] wrote %s", out_path)
    return out_path


def render_trajectory(records: Sequence[dict], out_path: str, scene: Optional[GridScene] = None) -> str:
    """
    One polyline per robot in world coordinates, with goal events marked.
    """
    if not records:
        raise EmptyTraceError("Trace has no records.")
    fig, ax = plt.subplots(figsize=(6, 6))
    if scene is not None:
        h, w = scene.occupancy.shape
        ax.imshow(~scene.occupancy, cmap="gray", extent=(0, w * scene.resolution, h * scene.resolution, 0), interpolation="nearest")
    robots = sorted({r["robot"] for r in records})
    for robot in robots:
        steps = [r for r in records if r["robot"] == robot]
        xs = [r["pose"][0] for r in steps]
        ys = [r["pose"][1] for r in steps]
        color = ROBOT_COLORS[robot % len(ROBOT_COLORS)]
        ax.plot(xs, ys, color=color, linewidth=1.5, label=f"robot {robot}")
        ax.plot(xs[:1], ys[:1], marker="o", color=color)
        for r in steps:
            for event in r["goal_events"]:
                marker = "*" if event["valid"] else "x"
                ax.plot(r["pose"][0], r["pose"][1], marker=marker, markersize=12, color=color)
                ax.annotate(f"g{event['goal_id']}", (r["pose"][0], r["pose"][1]), fontsize=8)
    ax.set_aspect("equal")
    if scene is None:
        ax.invert_yaxis()
    ax.legend(loc="upper right", fontsize=7)
    return _save(fig, out_path)


def render_merge_overlay(stem: str, out_path: str) -> str:
    """
    Panels: receiver map, sender map, overlay of both obstacle sets after
    alignment (receiver blue, sender red) and the merged result.
    """
    map_a, _, _ = read_snapshot(f"{stem}_a")
    map_b, _, _ = read_snapshot(f"{stem}_b")
    json_path = f"{stem}.json"
    if not os.path.exists(json_path):
        raise FileNotFoundError(f"File not found: {json_path}")
    with open(json_path, "r", encoding="utf-8") as handle:
        result = alignment_from_json(json.load(handle))

    merged = map_a.copy()
    merge_maps(merged, map_b, result.transform)

    fig, axes = plt.subplots(1, 4, figsize=(16, 4))
    _show_map(axes[0], map_a, "receiver")
    _show_map(axes[1], map_b, "sender")

    occ_a = np.argwhere(map_a.occupied_mask())
    axes[2].scatter((occ_a[:, 1] - map_a.origin[1] + 0.5) * map_a.resolution, (occ_a[:, 0] - map_a.origin[0] + 0.5) * map_a.resolution, s=2, c="tab:blue")
    si, sj, dst = warp_cells(map_b, result.transform, map_a)
    occupied_b = map_b.occupancy[si, sj] > 0
    axes[2].scatter((dst[occupied_b, 1] + 0.5) * map_a.resolution, (dst[occupied_b, 0] + 0.5) * map_a.resolution, s=2, c="tab:red")
    axes[2].invert_yaxis()
    axes[2].set_aspect("equal")
    axes[2].set_title(f"overlay (iou {result.iou:.2f})")

    _show_map(axes[3], merged, "merged")
    return _save(fig, out_path)


def render_frontier(stem: str, out_path: str) -> str:
    """
    Frontier clusters of one robot's map with their neighbor-aware weights.
    """
    grid, _, data = read_snapshot(stem)
    pose = data.get("pose")
    frontiers = extract_frontiers(grid)
    fig, ax = plt.subplots(figsize=(6, 6))
    _show_map(ax, grid, os.path.basename(stem))
    own = neighbors = None
    if pose is not None:
        own = DistanceField(grid, grid.local_cell(pose[0], pose[1]))
        neighbors = [
            DistanceField(grid, grid.local_cell(p[0], p[1])) for _, p in sorted(data.get("peers", {}).items())
        ]
        ax.plot(pose[0], pose[1], marker="o", color="tab:blue")
        for p in data.get("peers", {}).values():
            ax.plot(p[0], p[1], marker="o", color="tab:red")
    for k, frontier in enumerate(frontiers):
        cells = np.asarray(frontier.cells, dtype=float)
        color = ROBOT_COLORS[k % len(ROBOT_COLORS)]
        ax.scatter((cells[:, 1] + 0.5) * grid.resolution, (cells[:, 0] + 0.5) * grid.resolution, s=4, c=color)
        if own is not None:
            weight = frontier_weight(frontier, own, neighbors)
            r, c = frontier.representative
            ax.annotate(f"{weight:.2f}", ((c + 0.5) * grid.resolution, (r + 0.5) * grid.resolution), fontsize=7)
    return _save(fig, out_path)


def render(kind: str, source: str, out_path: str, scene: Optional[GridScene] = None) -> str:
    """
    `source` is a trace.jsonl for trajectories, an alignment stem for
    merge overlays and a map snapshot stem for frontiers.
    """
    if kind == "trajectory":
        return render_trajectory(read_trace(source), out_path, scene)
    if kind == "merge_overlay":
        return render_merge_overlay(source, out_path)
    if kind == "frontier":
        return render_frontier(source, out_path)
    raise ValueError(f"Unknown render kind {kind!r}.")
