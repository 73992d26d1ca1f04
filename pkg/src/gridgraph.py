"""
8-connected grid graphs and single-source shortest paths.

Straight steps cost one cell length, diagonal steps sqrt(2) cell lengths,
optionally scaled by a per-cell cost of the cell being entered.
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

Cell = Tuple[int, int]

NEIGHBORS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
SQRT2 = math.sqrt(2.0)


def _shifted(shape: Tuple[int, int], dr: int, dc: int):
    rows, cols = shape
    here = (slice(max(0, -dr), rows - max(0, dr)), slice(max(0, -dc), cols - max(0, dc)))
    there = (slice(max(0, dr), rows - max(0, -dr)), slice(max(0, dc), cols - max(0, -dc)))
    return here, there


def build_grid_graph(passable: np.ndarray, step: float, cell_cost: Optional[np.ndarray] = None) -> csr_matrix:
    """
    Directed sparse graph over all cells; edges only between passable cells.
    """
    shape = passable.shape
    index = np.arange(passable.size).reshape(shape)
    heads, tails, weights = [], [], []
    for dr, dc in NEIGHBORS_8:
        here, there = _shifted(shape, dr, dc)
        ok = passable[here] & passable[there]
        length = step * (SQRT2 if dr and dc else 1.0)
        heads.append(index[here][ok])
        tails.append(index[there][ok])
        if cell_cost is None:
            weights.append(np.full(int(ok.sum()), length))
        else:
            weights.append(length * cell_cost[there][ok])
    data = np.concatenate(weights) if weights else np.empty(0)
    return csr_matrix(
        (data, (np.concatenate(heads), np.concatenate(tails))),
        shape=(passable.size, passable.size),
    )


def distance_field(
    passable: np.ndarray,
    source: Cell,
    step: float,
    cell_cost: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distances from `source` to every cell (inf where unreachable) plus the
    predecessor index grid (-9999 where none).
    """
    rows, cols = passable.shape
    r, c = source
    if not (0 <= r < rows and 0 <= c < cols) or not passable[r, c]:
        return np.full(passable.shape, np.inf), np.full(passable.shape, -9999, dtype=np.int64)
    graph = build_grid_graph(passable, step, cell_cost)
    dist, pred = dijkstra(graph, directed=True, indices=r * cols + c, return_predecessors=True)
    return dist.reshape(passable.shape), pred.reshape(passable.shape).astype(np.int64)


def reconstruct_path(pred: np.ndarray, source: Cell, target: Cell) -> Optional[List[Cell]]:
    cols = pred.shape[1]
    src = source[0] * cols + source[1]
    node = target[0] * cols + target[1]
    flat = pred.ravel()
    path = [node]
    while node != src:
        node = int(flat[node])
        if node < 0:
            return None
        path.append(node)
    return [(n // cols, n % cols) for n in reversed(path)]
