"""
Shared builders for tests: hand-drawn maps and fixture paths.
"""

import os

import numpy as np

from src.mapping import LogOddsMap

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


def grid_from_rows(rows, resolution: float = 0.25, value: float = 2.0) -> LogOddsMap:
    """
    '#' occupied, '.' free, '?' unknown; local cell (r, c) is row r, column c.
    """
    occupied = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    known = np.array([[ch != "?" for ch in row] for row in rows], dtype=bool)
    grid = LogOddsMap(resolution)
    grid.origin = (0, 0)
    grid.occupancy = np.where(occupied, value, -value) * known
    grid.explored = known
    grid.semantic = {}
    return grid


def grid_from_cells(cells, occupied, resolution: float = 0.25, value: float = 2.0) -> LogOddsMap:
    """
    Explored map holding exactly `cells`; `occupied` flags each one.
    """
    grid = LogOddsMap(resolution)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    grid.ensure(cells)
    rows, cols = grid.to_index(cells)
    grid.occupancy[rows, cols] = np.where(np.asarray(occupied, dtype=bool), value, -value)
    grid.explored[rows, cols] = True
    return grid
