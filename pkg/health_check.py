"""
Pre-flight health checks for the simulator.

Usage:
    python health_check.py
    python health_check.py --skip-solver
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
import tempfile
from dataclasses import dataclass
from typing import List

import numpy as np

from src import config
from src.errors import SimulationError
from src.gridworld import load_scene
from src.metrics import MakespanInstance, greedy_makespan, optimal_makespan

FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tests", "fixtures")


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def check_config() -> CheckResult:
    problems = []
    if not config.GRID_RESOLUTION_M > 0:
        problems.append("GRID_RESOLUTION_M must be positive")
    if not 0 < config.SENSOR_FOV_DEG <= 360:
        problems.append("SENSOR_FOV_DEG must lie in (0, 360]")
    if not config.SENSOR_RANGE_M > 0:
        problems.append("SENSOR_RANGE_M must be positive")
    if not (config.LOGODDS_OCC > 0 and config.LOGODDS_FREE > 0 and config.LOGODDS_MAX > 0):
        problems.append("log-odds increments and clamp must be positive")
    if config.R_COMM_M < 0 or config.COOLDOWN_STEPS < 0:
        problems.append("R_COMM_M and COOLDOWN_STEPS must be non-negative")
    if not 0 <= config.IOU_MIN <= 1:
        problems.append("IOU_MIN must lie in [0, 1]")
    if config.MAX_STEPS < 0:
        problems.append("MAX_STEPS must be non-negative")
    if problems:
        return CheckResult(name="Configuration", ok=False, detail="; ".join(problems) + ".")
    return CheckResult(
        name="Configuration",
        ok=True,
        detail=f"resolution={config.GRID_RESOLUTION_M} m, r_comm={config.R_COMM_M} m, tau={config.COOLDOWN_STEPS}.",
    )


def check_output_dir(path: str = config.OUTPUT_DIR) -> CheckResult:
    try:
        os.makedirs(path, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path, prefix=".write_check_", delete=True):
            pass
    except OSError as exc:
        return CheckResult(name="Output Directory", ok=False, detail=f"Cannot write to {path}: {exc}")
    return CheckResult(name="Output Directory", ok=True, detail=f"Writable: {path}")


def check_fixtures(fixture_dir: str = FIXTURE_DIR) -> CheckResult:
    paths = sorted(glob.glob(os.path.join(fixture_dir, "*.scene")))
    if not paths:
        return CheckResult(name="Fixture Scenes", ok=False, detail=f"No .scene files in {fixture_dir}.")
    try:
        scenes = [load_scene(p) for p in paths]
    except (OSError, SimulationError, ValueError) as exc:
        return CheckResult(name="Fixture Scenes", ok=False, detail=f"Failed to load fixtures: {exc}")
    return CheckResult(name="Fixture Scenes", ok=True, detail=f"Loaded {len(scenes)} scene(s) from {fixture_dir}.")


def _sanity_instance() -> MakespanInstance:
    # Two robots on a line, three single-cell goals: 0 -- g0 -- g1 ... g2 -- 1
    points = np.array([0.0, 10.0, 1.0, 2.0, 8.0])
    dist = np.abs(points[:, None] - points[None, :])
    return MakespanInstance(starts=(0, 1), clusters=((2,), (3,), (4,)), dist=dist)


def check_solver() -> CheckResult:
    try:
        inst = _sanity_instance()
        greedy = greedy_makespan(inst).d_star
        exact = optimal_makespan(inst).d_star
    except SimulationError as exc:
        return CheckResult(name="Makespan Solver", ok=False, detail=f"Solver raised: {exc}")
    if exact > greedy + 1e-9 or abs(exact - 2.0) > 1e-9:
        return CheckResult(name="Makespan Solver", ok=False, detail=f"Unexpected makespan {exact} (greedy {greedy}).")
    return CheckResult(name="Makespan Solver", ok=True, detail=f"Optimal {exact:.2f} <= greedy {greedy:.2f}.")


def run_checks(skip_solver: bool) -> List[CheckResult]:
    results = [check_config(), check_output_dir(), check_fixtures()]
    if skip_solver:
        results.append(CheckResult(name="Makespan Solver", ok=True, detail="Skipped by --skip-solver flag."))
    else:
        results.append(check_solver())
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description="Run pre-flight checks for the simulator.")
    parser.add_argument(
        "--skip-solver",
        action="store_true",
        help="Skip the makespan solver sanity check.",
    )
    args = parser.parse_args()

    results = run_checks(skip_solver=args.skip_solver)
    failed = [r for r in results if not r.ok]

    print("Simulator Health Check")
    print("=" * 40)
    for result in results:
        status = "PASS" if result.ok else "FAIL"
        print(f"[{status}] {result.name}: {result.detail}")

    if failed:
        print("=" * 40)
        print(f"Overall: FAIL ({len(failed)} check(s) failed)")
        return 1

    print("=" * 40)
    print("Overall: PASS")
    return 0


if __name__ == "__main__":
    sys.exit(main())
