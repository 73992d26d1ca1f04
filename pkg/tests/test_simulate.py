import argparse
import json
import os

import pytest

from simulate import main, parse_agents
from tests.helpers import fixture_path


def test_parse_agents_forms():
    assert parse_agents("1..4") == [1, 2, 3, 4]
    assert parse_agents("2,4") == [2, 4]
    assert parse_agents("3") == [3]


@pytest.mark.parametrize("text", ["0..2", "a", "", "1..x"])
def test_parse_agents_rejects_bad_ranges(text):
    with pytest.raises(argparse.ArgumentTypeError):
        parse_agents(text)


def test_run_then_eval_then_render(tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["run", "--episode", fixture_path("adjacent_goal.episode"), "--out", str(out)]) == 0
    row = json.loads(capsys.readouterr().out)
    assert row["found"] == 1
    assert row["steps"] == 1
    run_dir = row["run_dir"]
    assert os.path.exists(os.path.join(run_dir, "trace.jsonl"))

    assert main(["eval", "--traces", str(out), "--out", str(tmp_path / "eval")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["violations"] == 0
    assert summary["aggregate"][0]["sr"] == 1.0
    assert os.path.exists(tmp_path / "eval" / "eval_results.csv")

    svg = tmp_path / "trajectory.svg"
    args = ["render", "--trace", os.path.join(run_dir, "trace.jsonl"), "--scene", fixture_path("room_16x16.scene"), "--out", str(svg)]
    assert main(args) == 0
    assert svg.exists()


def test_gen_scenes_then_batch(tmp_path, capsys):
    suite = tmp_path / "suite"
    assert main(["gen-scenes", "--count", "1", "--seed", "2", "--agents", "2", "--max-steps", "5", "--out", str(suite)]) == 0
    assert "Wrote 1 scenes and 1 episodes" in capsys.readouterr().out

    assert main(["batch", "--suite", str(suite), "--agents", "1..2", "--out", str(tmp_path / "batch")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert [row["n"] for row in report["aggregate"]] == [1, 2]
    assert report["failed"] == []
    assert os.path.exists(tmp_path / "batch" / "results.csv")


def test_missing_episode_exits_nonzero(tmp_path, capsys):
    assert main(["run", "--episode", str(tmp_path / "absent.episode")]) == 1
    assert "Error:" in capsys.readouterr().err


def test_empty_suite_and_trace_dir_exit_nonzero(tmp_path):
    assert main(["batch", "--suite", str(tmp_path)]) == 1
    assert main(["eval", "--traces", str(tmp_path)]) == 1
