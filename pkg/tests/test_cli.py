"""Tests for the command-line interface."""

from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from replsynth import __version__
from replsynth.cli import RUNTIME_FAILURE, main
from replsynth.config import Config, GenConfig
from replsynth.datagen import generate_suite, save_tasks
from tests.helpers import MICRO_CONFIG, make_micro_domain


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def config_file(tmp_path) -> Path:
    path = tmp_path / "replsynth.yaml"
    path.write_text(yaml.safe_dump(MICRO_CONFIG), encoding="utf-8")
    return path


@pytest.fixture
def tasks_file(tmp_path) -> Path:
    domain = make_micro_domain()
    path = tmp_path / "tasks.yaml"
    save_tasks(domain, generate_suite(domain, GenConfig(max_objects=2), 2, seed=0), path)
    return path


def test_version(runner) -> None:
    result = runner.invoke(main, ["version"])

    assert result.exit_code == 0
    assert __version__ in result.output


def test_init_writes_a_loadable_config(runner, tmp_path) -> None:
    output = tmp_path / "replsynth.yaml"

    result = runner.invoke(main, ["init", "--output", str(output)])

    assert result.exit_code == 0
    assert isinstance(Config.load(output), Config)


def test_init_keeps_existing_file_unless_confirmed(runner, tmp_path) -> None:
    output = tmp_path / "replsynth.yaml"
    output.write_text("gen:\n  seed: 5\n", encoding="utf-8")

    result = runner.invoke(main, ["init", "--output", str(output)], input="n\n")

    assert result.exit_code == 0
    assert Config.load(output).gen.seed == 5


def test_datagen_writes_dataset(runner, config_file, tmp_path) -> None:
    out_dir = tmp_path / "data"
    out_dir.mkdir()

    result = runner.invoke(main, ["datagen", "-c", str(config_file), "--out", str(out_dir)])

    assert result.exit_code == 0, result.output
    assert (out_dir / "manifest.json").exists()
    assert len((out_dir / "episodes.jsonl").read_text(encoding="utf-8").splitlines()) == 4


def test_datagen_into_missing_directory_is_a_runtime_failure(runner, config_file, tmp_path) -> None:
    result = runner.invoke(
        main, ["datagen", "-c", str(config_file), "--out", str(tmp_path / "missing")]
    )

    assert result.exit_code == RUNTIME_FAILURE
    assert "does not exist" in result.output


def test_synth_writes_results(runner, config_file, tasks_file, tmp_path) -> None:
    out_dir = tmp_path / "out"

    result = runner.invoke(
        main,
        [
            "synth",
            "-c",
            str(config_file),
            "--tasks",
            str(tasks_file),
            "--strategy",
            "beam",
            "--out",
            str(out_dir),
        ],
    )

    assert result.exit_code == 0, result.output
    payload = json.loads((out_dir / "csg2d-000.json").read_text(encoding="utf-8"))
    assert payload["strategy"] == "beam"
    assert payload["nodes_expanded"] <= MICRO_CONFIG["search"]["node_budget"]
    assert (out_dir / "csg2d-001.json").exists()


def test_synth_rejects_unknown_strategy(runner, config_file, tasks_file) -> None:
    result = runner.invoke(
        main,
        ["synth", "-c", str(config_file), "--tasks", str(tasks_file), "--strategy", "magic"],
    )

    assert result.exit_code == 2


def test_synth_unknown_task_id_is_a_runtime_failure(runner, config_file, tasks_file) -> None:
    result = runner.invoke(
        main,
        ["synth", "-c", str(config_file), "--tasks", str(tasks_file), "--task-id", "nope"],
    )

    assert result.exit_code == RUNTIME_FAILURE


def test_bench_writes_csv_and_plots(runner, config_file, tmp_path) -> None:
    out_dir = tmp_path / "bench"

    result = runner.invoke(main, ["bench", "-c", str(config_file), "--out", str(out_dir)])

    assert result.exit_code == 0, result.output
    rows = (out_dir / "bench.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "task_id,strategy,best_quality,solved,nodes_expanded"
    assert len(rows) == 1 + 2 * 2
    assert (out_dir / "solved_vs_nodes.svg").exists()


def test_demo_refuses_the_string_domain(runner, config_file) -> None:
    result = runner.invoke(main, ["demo", "-c", str(config_file), "--domain", "string"])

    assert result.exit_code == 2


def test_demo_renders_scenes(runner, config_file, tmp_path) -> None:
    out_dir = tmp_path / "demo"

    result = runner.invoke(
        main,
        ["demo", "-c", str(config_file), "--count", "2", "--max-shapes", "2", "--out", str(out_dir)],
    )

    assert result.exit_code == 0, result.output
    assert (out_dir / "scene-000.pgm").read_text(encoding="utf-8").startswith("P2\n16 16\n")
    assert (out_dir / "scene-001.txt").exists()


def test_train_then_synth_with_checkpoint(runner, config_file, tasks_file, tmp_path) -> None:
    checkpoint = tmp_path / "model.pt"
    log_path = tmp_path / "train.csv"

    trained = runner.invoke(
        main,
        ["train", "-c", str(config_file), "--out", str(checkpoint), "--log", str(log_path)],
    )
    searched = runner.invoke(
        main,
        [
            "synth",
            "-c",
            str(config_file),
            "--tasks",
            str(tasks_file),
            "--checkpoint",
            str(checkpoint),
            "--budget",
            "2",
        ],
    )

    assert trained.exit_code == 0, trained.output
    assert checkpoint.exists()
    assert log_path.read_text(encoding="utf-8").startswith("step,phase,loss,success_rate\n")
    assert searched.exit_code == 0, searched.output
    assert "budgets: [2]" in searched.output


def test_resume_on_another_grammar_is_a_runtime_failure(runner, config_file, tmp_path) -> None:
    checkpoint = tmp_path / "model.pt"
    runner.invoke(main, ["train", "-c", str(config_file), "--out", str(checkpoint)])

    result = runner.invoke(
        main,
        [
            "train",
            "-c",
            str(config_file),
            "--domain",
            "string",
            "--resume",
            str(checkpoint),
            "--out",
            str(tmp_path / "other.pt"),
        ],
    )

    assert result.exit_code == RUNTIME_FAILURE
