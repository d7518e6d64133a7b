"""Tests for the benchmark harness and its outputs."""

from __future__ import annotations

import math

import numpy as np
import pytest

from replsynth.bench import (
    Agents,
    BenchRecord,
    quality_curve,
    read_records,
    run_bench,
    solved_curve,
    summarize,
    task_rng,
    write_plots,
    write_records,
)
from replsynth.config import BenchConfig, GenConfig
from replsynth.datagen import generate_suite
from replsynth.mdp import SynthesisError
from tests.helpers import make_micro_domain


def micro_tasks(count: int = 2):
    return generate_suite(make_micro_domain(), GenConfig(max_objects=2), count, seed=0)


def make_records() -> list[BenchRecord]:
    return [
        BenchRecord("t0", "smc", 1.0, True, 12, 0.5, trace=[(0.1, 0.4), (0.3, 1.0)]),
        BenchRecord("t1", "smc", 0.5, False, 30, 1.0, trace=[(0.2, 0.5)]),
        BenchRecord("t0", "beam", 1.0, True, 4, 0.1, trace=[(0.05, 1.0)]),
        BenchRecord("t1", "beam", -math.inf, False, 0, 0.0, error="boom"),
    ]


def test_run_bench_orders_by_strategy_then_task() -> None:
    tasks = micro_tasks()
    config = BenchConfig(strategies=["smc", "rollout"], node_budget=20, timeout=10)

    records = run_bench(make_micro_domain(), tasks, Agents(), config)

    assert [(r.strategy, r.task_id) for r in records] == [
        ("smc", tasks[0].id),
        ("smc", tasks[1].id),
        ("rollout", tasks[0].id),
        ("rollout", tasks[1].id),
    ]
    assert all(r.nodes_expanded <= 20 for r in records)


def test_run_bench_is_deterministic() -> None:
    tasks = micro_tasks()
    config = BenchConfig(strategies=["smc", "beam"], node_budget=25, timeout=10)

    first = run_bench(make_micro_domain(), tasks, Agents(), config)
    second = run_bench(make_micro_domain(), tasks, Agents(), config)

    assert [r.row() for r in first] == [r.row() for r in second]


def test_run_bench_with_workers_matches_serial() -> None:
    tasks = micro_tasks()
    serial = BenchConfig(strategies=["smc", "beam"], node_budget=25, timeout=10)
    threaded = serial.model_copy(update={"workers": 3})

    first = run_bench(make_micro_domain(), tasks, Agents(), serial)
    second = run_bench(make_micro_domain(), tasks, Agents(), threaded)

    assert [r.row() for r in first] == [r.row() for r in second]


def test_search_failures_become_records(monkeypatch) -> None:
    def explode(*args, **kwargs):
        raise SynthesisError("REPL crashed")

    monkeypatch.setattr("replsynth.bench.solve", explode)

    records = run_bench(
        make_micro_domain(), micro_tasks(1), Agents(), BenchConfig(strategies=["beam"])
    )

    assert records[0].error == "REPL crashed"
    assert not records[0].solved
    assert records[0].row()["best_quality"] == ""


def test_unknown_strategy_is_rejected() -> None:
    with pytest.raises(KeyError):
        run_bench(make_micro_domain(), micro_tasks(1), Agents(), BenchConfig(strategies=["nope"]))


def test_records_round_trip_through_csv(tmp_path) -> None:
    bench_path, timing_path = write_records(make_records(), tmp_path)

    loaded = read_records(bench_path)

    assert bench_path.read_text(encoding="utf-8").splitlines()[:2] == [
        "task_id,strategy,best_quality,solved,nodes_expanded",
        "t0,smc,1.000000,1,12",
    ]
    assert [(r.task_id, r.strategy, r.solved, r.nodes_expanded) for r in loaded] == [
        (r.task_id, r.strategy, r.solved, r.nodes_expanded) for r in make_records()
    ]
    assert loaded[3].best_quality == -math.inf
    assert "wall_seconds" in timing_path.read_text(encoding="utf-8")


def test_solved_curve_is_nondecreasing() -> None:
    records = make_records()

    curve = solved_curve(records, [1, 4, 11, 12, 100])

    assert curve == [0, 1, 1, 2, 2]


def test_quality_curve_uses_best_so_far() -> None:
    smc_records = make_records()[:2]

    curve = quality_curve(smc_records, [0.0, 0.15, 0.25, 1.0])

    assert math.isnan(curve[0])
    assert curve[1:] == pytest.approx([0.4, 0.45, 0.75])


def test_summarize_reports_rates() -> None:
    summary = summarize(make_records())

    assert list(summary) == ["smc", "beam"]
    assert summary["smc"]["rate"] == pytest.approx(0.5)
    assert summary["beam"]["mean_nodes"] == pytest.approx(2.0)


def test_plots_are_byte_stable(tmp_path) -> None:
    first = write_plots(make_records(), tmp_path / "a")
    second = write_plots(make_records(), tmp_path / "b")

    assert [p.name for p in first] == ["quality_vs_time.svg", "solved_vs_nodes.svg"]
    for a, b in zip(first, second, strict=True):
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes().lstrip().startswith(b"<?xml")


def test_bench_streams_are_independent() -> None:
    a = task_rng(0, 1, 0).random()
    b = task_rng(0, 0, 1).random()

    assert a != b
    assert task_rng(0, 1, 0).random() == pytest.approx(a)
    assert isinstance(task_rng(0, 0, 0), np.random.Generator)
