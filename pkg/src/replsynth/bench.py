"""Benchmark harness: every strategy on every task, CSV records and SVG plots."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from replsynth.config import BenchConfig
from replsynth.datagen import Task
from replsynth.learner import NeuralAgent, PolicyValueNet
from replsynth.mdp import Domain, SynthesisError, UniformPolicy
from replsynth.strategies import Strategy, StrategyContext, get_strategy, solve

logger = logging.getLogger(__name__)

BENCH_FIELDS = ["task_id", "strategy", "best_quality", "solved", "nodes_expanded"]
TIMING_FIELDS = ["task_id", "strategy", "wall_seconds", "trace"]


@dataclass
class BenchRecord:
    """Outcome of one strategy on one task."""

    task_id: str
    strategy: str
    best_quality: float
    solved: bool
    nodes_expanded: int
    wall_seconds: float
    trace: list[tuple[float, float]] = field(default_factory=list)
    error: str | None = None

    def row(self) -> dict[str, Any]:
        quality = "" if math.isinf(self.best_quality) else f"{self.best_quality:.6f}"
        return {
            "task_id": self.task_id,
            "strategy": self.strategy,
            "best_quality": quality,
            "solved": int(self.solved),
            "nodes_expanded": self.nodes_expanded,
        }

    def timing_row(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "strategy": self.strategy,
            "wall_seconds": f"{self.wall_seconds:.4f}",
            "trace": json.dumps([[round(t, 4), q] for t, q in self.trace]),
        }


@dataclass
class Agents:
    """Networks available to the harness; missing ones fall back to a uniform policy."""

    repl: PolicyValueNet | None = None
    norepl: PolicyValueNet | None = None

    def context(self, domain: Domain, spec: Any, strategy: Strategy, top_m: int) -> StrategyContext:
        net = self.norepl if strategy.name == "norepl" else self.repl
        if net is None:
            return StrategyContext(domain, spec, UniformPolicy(domain), None, top_m)
        agent = NeuralAgent(net)
        value = agent.value if strategy.uses_value else None
        return StrategyContext(domain, spec, agent.policy, value, top_m)


def task_rng(seed: int, task_index: int, strategy_index: int) -> np.random.Generator:
    """Independent stream per (task, strategy) pair."""
    return np.random.default_rng([seed, task_index, strategy_index])


def run_one(
    domain: Domain,
    task: Task,
    strategy: Strategy,
    agents: Agents,
    config: BenchConfig,
    rng: np.random.Generator,
    top_m: int = 16,
) -> BenchRecord:
    """Run one strategy on one task; failures become a record with ``error`` set."""
    started = time.monotonic()
    try:
        context = agents.context(domain, task.spec, strategy, top_m)
        result = solve(strategy, context, config.timeout, rng, node_budget=config.node_budget)
    except SynthesisError as exc:
        logger.warning(f"Task {task.id} failed under {strategy.name}: {exc}")
        return BenchRecord(
            task.id, strategy.name, -math.inf, False, 0, time.monotonic() - started, error=str(exc)
        )
    return BenchRecord(
        task_id=task.id,
        strategy=strategy.name,
        best_quality=result.best_quality,
        solved=result.solved,
        nodes_expanded=result.nodes_expanded,
        wall_seconds=time.monotonic() - started,
        trace=list(result.trace),
    )


def run_bench(
    domain: Domain,
    tasks: Sequence[Task],
    agents: Agents,
    config: BenchConfig,
    top_m: int = 16,
    progress: Callable[[BenchRecord], None] | None = None,
) -> list[BenchRecord]:
    """Every configured strategy on every task, in (strategy, task) order.

    Raises:
        KeyError: If a configured strategy name is unknown
    """
    strategies = [get_strategy(name) for name in config.strategies]
    for net in (agents.repl, agents.norepl):
        if net is not None:
            net.eval()
    jobs = [
        (task, strategy, task_rng(config.seed, t, s))
        for s, strategy in enumerate(strategies)
        for t, task in enumerate(tasks)
    ]

    def work(job: tuple[Task, Strategy, np.random.Generator]) -> BenchRecord:
        task, strategy, rng = job
        return run_one(domain, task, strategy, agents, config, rng, top_m)

    records: list[BenchRecord] = []
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for record in pool.map(work, jobs):
                records.append(record)
                if progress is not None:
                    progress(record)
    else:
        for job in jobs:
            record = work(job)
            records.append(record)
            if progress is not None:
                progress(record)
    return records


def summarize(records: Sequence[BenchRecord]) -> dict[str, dict[str, float]]:
    """Solve rate and mean nodes per strategy, in first-seen order."""
    summary: dict[str, dict[str, float]] = {}
    for record in records:
        entry = summary.setdefault(record.strategy, {"tasks": 0, "solved": 0, "nodes": 0})
        entry["tasks"] += 1
        entry["solved"] += int(record.solved)
        entry["nodes"] += record.nodes_expanded
    for entry in summary.values():
        entry["rate"] = entry["solved"] / entry["tasks"]
        entry["mean_nodes"] = entry["nodes"] / entry["tasks"]
    return summary


# -- output ----------------------------------------------------------------------------------


def write_records(records: Sequence[BenchRecord], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``bench.csv`` (deterministic columns) and ``bench_timing.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bench_path = out_dir / "bench.csv"
    timing_path = out_dir / "bench_timing.csv"
    with bench_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=BENCH_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(r.row() for r in records)
    with timing_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TIMING_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(r.timing_row() for r in records)
    return bench_path, timing_path


def read_records(path: str | Path) -> list[BenchRecord]:
    """Read ``bench.csv`` back; timing fields are left empty."""
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return [
            BenchRecord(
                task_id=row["task_id"],
                strategy=row["strategy"],
                best_quality=float(row["best_quality"]) if row["best_quality"] else -math.inf,
                solved=row["solved"] == "1",
                nodes_expanded=int(row["nodes_expanded"]),
                wall_seconds=0.0,
            )
            for row in csv.DictReader(handle)
        ]


def solved_curve(records: Sequence[BenchRecord], budgets: Sequence[int]) -> list[int]:
    """Number of tasks solved within each node budget (nondecreasing in the budget)."""
    nodes = sorted(r.nodes_expanded for r in records if r.solved)
    return [int(np.searchsorted(nodes, b, side="right")) for b in budgets]


def quality_curve(records: Sequence[BenchRecord], times: Sequence[float]) -> list[float]:
    """Mean best-so-far quality at each time, over tasks that have a quality by then."""
    curve = []
    for t in times:
        values = []
        for record in records:
            reached = [q for s, q in record.trace if s <= t]
            if reached:
                values.append(reached[-1])
        curve.append(float(np.mean(values)) if values else math.nan)
    return curve


def _by_strategy(records: Sequence[BenchRecord]) -> dict[str, list[BenchRecord]]:
    grouped: dict[str, list[BenchRecord]] = {}
    for record in records:
        grouped.setdefault(record.strategy, []).append(record)
    return grouped


def write_plots(records: Sequence[BenchRecord], out_dir: str | Path) -> list[Path]:
    """Quality-vs-time and solved-vs-nodes (log node axis) as SVG files."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams.update({"svg.hashsalt": "replsynth", "axes.unicode_minus": False})
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grouped = _by_strategy(records)
    paths = []

    horizon = max((s for r in records for s, _ in r.trace), default=1.0) or 1.0
    times = np.linspace(0.0, horizon, 100)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    for name, rows in grouped.items():
        ax.plot(times, quality_curve(rows, list(times)), label=name)
    ax.set_xlabel("Seconds")
    ax.set_ylabel("Mean best quality")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    path = out_dir / "quality_vs_time.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    paths.append(path)

    top = max((r.nodes_expanded for r in records), default=1)
    budgets = sorted({int(b) for b in np.geomspace(1, max(top, 2), 60)})
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    for name, rows in grouped.items():
        ax.step(budgets, solved_curve(rows, budgets), where="post", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("Nodes expanded")
    ax.set_ylabel("Tasks solved")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    path = out_dir / "solved_vs_nodes.svg"
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    paths.append(path)
    return paths
