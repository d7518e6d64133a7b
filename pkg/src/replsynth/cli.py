"""Command-line interface for replsynth."""

from __future__ import annotations

import json
import logging
import sys
import time
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any, NoReturn

import click
import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from replsynth import __version__
from replsynth.bench import Agents, run_bench, summarize, write_plots, write_records
from replsynth.config import Config
from replsynth.csg import CsgDomain, to_pgm, voxels_to_text
from replsynth.datagen import (
    Task,
    build_dataset,
    episode_rng,
    generate_suite,
    load_tasks,
    make_domain,
    sample_episode,
)
from replsynth.learner import NeuralAgent, PolicyValueNet
from replsynth.manifest import EPISODES_NAME, MANIFEST_NAME, ManifestStore
from replsynth.mdp import Domain, SynthesisError, UniformPolicy
from replsynth.search import SearchResult
from replsynth.strategies import StrategyContext, get_strategy, solve
from replsynth.strings import NoMatch, StringDomain, eval_program
from replsynth.training import Trainer, load_checkpoint, value_diagnostics

console = Console()
logger = logging.getLogger(__name__)

RUNTIME_FAILURE = 3
DOMAINS = click.Choice(["csg2d", "csg3d", "string"])
TEST_MAX_OBJECTS = {"csg2d": 30, "csg3d": 20}


def setup_logging(level: str, log_file: str | None = None) -> None:
    """Set up logging configuration.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR)
        log_file: Optional log file path
    """
    handlers: list[logging.Handler] = [
        RichHandler(
            console=console,
            show_time=True,
            show_path=False,
            rich_tracebacks=True,
        )
    ]

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        handlers.append(file_handler)

    logging.basicConfig(
        level=getattr(logging, level.upper()),
        handlers=handlers,
        force=True,
    )


def _fail(message: Any) -> NoReturn:
    console.print(f"[red]Error:[/red] {message}")
    sys.exit(RUNTIME_FAILURE)


@contextmanager
def _runtime_errors() -> Iterator[None]:
    """Report runtime failures and exit with code 3."""
    try:
        yield
    except (SynthesisError, OSError, ValidationError) as e:
        logger.debug("Runtime failure", exc_info=True)
        _fail(e)


def _load_config(path: Path | None, domain: str | None, seed: int | None = None) -> Config:
    with _runtime_errors():
        cfg = Config.load(path).with_overrides("domain", name=domain)
        if seed is not None:
            cfg = cfg.with_overrides("gen", seed=seed)
    setup_logging(cfg.logging.level, cfg.logging.file)
    return cfg


def _domain(cfg: Config) -> Domain:
    return make_domain(cfg.domain, cfg.gen.max_objects)


def _load_net(path: Path | None, domain: Domain, *, repl: bool) -> PolicyValueNet | None:
    if path is None:
        return None
    net, _ = load_checkpoint(path, domain)
    if net.config.use_repl != repl:
        kind = "REPL" if repl else "no-REPL"
        raise SynthesisError(f"{path} is not a {kind} checkpoint")
    net.eval()
    return net


def _test_distribution(cfg: Config) -> Config:
    """Raise the object count to the held-out scene distribution."""
    limit = TEST_MAX_OBJECTS.get(cfg.domain.name)
    return cfg.with_overrides("gen", max_objects=limit) if limit else cfg


config_option = click.option(
    "--config",
    "-c",
    type=click.Path(exists=True, path_type=Path),
    help="Path to config file",
)
domain_option = click.option("--domain", type=DOMAINS, help="Language to synthesise in")
seed_option = click.option("--seed", type=int, help="Random seed")


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """replsynth - write, execute and assess programs to synthesise them."""
    pass


# -- datagen ----------------------------------------------------------------------------------


@main.command()
@config_option
@domain_option
@seed_option
@click.option(
    "--out",
    "-o",
    "out_dir",
    type=click.Path(path_type=Path),
    required=True,
    help="Existing directory for episodes.jsonl and manifest.json",
)
@click.option("--count", type=click.IntRange(min=1), help="Number of episodes")
@click.option("--max-objects", type=click.IntRange(min=1), help="Largest CSG scene")
@click.option("--exact-objects", is_flag=True, default=None, help="Always use --max-objects")
@click.option("--workers", type=click.IntRange(min=1), default=1, help="Worker processes")
def datagen(
    config: Path | None,
    domain: str | None,
    seed: int | None,
    out_dir: Path,
    count: int | None,
    max_objects: int | None,
    exact_objects: bool | None,
    workers: int,
) -> None:
    """Generate a dataset of ground-truth episodes."""
    cfg = _load_config(config, domain, seed)
    cfg = cfg.with_overrides(
        "gen", count=count, max_objects=max_objects, exact_objects=exact_objects
    )
    with _runtime_errors():
        dom = _domain(cfg)
        with console.status(f"Generating {cfg.gen.count} {dom.name} episodes..."):
            manifest = build_dataset(dom, cfg.gen, out_dir, workers=workers)

    table = Table(title="Dataset")
    table.add_column("Field")
    table.add_column("Value")
    table.add_row("domain", manifest.domain)
    table.add_row("count", str(manifest.count))
    table.add_row("seed", str(manifest.seed))
    table.add_row("fingerprint", manifest.fingerprint[:16])
    table.add_row("episodes", str(out_dir / manifest.episodes_file))
    console.print(table)


# -- train ------------------------------------------------------------------------------------


def _dataset_file(dataset: Path, domain: Domain) -> Path:
    if dataset.is_file():
        return dataset
    manifest = ManifestStore(dataset / MANIFEST_NAME).load()
    if manifest is None:
        logger.warning(f"No usable manifest in {dataset}; reading {EPISODES_NAME}")
        return dataset / EPISODES_NAME
    if manifest.fingerprint != domain.fingerprint():
        raise SynthesisError(
            f"Dataset {dataset} was generated for another grammar ({manifest.domain})"
        )
    return dataset / manifest.episodes_file


@main.command()
@config_option
@domain_option
@seed_option
@click.option(
    "--out",
    "-o",
    "checkpoint",
    type=click.Path(path_type=Path),
    default=Path("model.pt"),
    show_default=True,
    help="Checkpoint to write",
)
@click.option(
    "--dataset",
    type=click.Path(exists=True, path_type=Path),
    help="Dataset directory or episodes file (default: generate on the fly)",
)
@click.option("--resume", type=click.Path(exists=True, path_type=Path), help="Checkpoint to resume")
@click.option("--pretrain-steps", type=click.IntRange(min=0))
@click.option("--reinforce-steps", type=click.IntRange(min=0))
@click.option("--log", "log_path", type=click.Path(path_type=Path), help="CSV training log")
@click.option("--no-repl", is_flag=True, help="Train the no-REPL baseline network")
@click.option(
    "--diagnostics",
    type=click.IntRange(min=0),
    default=0,
    help="Specs to probe for value diagnostics after training",
)
def train(
    config: Path | None,
    domain: str | None,
    seed: int | None,
    checkpoint: Path,
    dataset: Path | None,
    resume: Path | None,
    pretrain_steps: int | None,
    reinforce_steps: int | None,
    log_path: Path | None,
    no_repl: bool,
    diagnostics: int,
) -> None:
    """Pretrain the policy on generated episodes, then fine-tune policy and value."""
    cfg = _load_config(config, domain)
    cfg = cfg.with_overrides(
        "training", pretrain_steps=pretrain_steps, reinforce_steps=reinforce_steps, seed=seed
    )
    if no_repl:
        cfg = cfg.with_overrides("model", use_repl=False)

    with _runtime_errors():
        dom = _domain(cfg)
        episodes = _dataset_file(dataset, dom) if dataset is not None else None
        if resume is not None:
            trainer = Trainer.resume(resume, dom, cfg, dataset=episodes, log_path=log_path)
        else:
            trainer = Trainer(dom, cfg, dataset=episodes, log_path=log_path)

        console.print(
            f"[green]Training {dom.name}[/green] "
            f"({cfg.training.pretrain_steps} pretrain + {cfg.training.reinforce_steps} "
            f"REINFORCE steps, starting at step {trainer.step})"
        )
        trainer.run(checkpoint)
        console.print(f"[green]Saved checkpoint:[/green] {checkpoint}")

        if diagnostics:
            rng = np.random.default_rng([cfg.training.seed, 0xD1A6])
            specs = [
                sample_episode(dom, cfg.gen, episode_rng(cfg.gen.seed + 2, i)).spec
                for i in range(diagnostics)
            ]
            report = value_diagnostics(trainer.net, specs, rng)
            console.print(
                f"Value diagnostics over {int(report['states'])} states: "
                f"Spearman rho={report['spearman']:.3f}, AUC={report['auc']:.3f}"
            )


# -- synth / norepl ---------------------------------------------------------------------------


def _render_output(domain: Domain, task: Task, program: str) -> tuple[str, str] | None:
    """Rendered artefact of a printed program: (file suffix, contents)."""
    if not program:
        return None
    if isinstance(domain, CsgDomain):
        grid = domain.render(domain.parse_program(program))
        if domain.dimension == 2:
            return ".pgm", to_pgm(grid)
        return ".vox", voxels_to_text(grid)
    assert isinstance(domain, StringDomain)
    parsed = domain.parse_program(program)
    lines = []
    for text, expected in tuple(task.spec.examples) + tuple(task.spec.test):
        try:
            produced = eval_program(parsed, text)
        except NoMatch:
            produced = "<no match>"
        lines.append(f"{text}\t{expected}\t{produced}")
    return ".txt", "\n".join(lines) + "\n"


def _report(task: Task, result: SearchResult, seconds: float) -> None:
    status = "[green]solved[/green]" if result.solved else "[yellow]unsolved[/yellow]"
    console.print(f"[bold]{task.id}[/bold] {status}")
    console.print(f"  program: {result.best_program or '(empty)'}")
    console.print(
        f"  quality: {result.best_quality:.4f}  nodes: {result.nodes_expanded}  "
        f"time: {seconds:.2f}s  budgets: {result.budgets}"
    )


def _synthesize(
    cfg: Config,
    tasks_file: Path,
    task_id: str | None,
    checkpoint: Path | None,
    strategy_name: str,
    out_dir: Path | None,
) -> None:
    try:
        strategy = get_strategy(strategy_name)
    except KeyError as e:
        raise click.BadParameter(str(e.args[0]), param_hint="--strategy") from e

    with _runtime_errors():
        dom = _domain(cfg)
        tasks = load_tasks(dom, tasks_file)
        if task_id is not None:
            tasks = [t for t in tasks if t.id == task_id]
            if not tasks:
                raise SynthesisError(f"No task {task_id!r} in {tasks_file}")
        net = _load_net(checkpoint, dom, repl=strategy.name != "norepl")
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

        search = cfg.search
        for index, task in enumerate(tasks):
            if net is None:
                policy, value = UniformPolicy(dom), None
            else:
                agent = NeuralAgent(net, search.batch_size)
                policy, value = agent.policy, agent.value
            context = StrategyContext(dom, task.spec, policy, value, search.top_m)
            rng = np.random.default_rng([search.seed, index])
            started = time.monotonic()
            result = solve(
                strategy, context, search.timeout, rng, search.node_budget, search.budget
            )
            _report(task, result, time.monotonic() - started)

            if out_dir is not None:
                payload = {"task_id": task.id, "strategy": strategy.name, **result.to_dict()}
                (out_dir / f"{task.id}.json").write_text(json.dumps(payload, indent=2) + "\n")
                rendered = _render_output(dom, task, result.best_program or "")
                if rendered is not None:
                    suffix, text = rendered
                    (out_dir / f"{task.id}{suffix}").write_text(text)


def _search_options(func: Any) -> Any:
    options = [
        config_option,
        domain_option,
        seed_option,
        click.option(
            "--tasks",
            "tasks_file",
            type=click.Path(exists=True, path_type=Path),
            required=True,
            help="YAML task file",
        ),
        click.option("--task-id", help="Only run this task"),
        click.option(
            "--checkpoint",
            type=click.Path(exists=True, path_type=Path),
            help="Trained network (default: uniform policy)",
        ),
        click.option("--budget", type=click.IntRange(min=1), help="Fixed budget (no doubling)"),
        click.option("--timeout", type=click.FloatRange(min=0, min_open=True), help="Seconds"),
        click.option("--node-budget", type=click.IntRange(min=1), help="Maximum REPL executions"),
        click.option("--out", "-o", "out_dir", type=click.Path(path_type=Path), help="Output dir"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@main.command()
@_search_options
@click.option("--strategy", "-s", help="smc, beam, beam-novalue, rollout, astar or norepl")
def synth(
    config: Path | None,
    domain: str | None,
    seed: int | None,
    tasks_file: Path,
    task_id: str | None,
    checkpoint: Path | None,
    budget: int | None,
    timeout: float | None,
    node_budget: int | None,
    out_dir: Path | None,
    strategy: str | None,
) -> None:
    """Synthesise programs for the tasks in a task file."""
    cfg = _load_config(config, domain)
    cfg = cfg.with_overrides(
        "search",
        strategy=strategy,
        budget=budget,
        timeout=timeout,
        node_budget=node_budget,
        seed=seed,
    )
    _synthesize(cfg, tasks_file, task_id, checkpoint, cfg.search.strategy, out_dir)


@main.command()
@_search_options
def norepl(
    config: Path | None,
    domain: str | None,
    seed: int | None,
    tasks_file: Path,
    task_id: str | None,
    checkpoint: Path | None,
    budget: int | None,
    timeout: float | None,
    node_budget: int | None,
    out_dir: Path | None,
) -> None:
    """Decode programs without executing partial programs (baseline)."""
    cfg = _load_config(config, domain)
    cfg = cfg.with_overrides(
        "search", budget=budget, timeout=timeout, node_budget=node_budget, seed=seed
    )
    _synthesize(cfg, tasks_file, task_id, checkpoint, "norepl", out_dir)


# -- bench ------------------------------------------------------------------------------------


@main.command()
@config_option
@domain_option
@seed_option
@click.option("--tasks", "tasks_file", type=click.Path(exists=True, path_type=Path))
@click.option("--count", type=click.IntRange(min=1), help="Generated suite size (no --tasks)")
@click.option("--test-distribution", is_flag=True, help="Generate larger held-out scenes")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path))
@click.option("--norepl-checkpoint", type=click.Path(exists=True, path_type=Path))
@click.option("--strategies", help="Comma-separated strategy names")
@click.option("--timeout", type=click.FloatRange(min=0, min_open=True), help="Seconds per task")
@click.option("--node-budget", type=click.IntRange(min=1))
@click.option("--workers", type=click.IntRange(min=1))
@click.option(
    "--out",
    "-o",
    "out_dir",
    type=click.Path(path_type=Path),
    default=Path("bench"),
    show_default=True,
)
def bench(
    config: Path | None,
    domain: str | None,
    seed: int | None,
    tasks_file: Path | None,
    count: int | None,
    test_distribution: bool,
    checkpoint: Path | None,
    norepl_checkpoint: Path | None,
    strategies: str | None,
    timeout: float | None,
    node_budget: int | None,
    workers: int | None,
    out_dir: Path,
) -> None:
    """Run every strategy on a task suite; write CSVs and plots."""
    cfg = _load_config(config, domain)
    names = [s.strip() for s in strategies.split(",") if s.strip()] if strategies else None
    cfg = cfg.with_overrides(
        "bench",
        strategies=names,
        tasks=count,
        timeout=timeout,
        node_budget=node_budget,
        workers=workers,
        seed=seed,
    )
    for name in cfg.bench.strategies:
        try:
            get_strategy(name)
        except KeyError as e:
            raise click.BadParameter(str(e.args[0]), param_hint="--strategies") from e

    with _runtime_errors():
        dom = _domain(cfg)
        if tasks_file is not None:
            tasks = load_tasks(dom, tasks_file)
        else:
            suite_cfg = _test_distribution(cfg) if test_distribution else cfg
            if test_distribution:
                dom = _domain(suite_cfg)
            tasks = generate_suite(dom, suite_cfg.gen, cfg.bench.tasks, cfg.bench.seed)
        agents = Agents(
            repl=_load_net(checkpoint, dom, repl=True),
            norepl=_load_net(norepl_checkpoint, dom, repl=False),
        )

        total = len(tasks) * len(cfg.bench.strategies)
        with console.status(f"Running {total} searches...") as status:
            done = 0

            def tick(record: Any) -> None:
                nonlocal done
                done += 1
                status.update(f"{done}/{total} searches ({record.strategy} on {record.task_id})")

            records = run_bench(dom, tasks, agents, cfg.bench, cfg.search.top_m, progress=tick)
        bench_path, _ = write_records(records, out_dir)
        write_plots(records, out_dir)

    table = Table(title=f"Benchmark ({len(tasks)} tasks)")
    table.add_column("Strategy")
    table.add_column("Solved", justify="right")
    table.add_column("Rate", justify="right")
    table.add_column("Mean nodes", justify="right")
    for name, entry in summarize(records).items():
        table.add_row(
            name,
            f"{int(entry['solved'])}/{int(entry['tasks'])}",
            f"{entry['rate']:.1%}",
            f"{entry['mean_nodes']:.1f}",
        )
    console.print(table)
    failures = sum(1 for r in records if r.error)
    if failures:
        console.print(f"[yellow]{failures} searches failed; see the log[/yellow]")
    console.print(f"[green]Wrote[/green] {bench_path}")


# -- demo -------------------------------------------------------------------------------------


@main.command()
@config_option
@domain_option
@seed_option
@click.option("--max-shapes", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--count", type=click.IntRange(min=1), default=5, show_default=True)
@click.option(
    "--out", "-o", "out_dir", type=click.Path(path_type=Path), default=Path("demo"), show_default=True
)
def demo(
    config: Path | None,
    domain: str | None,
    seed: int | None,
    max_shapes: int,
    count: int,
    out_dir: Path,
) -> None:
    """Render random pruned scenes with their programs."""
    cfg = _load_config(config, domain, seed)
    if cfg.domain.name == "string":
        raise click.UsageError("demo renders CSG scenes; use --domain csg2d or csg3d")
    cfg = cfg.with_overrides("gen", max_objects=max_shapes)

    with _runtime_errors():
        dom = _domain(cfg)
        assert isinstance(dom, CsgDomain)
        out_dir.mkdir(parents=True, exist_ok=True)
        for index in range(count):
            episode = sample_episode(dom, cfg.gen, episode_rng(cfg.gen.seed, index))
            grid = dom.render(episode.program)
            stem = out_dir / f"scene-{index:03d}"
            if dom.dimension == 2:
                stem.with_suffix(".pgm").write_text(to_pgm(grid))
            else:
                stem.with_suffix(".vox").write_text(voxels_to_text(grid))
            stem.with_suffix(".txt").write_text(dom.format_program(episode.program) + "\n")
            console.print(
                f"scene-{index:03d}: {len(episode.actions)} actions, "
                f"{int(grid.sum())} occupied cells"
            )
    console.print(f"[green]Wrote {count} scenes to[/green] {out_dir}")


# -- init / version ---------------------------------------------------------------------------


@main.command()
@click.option(
    "--output",
    "-o",
    type=click.Path(path_type=Path),
    default=Path("replsynth.yaml"),
    help="Output path for config file",
)
def init(output: Path) -> None:
    """Initialize a new configuration file."""
    if output.exists():
        if not click.confirm(f"{output} already exists. Overwrite?"):
            return

    example_path = Path(__file__).parent.parent.parent / "config.example.yaml"
    if example_path.exists():
        output.write_text(example_path.read_text())
    else:
        Config().save(output)
    console.print(f"[green]Created config file:[/green] {output}")
    console.print("\nGenerate data and train with:")
    console.print("  replsynth datagen --out data && replsynth train --dataset data")


@main.command()
def version() -> None:
    """Show version information."""
    console.print(f"replsynth v{__version__}")


if __name__ == "__main__":
    main()
