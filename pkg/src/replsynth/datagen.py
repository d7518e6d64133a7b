"""Synthetic training data and evaluation suites.

Random programs are sampled from a domain grammar, CSG trees are pruned of
subtrees that do not change the render, and each program is linearised into
the canonical action sequence that rebuilds it through the MDP.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from replsynth.config import DomainConfig, GenConfig, config_digest
from replsynth.csg import CsgDomain, CsgExpr, Difference, Union, from_pgm, is_combinator
from replsynth.manifest import EPISODES_NAME, MANIFEST_NAME, DatasetManifest, ManifestStore
from replsynth.mdp import (
    Action,
    Domain,
    SynthesisError,
    SynthState,
    Trajectory,
    dump_record,
    replay,
    trajectory_record,
)
from replsynth.strings import StringDomain, StringSpec, eval_program

logger = logging.getLogger(__name__)


class IoFailure(SynthesisError):
    """Dataset or task files could not be written or read."""


def make_domain(config: DomainConfig, max_objects: int = 13) -> Domain:
    """Instantiate the domain a config section names."""
    if config.name == "string":
        return StringDomain.from_config(config)
    return CsgDomain.from_config(config, max_objects=max_objects)


@dataclass
class Episode:
    """A solved ground-truth rollout used for pretraining."""

    spec: Any
    actions: list[Action]
    states: list[SynthState]
    program: Any = None
    reward: int = 1

    def to_trajectory(self) -> Trajectory:
        return Trajectory(states=self.states, actions=self.actions, reward=self.reward)


# -- sampling -------------------------------------------------------------------------


def sample_program(domain: Domain, config: GenConfig, rng: np.random.Generator) -> Any:
    """Random grammar-valid program (CSG: exact sampled object count, before pruning)."""
    return domain.sample_program(config, rng)


def _replacements(expr: CsgExpr) -> Iterator[CsgExpr]:
    """Every tree obtained by replacing one combinator node with one of its children."""
    if not is_combinator(expr):
        return
    yield expr.left
    yield expr.right
    rebuild = Union if isinstance(expr, Union) else Difference
    for left in _replacements(expr.left):
        yield rebuild(left, expr.right)
    for right in _replacements(expr.right):
        yield rebuild(expr.left, right)


def prune_dead_subtrees(program: CsgExpr, domain: CsgDomain) -> CsgExpr:
    """Delete subtrees that do not affect the final render, to a fixpoint.

    Candidates are tried in pre-order, left child first; the renderer at the
    domain's resolution is the only oracle.
    """
    target = domain.render(program)
    changed = True
    while changed:
        changed = False
        for candidate in _replacements(program):
            if np.array_equal(domain.render(candidate), target):
                program = candidate
                changed = True
                break
    return program


def recover_actions(domain: Domain, program: Any, spec: Any) -> Episode:
    """Canonical action sequence for `program`, replayed to collect every intermediate scope."""
    actions = domain.recover_actions(program)
    trajectory = replay(domain, spec, actions)
    return Episode(
        spec=spec,
        actions=actions,
        states=trajectory.states,
        program=program,
        reward=trajectory.reward,
    )


def sample_episode(
    domain: Domain, config: GenConfig, rng: np.random.Generator, max_attempts: int = 1000
) -> Episode:
    """Sample until a program yields an acceptable spec, then linearise it.

    Raises:
        SynthesisError: If no acceptable sample was found within `max_attempts`
    """
    for _ in range(max_attempts):
        program = sample_program(domain, config, rng)
        if isinstance(domain, CsgDomain):
            program = prune_dead_subtrees(program, domain)
        spec = domain.make_spec(program, config, rng)
        if spec is None:
            continue
        episode = recover_actions(domain, program, spec)
        if len(episode.actions) > domain.horizon:
            continue
        return episode
    raise SynthesisError(f"No acceptable {domain.name} sample in {max_attempts} attempts")


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Per-episode stream, independent of how episodes are distributed over workers."""
    return np.random.default_rng([seed, index])


def _episode_line(job: tuple[Domain, GenConfig, int]) -> str:
    domain, config, index = job
    episode = sample_episode(domain, config, episode_rng(config.seed, index))
    return dump_record(trajectory_record(domain, episode.to_trajectory()))


def build_dataset(
    domain: Domain,
    config: GenConfig,
    out_dir: str | Path,
    count: int | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Stream episodes to ``episodes.jsonl`` and write ``manifest.json``.

    Output bytes depend only on the domain, `config` and `count`.

    Raises:
        IoFailure: If `out_dir` is missing or not writable
    """
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise IoFailure(f"Output directory does not exist: {out_dir}")
    count = count if count is not None else config.count
    jobs = ((domain, config, index) for index in range(count))

    try:
        with (out_dir / EPISODES_NAME).open("w", encoding="utf-8") as handle:
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    lines = pool.map(_episode_line, jobs, chunksize=16)
                    for line in lines:
                        handle.write(line + "\n")
            else:
                for line in map(_episode_line, jobs):
                    handle.write(line + "\n")

        manifest = DatasetManifest(
            domain=domain.name,
            count=count,
            seed=config.seed,
            config_digest=config_digest(config),
            fingerprint=domain.fingerprint(),
        )
        ManifestStore(out_dir / MANIFEST_NAME).save(manifest)
    except OSError as exc:
        raise IoFailure(f"Failed to write dataset to {out_dir}: {exc}") from exc

    logger.info(f"Wrote {count} {domain.name} episodes to {out_dir}")
    return manifest


def episode_stream(
    domain: Domain, config: GenConfig, seed: int | None = None
) -> Iterator[Episode]:
    """Endless on-the-fly episode stream for training without a stored dataset."""
    seed = config.seed if seed is None else seed
    index = 0
    while True:
        yield sample_episode(domain, config, episode_rng(seed, index))
        index += 1


# -- evaluation tasks -----------------------------------------------------------------------


@dataclass
class Task:
    """One evaluation problem; `witness` is a program known to solve it."""

    id: str
    spec: Any
    witness: str | None = None
    template: str | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def _digits(rng: np.random.Generator, n: int) -> str:
    return "".join(str(int(d)) for d in rng.integers(0, 10, size=n))


def _choice(rng: np.random.Generator, values: list[str]) -> str:
    return values[int(rng.integers(len(values)))]


_MONTHS = ["January", "February", "March", "April", "May", "June", "July", "August"]
_GIVEN = ["Mary", "Jane", "John", "Alan", "Grace", "Ada", "Edsger", "Barbara", "Ken"]
_FAMILY = ["Lennon", "Turing", "Hopper", "Lovelace", "Dijkstra", "Liskov", "Thompson"]
_HONORIFICS = ["Dr", "Mr", "Mrs", "Ms", "Prof"]
_STREETS = ["Evergreen Terrace", "Elm Street", "Oak Avenue", "Maple Drive", "Pine Road"]
_CITIES = ["Springfield", "Shelbyville", "Portland", "Boston", "Austin", "Denver"]
_STATES = ["OR", "MA", "TX", "CO", "IL", "NY"]
_TITLES = ["Inception", "Alien", "Heat", "Vertigo", "Jaws", "Amelie", "Casablanca"]


def _date_slash(rng: np.random.Generator) -> str:
    return f"{int(rng.integers(1, 13))}/{int(rng.integers(1, 29))}/{int(rng.integers(1950, 2024))}"


def _date_iso(rng: np.random.Generator) -> str:
    return (
        f"{int(rng.integers(1950, 2024))}-{int(rng.integers(1, 13)):02d}"
        f"-{int(rng.integers(1, 29)):02d}"
    )


def _name(rng: np.random.Generator) -> str:
    given = " ".join(_choice(rng, _GIVEN) for _ in range(int(rng.integers(1, 3))))
    gap = "  " if rng.random() < 0.3 else " "
    return f"{_choice(rng, _HONORIFICS)} {given}{gap}{_choice(rng, _FAMILY)}"


def _phone_area(rng: np.random.Generator) -> str:
    return f"({_digits(rng, 3)}) {_digits(rng, 3)} {_digits(rng, 4)}"


def _phone_cell(rng: np.random.Generator) -> str:
    kind = _choice(rng, ["cell", "home"])
    return f"{kind}: {_digits(rng, 3)}-{_digits(rng, 3)}-{_digits(rng, 4)}"


def _time(rng: np.random.Generator) -> str:
    return (
        f"{_choice(rng, _MONTHS)} {int(rng.integers(1, 29))}, "
        f"{int(rng.integers(1, 13))}:{int(rng.integers(0, 60)):02d} PM"
    )


def _address(rng: np.random.Generator) -> str:
    return (
        f"{int(rng.integers(1, 999))} {_choice(rng, _STREETS)}, {_choice(rng, _CITIES)}, "
        f"{_choice(rng, _STATES)} {_digits(rng, 5)}"
    )


def _movie(rng: np.random.Generator) -> str:
    return f"{_choice(rng, _TITLES)} ({int(rng.integers(1950, 2024))}) - {int(rng.integers(1, 11))}/10"


def _consts(text: str) -> str:
    return ", ".join(f"Const({c}), Commit" for c in text)


STRING_TEMPLATES: dict[str, tuple[Callable[[np.random.Generator], str], str]] = {
    "date": (
        _date_slash,
        f"{_consts('date: ')}, Replace1(/), Replace2( ), GetToken1(Number), GetToken2(1), Commit, "
        f"{_consts(' mo: ')}, GetUpTo(Number), Commit, {_consts(' year: ')}, GetFrom(/), Commit",
    ),
    "date-iso": (
        _date_iso,
        "GetToken1(Number), GetToken2(1), Commit, Const(/), Commit, GetToken1(Number), "
        "GetToken2(2), Commit, Const(/), Commit, GetToken1(Number), GetToken2(0), Commit",
    ),
    "name": (
        _name,
        f"GetToken1(Word), GetToken2(-1), Commit, {_consts(', ')}, Span1(Word), Span2(1), "
        f"Span3(Start), Span4(Word), Span5(-2), Span6(End), Commit, {_consts(' (')}, "
        "GetToken1(Word), GetToken2(0), Commit, Const()), Commit",
    ),
    "phone-area": (
        _phone_area,
        f"{_consts('area code: ')}, GetFirst1(Number), GetFirst2(0), Commit, {_consts(', num: ')}, "
        "GetFrom()), GetFirst1(Number), GetFirst2(2), Commit",
    ),
    "phone-cell": (
        _phone_cell,
        "Const((), Commit, ToCase(Proper), GetFirst1(Number), GetFirst2(1), GetFirst1(Char), "
        "GetFirst2(2), Commit, Const()), Commit, Const( ), Commit, GetFirst1(Number), "
        "GetFirst2(5), GetFirst1(Char), GetFirst2(-2), GetToken1(Char), GetToken2(3), Commit, "
        "SubStr1(-16), SubStr2(17), GetFirst1(Number), GetFirst2(4), GetToken1(Char), "
        "GetToken2(-5), Commit, GetFirst1(Number), GetFirst2(5), GetToken1(Char), "
        "GetToken2(-5), Commit, GetToken1(Number), GetToken2(2), Commit, Const( ), Commit, "
        "Const((), Commit, GetUpTo(-), GetUpTo(Word), Commit, Const()), Commit",
    ),
    "time": (
        _time,
        f"GetUpTo( ), Commit, GetFirst1(Number), GetFirst2(-3), Commit, {_consts(', approx. ')}, "
        "GetFrom(,), GetFirst1(Digit), GetFirst2(3), GetFirst1(Digit), GetFirst2(-3), Commit, "
        f"{_consts(' PM')}",
    ),
    "address": (
        _address,
        f"GetToken1(Word), GetToken2(-2), Commit, {_consts(' (')}, GetToken1(Number), "
        "GetToken2(-1), Commit, Const()), Commit",
    ),
    "movie": (
        _movie,
        f"GetToken1(Word), GetToken2(0), Commit, {_consts(': ')}, GetToken1(Number), "
        "GetToken2(-2), Commit",
    ),
}


def generate_string_templates(
    count: int, rng: np.random.Generator, examples: int = 4, held_out: int = 1
) -> list[Task]:
    """Held-out string tasks instantiated from parameterised templates.

    Templates are used round-robin; every task's outputs are produced by the
    template's witness program, so each task is solvable in the language.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    domain = StringDomain()
    names = list(STRING_TEMPLATES)
    tasks: list[Task] = []
    for k in range(count):
        template = names[k % len(names)]
        make_input, witness = STRING_TEMPLATES[template]
        program = domain.parse_program(witness)
        inputs = [make_input(rng) for _ in range(examples + held_out)]
        pairs = tuple((text, eval_program(program, text)) for text in inputs)
        spec = StringSpec(examples=pairs[:examples], test=pairs[examples:])
        tasks.append(Task(id=f"{template}-{k:03d}", spec=spec, witness=witness, template=template))
    return tasks


def generate_csg_suite(
    domain: CsgDomain, config: GenConfig, count: int, rng: np.random.Generator
) -> list[Task]:
    """Random pruned scenes, each carrying its generating program as witness."""
    tasks = []
    for k in range(count):
        episode = sample_episode(domain, config, rng)
        tasks.append(
            Task(
                id=f"{domain.name}-{k:03d}",
                spec=episode.spec,
                witness=domain.format_program(episode.program),
            )
        )
    return tasks


def generate_suite(domain: Domain, config: GenConfig, count: int, seed: int) -> list[Task]:
    """Deterministic evaluation suite for `domain`."""
    rng = np.random.default_rng([seed, 0x5EED])
    if isinstance(domain, StringDomain):
        return generate_string_templates(count, rng, examples=config.examples_per_spec)
    assert isinstance(domain, CsgDomain)
    return generate_csg_suite(domain, config, count, rng)


def save_tasks(domain: Domain, tasks: list[Task], path: str | Path) -> None:
    """Write a YAML task file: ``tasks: [{id, <spec fields>, witness, template}]``."""
    entries = []
    for task in tasks:
        entry: dict[str, Any] = {"id": task.id, **domain.spec_to_json(task.spec)}
        if task.witness is not None:
            entry["witness"] = task.witness
        if task.template is not None:
            entry["template"] = task.template
        entries.append(entry)
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as handle:
            yaml.safe_dump({"tasks": entries}, handle, sort_keys=False, allow_unicode=False)
    except OSError as exc:
        raise IoFailure(f"Failed to write tasks to {path}: {exc}") from exc


def load_tasks(domain: Domain, path: str | Path) -> list[Task]:
    """Read a YAML task file.

    CSG entries may give an ``image`` (a PGM path, relative to the task file)
    instead of a ``program``.

    Raises:
        IoFailure: If the file cannot be read
        SynthesisError: If an entry is malformed
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except OSError as exc:
        raise IoFailure(f"Failed to read tasks from {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SynthesisError(f"Task file {path} is not valid YAML: {exc}") from exc

    entries = data.get("tasks") if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise SynthesisError(f"Task file {path} has no 'tasks' list")

    tasks = []
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise SynthesisError(f"Task {position} in {path} is not a mapping")
        task_id = str(entry.get("id", f"task-{position:03d}"))
        if "image" in entry and isinstance(domain, CsgDomain):
            image = (path.parent / entry["image"]).read_text(encoding="utf-8")
            spec = domain.spec_from_grid(from_pgm(image))
        else:
            spec = domain.spec_from_json(entry)
        tasks.append(
            Task(id=task_id, spec=spec, witness=entry.get("witness"), template=entry.get("template"))
        )
    return tasks
