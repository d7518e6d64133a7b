"""Search strategies that interleave writing (policy), executing (REPL) and assessing (value).

Every strategy counts one node per REPL execution and tracks the best program
seen so far, so an exhausted budget or deadline still yields a result.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from replsynth.mdp import (
    Action,
    ActionDistribution,
    Domain,
    NoLegalActions,
    Policy,
    SynthesisError,
    SynthState,
    Value,
    apply_action,
    initial_state,
)

logger = logging.getLogger(__name__)


class BudgetExhausted(SynthesisError):
    """The node budget or the deadline was reached."""


class AllParticlesDead(SynthesisError):
    """Every particle of an SMC population carries weight -inf."""


@dataclass
class Particle:
    """One member of an SMC population."""

    state: SynthState
    view: Any
    log_weight: float = 0.0
    finished: bool = False
    lineage: int = 0


@dataclass
class SearchResult:
    """Best-so-far outcome of a search, with its node count and quality trace."""

    best_program: str | None = None
    best_quality: float = -math.inf
    solved: bool = False
    nodes_expanded: int = 0
    trace: list[tuple[float, float]] = field(default_factory=list)
    budgets: list[int] = field(default_factory=list)
    expanded: list[str] = field(default_factory=list)
    exhausted: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_program": self.best_program,
            "best_quality": self.best_quality,
            "solved": self.solved,
            "nodes_expanded": self.nodes_expanded,
            "trace": [[round(t, 6), q] for t, q in self.trace],
            "budgets": list(self.budgets),
            "exhausted": self.exhausted,
        }


class SearchContext:
    """Node accounting and best-so-far bookkeeping shared by all strategies."""

    def __init__(
        self,
        domain: Domain,
        spec: Any,
        deadline: float | None = None,
        node_budget: int | None = None,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.domain = domain
        self.spec = spec
        self.deadline = deadline
        self.node_budget = node_budget
        self.clock = clock
        self.start = clock()
        self.result = SearchResult()

    def check(self) -> None:
        """Raise BudgetExhausted if no further execution is allowed."""
        if self.node_budget is not None and self.result.nodes_expanded >= self.node_budget:
            raise BudgetExhausted(f"Node budget {self.node_budget} reached")
        if self.deadline is not None and self.clock() >= self.deadline:
            raise BudgetExhausted("Deadline reached")

    def execute(
        self, state: SynthState, parent: Any | None = None, action: Action | None = None
    ) -> Any:
        self.check()
        view = self.domain.execute(state, parent, action)
        self.result.nodes_expanded += 1
        self.observe(state, view)
        return view

    def observe(self, state: SynthState, view: Any) -> bool:
        """Fold an executed state into the best-so-far; True if it satisfies the spec."""
        if self.domain.dead(state, view):
            return False
        solved = self.domain.satisfied(state, view)
        quality = self.domain.quality(state, view)
        best = self.result
        if (solved, quality) > (best.solved, best.best_quality):
            best.solved = solved
            best.best_quality = quality
            best.best_program = self.domain.best_program(state, view)
            best.trace.append((self.clock() - self.start, quality))
        return solved

    def done(self, exhausted: bool = False) -> SearchResult:
        self.result.exhausted = exhausted
        return self.result

    def history(self, actions: Sequence[Action]) -> str:
        return " ".join(self.domain.format_action(a) for a in actions)


# -- sequential Monte Carlo --------------------------------------------------------------------


def systematic_resample(
    weights: np.ndarray, rng: np.random.Generator, count: int | None = None
) -> np.ndarray:
    """Indices of a systematic resample of `count` particles (default ``len(weights)``).

    `weights` must be non-negative with a positive sum; zero-weight particles
    are never selected.
    """
    n = len(weights)
    k = n if count is None else count
    positions = (np.arange(k) + rng.random()) / k
    cumulative = np.cumsum(weights / weights.sum())
    cumulative[-1] = 1.0
    indexes = np.searchsorted(cumulative, positions, side="right")
    return np.minimum(indexes, n - 1)


def _distributions(
    policy: Policy, states: Sequence[SynthState], views: Sequence[Any]
) -> list[ActionDistribution | None]:
    """Batched proposals; states without legal actions get None."""
    try:
        return list(policy.distributions(states, views))
    except NoLegalActions:
        pass
    out: list[ActionDistribution | None] = []
    for state, view in zip(states, views, strict=True):
        try:
            out.append(policy.distribution(state, view))
        except NoLegalActions:
            out.append(None)
    return out


def _population(state: SynthState, view: Any, k: int, offset: int) -> list[Particle]:
    return [Particle(state=state, view=view, lineage=offset + i) for i in range(k)]


def smc(
    domain: Domain,
    policy: Policy,
    value: Value,
    spec: Any,
    particles: int,
    rng: np.random.Generator,
    max_steps: int | None = None,
    deadline: float | None = None,
    node_budget: int | None = None,
) -> SearchResult:
    """Sample from π, reweight by v, resample systematically; repeat for `max_steps` steps.

    A population in which every particle died is replaced by a fresh one; the
    restart consumes the remaining steps and nodes of the same budget.
    """
    if particles < 1:
        raise ValueError(f"particles must be >= 1, got {particles}")
    ctx = SearchContext(domain, spec, deadline, node_budget)
    steps = domain.horizon if max_steps is None else max_steps
    try:
        start = initial_state(domain, spec)
        start_view = ctx.execute(start)
        if ctx.result.solved:
            return ctx.done()
        population = _population(start, start_view, particles, 0)
        restarts = 0
        for _ in range(steps):
            try:
                population = _smc_step(ctx, policy, value, population, rng)
            except AllParticlesDead:
                restarts += 1
                logger.debug(f"All {particles} particles dead; restart {restarts}")
                population = _population(start, start_view, particles, restarts * particles)
            if ctx.result.solved:
                return ctx.done()
    except BudgetExhausted:
        return ctx.done(exhausted=True)
    return ctx.done()


def _smc_step(
    ctx: SearchContext,
    policy: Policy,
    value: Value,
    population: list[Particle],
    rng: np.random.Generator,
) -> list[Particle]:
    domain = ctx.domain
    live = [p for p in population if p.state.step_count < domain.horizon]
    if not live:
        raise AllParticlesDead("Every particle reached the horizon")
    distributions = _distributions(policy, [p.state for p in live], [p.view for p in live])
    children: list[Particle] = []
    for particle, distribution in zip(live, distributions, strict=True):
        if distribution is None:
            continue
        action = distribution.sample(rng)
        state = apply_action(domain, particle.state, action)
        view = ctx.execute(state, particle.view, action)
        if ctx.result.solved:
            return [Particle(state, view, 0.0, True, particle.lineage)]
        child = Particle(state=state, view=view, lineage=particle.lineage)
        child.log_weight = -math.inf if domain.dead(state, view) else 0.0
        children.append(child)

    alive = [c for c in children if c.log_weight > -math.inf]
    if not alive:
        raise AllParticlesDead("Every particle died")
    log_values = value.log_values([c.state for c in alive], [c.view for c in alive])
    for child, log_v in zip(alive, log_values, strict=True):
        child.log_weight = min(float(log_v), 0.0)

    log_weights = np.array([c.log_weight for c in children])
    if not np.isfinite(log_weights).any():
        raise AllParticlesDead("Every particle has zero value")
    weights = np.exp(log_weights - log_weights[np.isfinite(log_weights)].max())
    # Children lost to NoLegalActions shrink the pool; resampling restores K.
    indexes = systematic_resample(weights, rng, len(population))
    return [
        Particle(children[i].state, children[i].view, 0.0, False, children[i].lineage)
        for i in indexes
    ]


# -- beam search ------------------------------------------------------------------------------------


@dataclass
class _BeamEntry:
    state: SynthState
    view: Any
    log_pi: float
    score: float
    actions: tuple[Action, ...] = ()


def beam(
    domain: Domain,
    policy: Policy,
    value: Value | None,
    spec: Any,
    width: int,
    max_steps: int | None = None,
    deadline: float | None = None,
    node_budget: int | None = None,
) -> SearchResult:
    """Deterministic beam search on log π, plus log v of the current state when `value` is given.

    Each parent proposes its top-`width` actions; ties in the child pool are
    broken by parent rank, then by canonical action text.
    """
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    ctx = SearchContext(domain, spec, deadline, node_budget)
    steps = domain.horizon if max_steps is None else max_steps
    try:
        start = initial_state(domain, spec)
        view = ctx.execute(start)
        if ctx.result.solved:
            return ctx.done()
        frontier = [_BeamEntry(start, view, 0.0, 0.0)]
        for _ in range(steps):
            frontier = [e for e in frontier if e.state.step_count < domain.horizon]
            if not frontier:
                break
            distributions = _distributions(
                policy, [e.state for e in frontier], [e.view for e in frontier]
            )
            pool: list[tuple[float, int, str, _BeamEntry]] = []
            for rank, (entry, distribution) in enumerate(zip(frontier, distributions, strict=True)):
                if distribution is None:
                    continue
                for action, log_p in distribution.top_k(width):
                    state = apply_action(domain, entry.state, action)
                    child_view = ctx.execute(state, entry.view, action)
                    if ctx.result.solved:
                        return ctx.done()
                    if domain.dead(state, child_view):
                        continue
                    log_pi = entry.log_pi + log_p
                    child = _BeamEntry(
                        state, child_view, log_pi, log_pi, entry.actions + (action,)
                    )
                    pool.append((0.0, rank, domain.format_action(action), child))
            if value is not None and pool:
                log_values = value.log_values(
                    [c.state for *_, c in pool], [c.view for *_, c in pool]
                )
                for (_, _, _, child), log_v in zip(pool, log_values, strict=True):
                    child.score = child.log_pi + log_v
            pool.sort(key=lambda item: (-item[3].score, item[1], item[2]))
            frontier = [child for *_, child in pool[:width]]
    except BudgetExhausted:
        return ctx.done(exhausted=True)
    return ctx.done()


# -- policy rollouts -----------------------------------------------------------------------------------


def rollouts(
    domain: Domain,
    policy: Policy,
    spec: Any,
    budget: int,
    rng: np.random.Generator,
    max_steps: int | None = None,
    deadline: float | None = None,
    node_budget: int | None = None,
) -> SearchResult:
    """Independent policy rollouts from the start state; best by quality."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    ctx = SearchContext(domain, spec, deadline, node_budget)
    steps = domain.horizon if max_steps is None else max_steps
    try:
        start = initial_state(domain, spec)
        start_view = ctx.execute(start)
        if ctx.result.solved:
            return ctx.done()
        for _ in range(budget):
            state, view = start, start_view
            for _ in range(steps):
                try:
                    action = policy.distribution(state, view).sample(rng)
                except NoLegalActions:
                    break
                parent = view
                state = apply_action(domain, state, action)
                view = ctx.execute(state, parent, action)
                if ctx.result.solved:
                    return ctx.done()
                if domain.dead(state, view):
                    break
    except BudgetExhausted:
        return ctx.done(exhausted=True)
    return ctx.done()


# -- A* ------------------------------------------------------------------------------------------------


def astar(
    domain: Domain,
    policy: Policy,
    value: Value,
    spec: Any,
    node_budget: int,
    top_m: int = 16,
    deadline: float | None = None,
) -> SearchResult:
    """Best-first search on ``-log π(a_1..a_t) - log v(state)``.

    Children are restricted to the top-`top_m` policy actions of each node;
    equal priorities pop in insertion order. `expanded` lists the action
    history of every popped node.
    """
    if node_budget < 1:
        raise ValueError(f"node_budget must be >= 1, got {node_budget}")
    ctx = SearchContext(domain, spec, deadline, node_budget)
    counter = itertools.count()
    try:
        start = initial_state(domain, spec)
        view = ctx.execute(start)
        if ctx.result.solved:
            return ctx.done()
        h = -value.log_value(start, view)
        heap: list[tuple[float, int, float, SynthState, Any, tuple[Action, ...]]] = [
            (h, next(counter), 0.0, start, view, ())
        ]
        while heap:
            _, _, cost, state, view, actions = heapq.heappop(heap)
            ctx.result.expanded.append(ctx.history(actions))
            if state.step_count >= domain.horizon:
                continue
            try:
                proposals = policy.distribution(state, view).top_k(top_m)
            except NoLegalActions:
                continue
            for action, log_p in proposals:
                child = apply_action(domain, state, action)
                child_view = ctx.execute(child, view, action)
                if ctx.result.solved:
                    return ctx.done()
                if domain.dead(child, child_view):
                    continue
                g = cost - log_p
                f = g - value.log_value(child, child_view)
                heapq.heappush(heap, (f, next(counter), g, child, child_view, actions + (action,)))
    except BudgetExhausted:
        return ctx.done(exhausted=True)
    return ctx.done()


# -- no-REPL decoding ---------------------------------------------------------------------------------


def _closed(domain: Domain, state: SynthState) -> bool:
    """States at which a syntactically decoded program is checked."""
    if state.pending is not None:
        return False
    return bool(state.pp) and (domain.name == "string" or len(state.pp) == 1)


def norepl(
    domain: Domain,
    policy: Policy,
    spec: Any,
    samples: int,
    rng: np.random.Generator,
    max_steps: int | None = None,
    deadline: float | None = None,
    node_budget: int | None = None,
) -> SearchResult:
    """Decode programs from spec and syntax alone; execute only for verification.

    Each sample is decoded without any REPL call (the policy receives no
    view). Its closed states (a single tree in scope for CSG, a just-committed
    program for strings) are then executed in order, one node each, until
    one satisfies the spec. String candidates stop at the first one whose
    output is not a prefix of the target, since every later one extends it.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    ctx = SearchContext(domain, spec, deadline, node_budget)
    steps = domain.horizon if max_steps is None else max_steps
    try:
        for _ in range(samples):
            ctx.check()
            state = initial_state(domain, spec)
            candidates: list[SynthState] = []
            for _ in range(steps):
                try:
                    action = policy.distribution(state, None).sample(rng)
                except NoLegalActions:
                    break
                state = apply_action(domain, state, action)
                if _closed(domain, state):
                    candidates.append(state)
            if not candidates or candidates[-1] is not state:
                candidates.append(state)
            for candidate in candidates:
                view = ctx.execute(candidate)
                if ctx.result.solved:
                    return ctx.done()
                if domain.dead(candidate, view):
                    break
    except BudgetExhausted:
        return ctx.done(exhausted=True)
    return ctx.done()


# -- anytime driver ------------------------------------------------------------------------------------

SearchRun = Callable[[int, np.random.Generator, float | None, int | None], SearchResult]


def anytime(
    run: SearchRun,
    timeout: float,
    rng: np.random.Generator,
    node_budget: int | None = None,
    max_budget: int | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> SearchResult:
    """Rerun `run` with budget 1, 2, 4, ... until success, timeout or node budget.

    `run(budget, rng, deadline, node_budget)` performs one search. Results are
    merged by best quality; the trace is expressed in seconds since the first
    run started.
    """
    if timeout <= 0:
        raise ValueError(f"timeout must be > 0, got {timeout}")
    start = clock()
    deadline = start + timeout
    merged = SearchResult()
    budget = 1
    while True:
        remaining = None if node_budget is None else node_budget - merged.nodes_expanded
        if remaining is not None and remaining <= 0:
            merged.exhausted = True
            break
        offset = clock() - start
        logger.debug(f"Anytime run with budget {budget} at {offset:.2f}s")
        result = run(budget, rng.spawn(1)[0], deadline, remaining)
        merged.budgets.append(budget)
        merged.nodes_expanded += result.nodes_expanded
        merged.expanded.extend(result.expanded)
        if (result.solved, result.best_quality) > (merged.solved, merged.best_quality):
            merged.solved = result.solved
            merged.best_quality = result.best_quality
            merged.best_program = result.best_program
            for seconds, quality in result.trace:
                if not merged.trace or quality > merged.trace[-1][1]:
                    merged.trace.append((offset + seconds, quality))
        if merged.solved:
            break
        if clock() >= deadline:
            merged.exhausted = True
            break
        if max_budget is not None and budget * 2 > max_budget:
            break
        budget *= 2
    return merged
