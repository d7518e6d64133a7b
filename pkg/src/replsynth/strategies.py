"""Named search strategies for the command line and the benchmark harness."""

from __future__ import annotations

import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np

from replsynth.mdp import ConstantValue, Domain, Policy, Value
from replsynth.search import SearchResult, anytime, astar, beam, norepl, rollouts, smc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StrategyContext:
    """What a strategy needs to attack one spec."""

    domain: Domain
    spec: Any
    policy: Policy
    value: Value | None = None
    top_m: int = 16
    max_steps: int | None = None


class Strategy(ABC):
    """Base class for search strategies."""

    name: str
    description: str
    budget_kind: str
    aliases: list[str] = []
    uses_value: bool = False

    @abstractmethod
    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        """Run one search with a fixed budget.

        Args:
            context: Domain, spec, policy and value
            budget: Particles, beam width, rollouts, nodes or samples (see `budget_kind`)
            rng: Random stream for this run only
            deadline: Monotonic time after which the run returns best-so-far
            node_budget: Maximum number of REPL executions

        Returns:
            Best-so-far search result
        """

    def _value(self, context: StrategyContext) -> Value:
        if context.value is None:
            logger.warning(f"Strategy {self.name} has no value network; using v = 1")
            return ConstantValue()
        return context.value


class SmcStrategy(Strategy):
    name = "smc"
    description = "Sequential Monte Carlo: sample from the policy, reweight by the value, resample"
    budget_kind = "particles"
    aliases = ["particles", "pf"]
    uses_value = True

    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        return smc(
            context.domain,
            context.policy,
            self._value(context),
            context.spec,
            budget,
            rng,
            max_steps=context.max_steps,
            deadline=deadline,
            node_budget=node_budget,
        )


class BeamStrategy(Strategy):
    name = "beam"
    description = "Beam search on log policy plus log value"
    budget_kind = "width"
    aliases = ["beam-value"]
    uses_value = True

    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        return beam(
            context.domain,
            context.policy,
            self._value(context),
            context.spec,
            budget,
            max_steps=context.max_steps,
            deadline=deadline,
            node_budget=node_budget,
        )


class PolicyBeamStrategy(Strategy):
    name = "beam-novalue"
    description = "Beam search on log policy only"
    budget_kind = "width"
    aliases = ["beam-policy"]

    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        return beam(
            context.domain,
            context.policy,
            None,
            context.spec,
            budget,
            max_steps=context.max_steps,
            deadline=deadline,
            node_budget=node_budget,
        )


class RolloutStrategy(Strategy):
    name = "rollout"
    description = "Independent policy rollouts, best by quality"
    budget_kind = "rollouts"
    aliases = ["rollouts", "sample"]

    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        return rollouts(
            context.domain,
            context.policy,
            context.spec,
            budget,
            rng,
            max_steps=context.max_steps,
            deadline=deadline,
            node_budget=node_budget,
        )


class AStarStrategy(Strategy):
    name = "astar"
    description = "Best-first search with -log policy as cost and -log value as heuristic"
    budget_kind = "nodes"
    aliases = ["a*"]
    uses_value = True

    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        limit = budget if node_budget is None else min(budget, node_budget)
        return astar(
            context.domain,
            context.policy,
            self._value(context),
            context.spec,
            limit,
            top_m=context.top_m,
            deadline=deadline,
        )


class NoReplStrategy(Strategy):
    name = "norepl"
    description = "Decode whole programs from spec and syntax; execute only to verify"
    budget_kind = "samples"
    aliases = ["no-repl"]

    def run(
        self,
        context: StrategyContext,
        budget: int,
        rng: np.random.Generator,
        deadline: float | None = None,
        node_budget: int | None = None,
    ) -> SearchResult:
        return norepl(
            context.domain,
            context.policy,
            context.spec,
            budget,
            rng,
            max_steps=context.max_steps,
            deadline=deadline,
            node_budget=node_budget,
        )


# Registry of all strategies
ALL_STRATEGIES: list[type[Strategy]] = [
    SmcStrategy,
    BeamStrategy,
    PolicyBeamStrategy,
    RolloutStrategy,
    AStarStrategy,
    NoReplStrategy,
]


def get_strategy(name: str) -> Strategy:
    """Look a strategy up by name or alias.

    Raises:
        KeyError: If no strategy answers to `name`
    """
    key = name.strip().lower()
    for cls in ALL_STRATEGIES:
        if key == cls.name or key in cls.aliases:
            return cls()
    known = ", ".join(cls.name for cls in ALL_STRATEGIES)
    raise KeyError(f"Unknown strategy {name!r} (known: {known})")


def solve(
    strategy: Strategy,
    context: StrategyContext,
    timeout: float,
    rng: np.random.Generator,
    node_budget: int | None = None,
    budget: int | None = None,
) -> SearchResult:
    """Run `strategy` once with a fixed `budget`, or with the anytime doubling driver."""
    if budget is not None:
        deadline = time.monotonic() + timeout
        result = strategy.run(context, budget, rng, deadline, node_budget)
        result.budgets = [budget]
        return result
    return anytime(
        lambda b, r, d, n: strategy.run(context, b, r, d, n),
        timeout,
        rng,
        node_budget=node_budget,
    )
