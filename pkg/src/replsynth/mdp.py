"""Goal-conditioned MDP over sets of partial programs.

A state is the tuple of complete subtrees currently in scope plus the goal
specification. Actions are grammar productions with every argument bound;
terminal productions add a subtree, non-terminal productions consume their
operand subtrees and append the combined tree at the end of the scope.

Concrete languages plug in through :class:`Domain`. Transitions here are
purely syntactic; executing a state (the REPL) is a separate domain call so
that search code can count executions as node expansions.
"""

from __future__ import annotations

import json
import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np

logger = logging.getLogger(__name__)


class SynthesisError(Exception):
    """Base error for everything raised by replsynth."""


class IllegalActionError(SynthesisError):
    """An action does not fit the state it is applied to."""

    def __init__(self, message: str, *, action: Action | None = None) -> None:
        super().__init__(message)
        self.action = action


class OperandOutOfRange(IllegalActionError):
    """Operand index outside the current scope, or repeated."""


class ArityMismatch(IllegalActionError):
    """Operand count differs from the production's arity."""


class UnknownProduction(IllegalActionError):
    """Production is not part of the domain grammar."""


class HorizonError(SynthesisError):
    """A step bound below one was requested."""


class NoLegalActions(SynthesisError):
    """The policy was asked for a distribution with an empty support."""


@dataclass(frozen=True)
class Action:
    """One line of code typed into the REPL."""

    production: str
    params: tuple[Any, ...] = ()
    operands: tuple[int, ...] = ()


@dataclass(frozen=True)
class SynthState:
    """MDP state: scope entries in insertion order plus the goal specification.

    ``pending`` holds a domain-specific descriptor of an in-flight partial
    expression (used by the string language); scope-style languages leave it None.
    """

    pp: tuple[Any, ...]
    spec: Any = field(compare=False, repr=False)
    step_count: int = 0
    pending: Any = None


@dataclass
class Trajectory:
    """A rollout: ``len(states) == len(actions) + 1``."""

    states: list[SynthState]
    actions: list[Action]
    reward: int
    views: list[Any] = field(default_factory=list, repr=False)
    dead: bool = False


class ActionDistribution(ABC):
    """A normalised distribution over the legal actions of one state."""

    @abstractmethod
    def log_prob(self, action: Action) -> float:
        """Log probability of `action`; ``-inf`` for illegal actions."""

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> Action:
        """Draw one action."""

    @abstractmethod
    def top_k(self, k: int) -> list[tuple[Action, float]]:
        """The `k` most probable actions with their log probabilities, best first."""


class CategoricalActions(ActionDistribution):
    """Explicit categorical over an ordered list of actions.

    The input order is taken to be canonical; ties in `top_k` keep that order.
    """

    def __init__(self, actions: Sequence[Action], logits: Sequence[float] | np.ndarray) -> None:
        if not actions:
            raise NoLegalActions("Empty action support")
        self.actions = list(actions)
        scores = np.asarray(logits, dtype=np.float64)
        shift = scores.max()
        log_norm = shift + math.log(float(np.exp(scores - shift).sum()))
        self.log_probs = scores - log_norm
        self._index = {a: i for i, a in enumerate(self.actions)}

    def log_prob(self, action: Action) -> float:
        i = self._index.get(action)
        if i is None:
            return -math.inf
        return float(self.log_probs[i])

    def sample(self, rng: np.random.Generator) -> Action:
        probs = np.exp(self.log_probs)
        i = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
        return self.actions[min(i, len(self.actions) - 1)]

    def top_k(self, k: int) -> list[tuple[Action, float]]:
        order = np.argsort(-self.log_probs, kind="stable")[:k]
        return [(self.actions[i], float(self.log_probs[i])) for i in order]


class Policy(ABC):
    """Source of action distributions, π(a | ⟦pp⟧, spec)."""

    @abstractmethod
    def distribution(self, state: SynthState, view: Any) -> ActionDistribution:
        """Distribution over next actions at `state` given its executed `view`."""

    def distributions(
        self, states: Sequence[SynthState], views: Sequence[Any]
    ) -> list[ActionDistribution]:
        return [self.distribution(s, v) for s, v in zip(states, views, strict=True)]


class Value(ABC):
    """Log probability that continuing from a state satisfies the spec."""

    @abstractmethod
    def log_value(self, state: SynthState, view: Any) -> float:
        """Return log v, always <= 0."""

    def log_values(self, states: Sequence[SynthState], views: Sequence[Any]) -> list[float]:
        return [self.log_value(s, v) for s, v in zip(states, views, strict=True)]


class Domain(ABC):
    """Seam between a concrete language and the generic search/learning core.

    Execution must be deterministic: the same program always yields the same
    artifact.
    """

    name: str
    horizon: int
    productions: tuple[str, ...]

    # -- grammar -----------------------------------------------------------

    @abstractmethod
    def arity(self, production: str) -> int:
        """Number of scope operands the production consumes."""

    @abstractmethod
    def iter_legal_actions(self, state: SynthState) -> Iterator[Action]:
        """Every legal action at `state`, in canonical order."""

    def action_key(self, action: Action) -> tuple[Any, ...]:
        """Canonical sort key: production id, then params, then operands."""
        return (self.productions.index(action.production), action.params, action.operands)

    def check_action(self, state: SynthState, action: Action) -> None:
        """Raise an IllegalActionError subclass when `action` is malformed for `state`."""
        if action.production not in self.productions:
            raise UnknownProduction(f"Unknown production {action.production!r}", action=action)
        expected = self.arity(action.production)
        if len(action.operands) != expected:
            raise ArityMismatch(
                f"{action.production} takes {expected} operands, got {len(action.operands)}",
                action=action,
            )
        if len(set(action.operands)) != len(action.operands):
            raise OperandOutOfRange(f"Repeated operand in {action.operands}", action=action)
        for index in action.operands:
            if not 0 <= index < len(state.pp):
                raise OperandOutOfRange(
                    f"Operand {index} out of range for scope of size {len(state.pp)}",
                    action=action,
                )

    def build(self, action: Action, children: Sequence[Any]) -> Any:
        """Tree produced by `action` over already-built `children`."""
        raise NotImplementedError(f"{type(self).__name__} does not build scope trees")

    def transition(self, state: SynthState, action: Action) -> SynthState:
        """Scope rule: terminals append; non-terminals replace their operands by the combination."""
        children = [state.pp[i] for i in action.operands]
        tree = self.build(action, children)
        consumed = set(action.operands)
        kept = tuple(p for i, p in enumerate(state.pp) if i not in consumed)
        return SynthState(
            pp=kept + (tree,),
            spec=state.spec,
            step_count=state.step_count + 1,
            pending=state.pending,
        )

    # -- REPL ----------------------------------------------------------------

    @abstractmethod
    def execute(
        self, state: SynthState, parent: Any | None = None, action: Action | None = None
    ) -> Any:
        """Executed view of `state`; incremental when the parent view and action are given."""

    @abstractmethod
    def satisfied(self, state: SynthState, view: Any) -> bool:
        """True when some scope entry satisfies the spec exactly."""

    def dead(self, state: SynthState, view: Any) -> bool:
        """True when no continuation of `state` can succeed."""
        return False

    @abstractmethod
    def quality(self, state: SynthState, view: Any) -> float:
        """Best-so-far score of a state; larger is better and solved states score highest."""

    @abstractmethod
    def best_program(self, state: SynthState, view: Any) -> str:
        """Concrete syntax of the best candidate program in `state`."""

    # -- text and specs ----------------------------------------------------------

    @abstractmethod
    def format_action(self, action: Action) -> str:
        """Canonical textual form of an action."""

    @abstractmethod
    def parse_action(self, text: str) -> Action:
        """Inverse of :meth:`format_action`."""

    @abstractmethod
    def spec_id(self, spec: Any) -> str:
        """Short stable identifier for a spec."""

    @abstractmethod
    def spec_to_json(self, spec: Any) -> Any:
        """JSON-serialisable payload from which the spec can be rebuilt."""

    @abstractmethod
    def spec_from_json(self, payload: Any) -> Any:
        """Inverse of :meth:`spec_to_json`."""

    @abstractmethod
    def fingerprint(self) -> str:
        """Hash of the grammar; checkpoints refuse to load across fingerprints."""

    # -- data generation hooks -------------------------------------------------------

    @abstractmethod
    def sample_program(self, config: Any, rng: np.random.Generator) -> Any:
        """Sample a random grammar-valid program for synthetic training data."""

    @abstractmethod
    def make_spec(self, program: Any, config: Any, rng: np.random.Generator) -> Any | None:
        """Spec realised by `program`, or None when the sample must be rejected."""

    @abstractmethod
    def recover_actions(self, program: Any) -> list[Action]:
        """Canonical action sequence that builds `program` from the start state."""

    @abstractmethod
    def format_program(self, program: Any) -> str:
        """Concrete syntax of a program."""

    @abstractmethod
    def parse_program(self, text: str) -> Any:
        """Inverse of :meth:`format_program`."""


def initial_state(domain: Domain, spec: Any) -> SynthState:
    """Start state ``({}, spec)``."""
    del domain
    return SynthState(pp=(), spec=spec, step_count=0)


def apply_action(domain: Domain, state: SynthState, action: Action) -> SynthState:
    """Apply `action` to `state`, returning a new state; the input is never mutated.

    Raises:
        UnknownProduction, ArityMismatch, OperandOutOfRange: malformed action
    """
    domain.check_action(state, action)
    return domain.transition(state, action)


def legal_actions(domain: Domain, state: SynthState) -> list[Action]:
    """All legal actions at `state` in canonical order."""
    return list(domain.iter_legal_actions(state))


def reward(domain: Domain, state: SynthState, view: Any | None = None) -> int:
    """1 iff some program in scope satisfies the spec."""
    if view is None:
        view = domain.execute(state)
    return int(domain.satisfied(state, view))


def rollout(
    domain: Domain,
    policy: Policy,
    spec: Any,
    max_steps: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Sample actions from `policy` until reward 1, a dead state or `max_steps`.

    Execution failures end the trajectory with reward 0 and ``dead=True``;
    they are recorded, never raised.
    """
    if max_steps < 1:
        raise HorizonError(f"max_steps must be >= 1, got {max_steps}")
    state = initial_state(domain, spec)
    return rollout_from(domain, policy, state, domain.execute(state), max_steps, rng)


def rollout_from(
    domain: Domain,
    policy: Policy,
    state: SynthState,
    view: Any,
    max_steps: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Continue a rollout from an already executed state."""
    trajectory = Trajectory(states=[state], actions=[], reward=0, views=[view])
    if domain.satisfied(state, view):
        trajectory.reward = 1
        return trajectory

    for _ in range(max_steps):
        try:
            action = policy.distribution(state, view).sample(rng)
        except NoLegalActions:
            trajectory.dead = True
            return trajectory
        state = apply_action(domain, state, action)
        view = domain.execute(state, view, action)
        trajectory.states.append(state)
        trajectory.actions.append(action)
        trajectory.views.append(view)
        if domain.dead(state, view):
            trajectory.dead = True
            return trajectory
        if domain.satisfied(state, view):
            trajectory.reward = 1
            return trajectory

    return trajectory


def replay(domain: Domain, spec: Any, actions: Iterable[Action]) -> Trajectory:
    """Apply a fixed action sequence from the start state, executing every state."""
    state = initial_state(domain, spec)
    view = domain.execute(state)
    trajectory = Trajectory(states=[state], actions=[], reward=0, views=[view])
    for action in actions:
        state = apply_action(domain, state, action)
        view = domain.execute(state, view, action)
        trajectory.states.append(state)
        trajectory.actions.append(action)
        trajectory.views.append(view)
        if domain.dead(state, view):
            trajectory.dead = True
    trajectory.reward = int(not trajectory.dead and domain.satisfied(state, view))
    return trajectory


class UniformPolicy(Policy):
    """Uniform over the legal actions of each state."""

    def __init__(self, domain: Domain) -> None:
        self.domain = domain

    def distribution(self, state: SynthState, view: Any) -> ActionDistribution:
        actions = legal_actions(self.domain, state)
        return CategoricalActions(actions, np.zeros(len(actions)))


class ReplayPolicy(Policy):
    """Point mass on a fixed action sequence, indexed by step count."""

    def __init__(self, actions: Sequence[Action]) -> None:
        self.actions = list(actions)

    def distribution(self, state: SynthState, view: Any) -> ActionDistribution:
        if state.step_count >= len(self.actions):
            raise NoLegalActions("Replay sequence exhausted")
        return CategoricalActions([self.actions[state.step_count]], [0.0])


class ConstantValue(Value):
    """v ≡ 1, which turns value-guided search into policy-only search."""

    def log_value(self, state: SynthState, view: Any) -> float:
        return 0.0


class OracleValue(Value):
    """v = 1 on states along a ground-truth action sequence, ε elsewhere."""

    def __init__(
        self, domain: Domain, spec: Any, actions: Sequence[Action], epsilon: float = 1e-6
    ) -> None:
        self.log_epsilon = math.log(epsilon)
        state = initial_state(domain, spec)
        self.prefix_states = {state}
        for action in actions:
            state = apply_action(domain, state, action)
            self.prefix_states.add(state)

    def log_value(self, state: SynthState, view: Any) -> float:
        return 0.0 if state in self.prefix_states else self.log_epsilon


# -- persistence --------------------------------------------------------------------


def trajectory_record(domain: Domain, trajectory: Trajectory) -> dict[str, Any]:
    """One line of the trajectory file format."""
    spec = trajectory.states[0].spec
    return {
        "spec_id": domain.spec_id(spec),
        "spec": domain.spec_to_json(spec),
        "actions": [domain.format_action(a) for a in trajectory.actions],
        "reward": trajectory.reward,
    }


def dump_record(record: dict[str, Any]) -> str:
    """Byte-stable JSON encoding of a record."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_trajectories(
    domain: Domain, trajectories: Iterable[Trajectory], handle: IO[str]
) -> int:
    """Write trajectories as JSON lines; returns the number written."""
    count = 0
    for trajectory in trajectories:
        handle.write(dump_record(trajectory_record(domain, trajectory)))
        handle.write("\n")
        count += 1
    return count


def read_trajectories(domain: Domain, path: str | Path) -> Iterator[Trajectory]:
    """Rebuild trajectories from a JSON-lines file by replaying their actions."""
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                spec = domain.spec_from_json(record["spec"])
                actions = [domain.parse_action(text) for text in record["actions"]]
            except (KeyError, TypeError, ValueError, SynthesisError) as exc:
                logger.warning(f"Skipping malformed trajectory on line {line_number}: {exc}")
                continue
            trajectory = replay(domain, spec, actions)
            if trajectory.reward != record.get("reward"):
                logger.warning(
                    f"Stored reward {record.get('reward')} disagrees with replay "
                    f"reward {trajectory.reward} on line {line_number}"
                )
            yield trajectory
