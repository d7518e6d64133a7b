"""String-editing language and its committed/scratch/mask REPL.

A program is a concatenation of expressions. Each expression is either a
constant character or a left-to-right pipeline of steps (the first step may
be a substring extractor, later steps are nesting functions). Expressions are
typed into the REPL one token at a time, e.g. ``GetToken1(Number),
GetToken2(1), Commit``; ``Commit`` appends the scratch string to the committed
string of every example.

Indices are Python indices: 0 is the first match and negative values count
from the end. ``SubStr`` positions are 1-based and inclusive.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
from collections.abc import Iterator, Sequence
from dataclasses import astuple, dataclass, field, replace
from functools import lru_cache
from typing import Any

import numpy as np

from replsynth.mdp import (
    Action,
    Domain,
    IllegalActionError,
    SynthesisError,
    SynthState,
    UnknownProduction,
)

logger = logging.getLogger(__name__)

TYPES: dict[str, str] = {
    "Number": r"[0-9]+",
    "Word": r"[A-Za-z]+",
    "AlphaNum": r"[A-Za-z0-9]+",
    "Digit": r"[0-9]",
    "Char": r"\S",
    "AllCaps": r"[A-Z]+",
    "Proper": r"[A-Z][a-z]*",
    "Lower": r"[a-z]+",
}
CASES = ("AllCaps", "Proper", "Lower")
CASE_ALIASES = {"PropCase": "Proper"}
DELIMITERS = "&,.?!@()[]- /:;"
INDICES = tuple(range(-5, 7))
POSITIONS = tuple(k for k in range(-36, 37) if k != 0)
BOUNDARIES = ("Start", "End")
CHARACTERS = tuple(chr(c) for c in range(32, 127))
REGEXES = tuple(TYPES) + tuple(DELIMITERS)


class NoMatch(SynthesisError):
    """A regex had no match, or an index fell outside the match list."""


class IllegalSlot(IllegalActionError):
    """Token does not fit the partially typed expression."""


class ProgramParseError(SynthesisError):
    """Text is not a valid token trace."""


@lru_cache(maxsize=64)
def _pattern(regex: str) -> re.Pattern[str]:
    return re.compile(TYPES[regex] if regex in TYPES else re.escape(regex))


def _matches(regex: str, s: str) -> list[re.Match[str]]:
    return list(_pattern(regex).finditer(s))


# -- expressions ----------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    char: str


@dataclass(frozen=True)
class GetToken:
    type: str
    index: int


@dataclass(frozen=True)
class ToCase:
    case: str


@dataclass(frozen=True)
class GetUpTo:
    regex: str


@dataclass(frozen=True)
class GetFrom:
    regex: str


@dataclass(frozen=True)
class GetAll:
    type: str


@dataclass(frozen=True)
class GetFirst:
    type: str
    index: int


@dataclass(frozen=True)
class Replace:
    old: str
    new: str


@dataclass(frozen=True)
class SubStr:
    k1: int
    k2: int


@dataclass(frozen=True)
class Span:
    r1: str
    i1: int
    y1: str
    r2: str
    i2: int
    y2: str


Step = GetToken | ToCase | GetUpTo | GetFrom | GetAll | GetFirst | Replace | SubStr | Span


@dataclass(frozen=True)
class Compose:
    """Pipeline of steps; ``steps[0]`` runs first on the input."""

    steps: tuple[Step, ...]


Expr = Const | Compose | Step


@dataclass(frozen=True)
class EditProgram:
    expressions: tuple[Expr, ...] = ()


SINGLE_SLOT: dict[str, type] = {
    "ToCase": ToCase,
    "GetUpTo": GetUpTo,
    "GetFrom": GetFrom,
    "GetAll": GetAll,
}
MULTI_SLOT: dict[str, tuple[type, int]] = {
    "GetToken": (GetToken, 2),
    "GetFirst": (GetFirst, 2),
    "Replace": (Replace, 2),
    "SubStr": (SubStr, 2),
    "Span": (Span, 6),
}
SUBSTRING_FAMILIES = ("SubStr", "Span")

SLOT_VALUES: dict[str, tuple[Any, ...]] = {
    "Const": CHARACTERS,
    "ToCase": CASES,
    "GetUpTo": REGEXES,
    "GetFrom": REGEXES,
    "GetAll": tuple(TYPES),
    "GetToken1": tuple(TYPES),
    "GetToken2": INDICES,
    "GetFirst1": tuple(TYPES),
    "GetFirst2": INDICES,
    "Replace1": tuple(DELIMITERS),
    "Replace2": tuple(DELIMITERS),
    "SubStr1": POSITIONS,
    "SubStr2": POSITIONS,
    "Span1": REGEXES,
    "Span2": INDICES,
    "Span3": BOUNDARIES,
    "Span4": REGEXES,
    "Span5": INDICES,
    "Span6": BOUNDARIES,
    "Commit": (),
}
PRODUCTIONS = tuple(SLOT_VALUES)
OPENERS = ("Const", *SINGLE_SLOT, *(f"{family}1" for family in MULTI_SLOT))
_SLOT_INDEX = {p: {v: i for i, v in enumerate(values)} for p, values in SLOT_VALUES.items()}


def _family_of(production: str) -> tuple[str, int] | None:
    """``("Span", 3)`` for ``Span3``; None for single-token productions."""
    match = re.fullmatch(r"([A-Za-z]+?)(\d)", production)
    if match and match.group(1) in MULTI_SLOT:
        return match.group(1), int(match.group(2))
    return None


def eval_step(step: Step, s: str) -> str:
    """Apply one step to `s`.

    Raises:
        NoMatch: When a regex is absent or an index is out of range
    """
    if isinstance(step, GetToken):
        found = _matches(step.type, s)
        if not -len(found) <= step.index < len(found):
            raise NoMatch(f"GetToken({step.type}, {step.index}) on {s!r}")
        return found[step.index].group()
    if isinstance(step, GetFirst):
        found = _matches(step.type, s)
        if not found:
            raise NoMatch(f"GetFirst({step.type}, {step.index}) on {s!r}")
        end = step.index + 1 if step.index >= 0 else len(found) + step.index + 1
        return "".join(m.group() for m in found[: max(end, 0)])
    if isinstance(step, GetAll):
        found = _matches(step.type, s)
        if not found:
            raise NoMatch(f"GetAll({step.type}) on {s!r}")
        return " ".join(m.group() for m in found)
    if isinstance(step, GetUpTo):
        found = _matches(step.regex, s)
        if not found:
            raise NoMatch(f"GetUpTo({step.regex}) on {s!r}")
        return s[: found[0].end()]
    if isinstance(step, GetFrom):
        found = _matches(step.regex, s)
        if not found:
            raise NoMatch(f"GetFrom({step.regex}) on {s!r}")
        return s[found[-1].end() :]
    if isinstance(step, ToCase):
        case = CASE_ALIASES.get(step.case, step.case)
        if case == "AllCaps":
            return s.upper()
        if case == "Proper":
            return s.title()
        return s.lower()
    if isinstance(step, Replace):
        return s.replace(step.old, step.new)
    if isinstance(step, SubStr):
        n = len(s)
        start = step.k1 - 1 if step.k1 > 0 else n + step.k1
        end = step.k2 if step.k2 > 0 else n + step.k2 + 1
        start, end = min(max(start, 0), n), min(max(end, 0), n)
        return s[start:end]
    if isinstance(step, Span):
        left = _matches(step.r1, s)
        right = _matches(step.r2, s)
        if not -len(left) <= step.i1 < len(left) or not -len(right) <= step.i2 < len(right):
            raise NoMatch(f"Span over {s!r}")
        m1, m2 = left[step.i1], right[step.i2]
        p1 = m1.start() if step.y1 == "Start" else m1.end()
        p2 = m2.start() if step.y2 == "Start" else m2.end()
        return s[p1:p2]
    raise ProgramParseError(f"Unknown step {step!r}")


def eval_expr(expr: Expr, s: str) -> str:
    """Evaluate one expression on an input string.

    Raises:
        NoMatch: Propagated from any step
    """
    if isinstance(expr, Const):
        return expr.char
    if isinstance(expr, Compose):
        for step in expr.steps:
            s = eval_step(step, s)
        return s
    return eval_step(expr, s)


def eval_program(program: EditProgram, s: str) -> str:
    return "".join(eval_expr(e, s) for e in program.expressions)


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb))
            )
        previous = current
    return previous[-1]


# -- tokens ---------------------------------------------------------------------------


def expr_actions(expr: Expr) -> list[Action]:
    """Tokens that type `expr`, without the trailing Commit."""
    if isinstance(expr, Const):
        return [Action("Const", (expr.char,))]
    steps = expr.steps if isinstance(expr, Compose) else (expr,)
    actions: list[Action] = []
    for step in steps:
        name = type(step).__name__
        if name in SINGLE_SLOT:
            actions.append(Action(name, astuple(step)))
        else:
            actions.extend(
                Action(f"{name}{k}", (value,)) for k, value in enumerate(astuple(step), start=1)
            )
    return actions


def program_actions(program: EditProgram) -> list[Action]:
    actions: list[Action] = []
    for expr in program.expressions:
        actions.extend(expr_actions(expr))
        actions.append(Action("Commit"))
    return actions


def format_token(action: Action) -> str:
    if action.production == "Commit":
        return "Commit"
    return f"{action.production}({action.params[0]})"


def format_tokens(actions: Sequence[Action]) -> str:
    return ", ".join(format_token(a) for a in actions)


_PRODUCTION = re.compile(r"[A-Za-z]+\d?")
_CHAR_ARGS = {"Const", "Replace1", "Replace2"}
_REGEX_ARGS = {"GetUpTo", "GetFrom", "Span1", "Span4"}
_INT_ARGS = {"GetToken2", "GetFirst2", "Span2", "Span5", "SubStr1", "SubStr2"}


def parse_tokens(text: str) -> list[Action]:
    """Parse a comma-separated token trace.

    Character arguments are exactly one character, so ``Const(()``,
    ``Const(,)`` and ``GetFrom())`` are read as written.

    Raises:
        ProgramParseError: On unknown productions or malformed arguments
    """
    actions: list[Action] = []
    pos, n = 0, len(text)
    while True:
        while pos < n and text[pos] in " \t\r\n":
            pos += 1
        if pos >= n:
            break
        match = _PRODUCTION.match(text, pos)
        if not match:
            raise ProgramParseError(f"Expected a production at offset {pos} in {text!r}")
        production = match.group()
        pos = match.end()
        if production not in SLOT_VALUES:
            raise ProgramParseError(f"Unknown production {production!r}")

        if production == "Commit":
            actions.append(Action("Commit"))
        else:
            if pos >= n or text[pos] != "(":
                raise ProgramParseError(f"{production} needs an argument")
            pos += 1
            if production in _CHAR_ARGS or (
                production in _REGEX_ARGS and pos < n and not text[pos].isalpha()
            ):
                raw, pos = text[pos : pos + 1], pos + 1
            else:
                close = text.find(")", pos)
                if close < 0:
                    raise ProgramParseError(f"Unclosed argument for {production}")
                raw, pos = text[pos:close], close
            if pos >= n or text[pos] != ")":
                raise ProgramParseError(f"Expected ')' after {production}({raw}")
            pos += 1
            actions.append(Action(production, (_coerce(production, raw),)))

        while pos < n and text[pos] in " \t\r\n":
            pos += 1
        if pos < n:
            if text[pos] != ",":
                raise ProgramParseError(f"Expected ',' at offset {pos} in {text!r}")
            pos += 1
    return actions


def _coerce(production: str, raw: str) -> Any:
    if production in _INT_ARGS:
        try:
            value: Any = int(raw)
        except ValueError as exc:
            raise ProgramParseError(f"{production} takes an integer, got {raw!r}") from exc
    elif production == "ToCase":
        value = CASE_ALIASES.get(raw, raw)
    else:
        value = raw
    if value not in _SLOT_INDEX[production]:
        raise ProgramParseError(f"{raw!r} is not a valid argument of {production}")
    return value


# -- pending expression ---------------------------------------------------------------


@dataclass(frozen=True)
class PendingExpr:
    """The in-flight expression: completed steps plus a partially filled multi-slot step."""

    steps: tuple[Any, ...] = ()
    family: str | None = None
    args: tuple[Any, ...] = ()

    @property
    def complete(self) -> bool:
        return self.family is None and bool(self.steps)

    @property
    def is_const(self) -> bool:
        return bool(self.steps) and isinstance(self.steps[0], Const)

    def expression(self) -> Expr:
        if self.is_const:
            return self.steps[0]
        return Compose(tuple(self.steps))


def next_productions(pending: PendingExpr | None, max_chain: int) -> tuple[str, ...]:
    """Productions that may be typed next, in canonical order."""
    if pending is None:
        return OPENERS
    if pending.family is not None:
        return (f"{pending.family}{len(pending.args) + 1}",)
    if pending.is_const:
        return ("Commit",)
    nesting = [p for p in OPENERS[1:] if p.rstrip("1") not in SUBSTRING_FAMILIES]
    if len(pending.steps) < max_chain:
        return ("Commit", *nesting)
    return ("Commit",)


def advance_pending(
    pending: PendingExpr | None, action: Action, max_chain: int
) -> tuple[PendingExpr | None, Expr | None]:
    """Syntactic effect of one token: ``(new pending, committed expression or None)``.

    Raises:
        IllegalSlot: If the token is not legal after `pending`
        UnknownProduction: If the token is not part of the grammar
    """
    production = action.production
    if production not in SLOT_VALUES:
        raise UnknownProduction(f"Unknown production {production!r}", action=action)
    if production not in next_productions(pending, max_chain):
        raise IllegalSlot(f"{production} cannot follow {pending}", action=action)
    if action.params and action.params[0] not in _SLOT_INDEX[production]:
        raise IllegalSlot(f"{action.params[0]!r} is not a valid {production} argument", action=action)

    if production == "Commit":
        assert pending is not None
        return None, pending.expression()

    steps = pending.steps if pending is not None else ()
    value = action.params[0]
    if production == "Const":
        return PendingExpr(steps=(Const(value),)), None
    if production in SINGLE_SLOT:
        return PendingExpr(steps=steps + (SINGLE_SLOT[production](value),)), None

    family_slot = _family_of(production)
    assert family_slot is not None
    family, slot = family_slot
    cls, slots = MULTI_SLOT[family]
    args = (pending.args if pending is not None and slot > 1 else ()) + (value,)
    if slot < slots:
        return PendingExpr(steps=steps, family=family, args=args), None
    return PendingExpr(steps=steps + (cls(*args),)), None


# -- REPL -----------------------------------------------------------------------------


@dataclass(frozen=True)
class StringSpec:
    """Input/output examples plus optional held-out test pairs."""

    examples: tuple[tuple[str, str], ...]
    test: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not self.examples:
            raise ValueError("A string spec needs at least one example")


@dataclass(frozen=True)
class ExampleView:
    input: str
    output: str
    committed: str = ""
    scratch: str = ""
    anchor: int = 0

    @property
    def mask_a(self) -> tuple[int, ...]:
        """Input positions at or after the end of the last located committed fragment."""
        return tuple(int(i >= self.anchor) for i in range(len(self.input)))

    @property
    def mask_b(self) -> tuple[int, ...]:
        """Input positions covered by the first occurrence of the scratch string."""
        start = self.input.find(self.scratch) if self.scratch else -1
        if start < 0:
            return (0,) * len(self.input)
        end = start + len(self.scratch)
        return tuple(int(start <= i < end) for i in range(len(self.input)))


@dataclass(frozen=True)
class StringReplState:
    """Executed view of a string-domain state."""

    examples: tuple[ExampleView, ...]
    pending: PendingExpr | None = None
    error: str | None = None
    last_action: Action | None = None
    history: tuple[Action, ...] = field(default=(), repr=False)


def initial_repl(spec: StringSpec) -> StringReplState:
    return StringReplState(examples=tuple(ExampleView(i, o) for i, o in spec.examples))


def _scratch(pending: PendingExpr | None, s: str) -> str:
    if pending is None:
        return ""
    if not pending.steps:
        return s
    return eval_expr(pending.expression(), s)


def pending_actions(pending: PendingExpr | None) -> list[Action]:
    """Tokens typed so far for the in-flight expression."""
    if pending is None:
        return []
    actions: list[Action] = []
    for step in pending.steps:
        actions.extend(expr_actions(step))
    if pending.family is not None:
        actions.extend(
            Action(f"{pending.family}{k}", (value,)) for k, value in enumerate(pending.args, start=1)
        )
    return actions


def _commit(example: ExampleView, expr: Expr, fragment: str) -> ExampleView:
    anchor = example.anchor
    if not isinstance(expr, Const):
        start = example.input.find(fragment)
        if start >= 0:
            anchor = start + len(fragment)
    return replace(example, committed=example.committed + fragment, scratch="", anchor=anchor)


def apply_string_action(
    repl: StringReplState, action: Action, max_chain: int = 3
) -> StringReplState:
    """One REPL step: fill a slot (re-evaluating scratch) or Commit.

    Evaluation failures are recorded in ``error`` rather than raised.

    Raises:
        IllegalSlot: If the token does not fit the pending expression
    """
    pending, committed = advance_pending(repl.pending, action, max_chain)
    history = repl.history + (action,)
    if repl.error is not None:
        return replace(repl, pending=pending, last_action=action, history=history)

    examples: list[ExampleView] = []
    try:
        for example in repl.examples:
            if committed is not None:
                fragment = eval_expr(committed, example.input)
                examples.append(_commit(example, committed, fragment))
            else:
                examples.append(replace(example, scratch=_scratch(pending, example.input)))
    except NoMatch as exc:
        return replace(
            repl, pending=pending, error=str(exc), last_action=action, history=history
        )
    return StringReplState(
        examples=tuple(examples),
        pending=pending,
        last_action=action,
        history=history,
    )


def prefix_consistent(repl: StringReplState) -> bool:
    """True iff every committed string is a prefix of its target output."""
    return all(e.output.startswith(e.committed) for e in repl.examples)


def satisfies_string(candidate: EditProgram | StringReplState, spec: StringSpec) -> bool:
    """Exact output equality on every example."""
    if isinstance(candidate, StringReplState):
        return candidate.error is None and all(
            e.committed == e.output for e in candidate.examples
        )
    try:
        return all(eval_program(candidate, i) == o for i, o in spec.examples)
    except NoMatch:
        return False


# -- random inputs and programs -------------------------------------------------------------


def random_input(rng: np.random.Generator, length_cap: int = 36) -> str:
    """Input assembled from character-class segments joined by delimiters."""

    def word(alphabet: str, low: int, high: int) -> str:
        size = int(rng.integers(low, high + 1))
        return "".join(alphabet[int(rng.integers(len(alphabet)))] for _ in range(size))

    segments: list[str] = []
    for _ in range(int(rng.integers(1, 6))):
        kind = int(rng.integers(4))
        if kind == 0:
            segments.append(word(string.ascii_uppercase, 1, 1) + word(string.ascii_lowercase, 1, 7))
        elif kind == 1:
            segments.append(word(string.ascii_lowercase, 1, 7))
        elif kind == 2:
            segments.append(word(string.digits, 1, 4))
        else:
            segments.append(word(string.ascii_uppercase, 1, 4))
    text = segments[0]
    for segment in segments[1:]:
        text += DELIMITERS[int(rng.integers(len(DELIMITERS)))] + segment
    return text[:length_cap]


def _pick(rng: np.random.Generator, values: Sequence[Any]) -> Any:
    return values[int(rng.integers(len(values)))]


def random_step(rng: np.random.Generator, first: bool) -> Step:
    families = list(SINGLE_SLOT) + [f for f in MULTI_SLOT if first or f not in SUBSTRING_FAMILIES]
    family = _pick(rng, families)
    if family in SINGLE_SLOT:
        return SINGLE_SLOT[family](_pick(rng, SLOT_VALUES[family]))
    cls, slots = MULTI_SLOT[family]
    return cls(*(_pick(rng, SLOT_VALUES[f"{family}{k}"]) for k in range(1, slots + 1)))


def random_program(
    rng: np.random.Generator, max_expressions: int = 6, max_chain: int = 2
) -> EditProgram:
    """Program of 1..`max_expressions` expressions, each a constant or a short pipeline."""
    expressions: list[Expr] = []
    for _ in range(int(rng.integers(1, max_expressions + 1))):
        if rng.random() < 0.3:
            expressions.append(Const(_pick(rng, CHARACTERS)))
            continue
        depth = int(rng.integers(1, max_chain + 1))
        steps = tuple(random_step(rng, first=(k == 0)) for k in range(depth))
        expressions.append(Compose(steps))
    return EditProgram(tuple(expressions))


# -- domain ---------------------------------------------------------------------------


class StringDomain(Domain):
    """Token-level REPL over the string-editing language."""

    name = "string"
    productions = PRODUCTIONS

    def __init__(self, max_chain: int = 3, horizon: int = 45) -> None:
        self.max_chain = max_chain
        self.horizon = horizon

    @classmethod
    def from_config(cls, config: Any) -> StringDomain:
        return cls(max_chain=config.max_chain, horizon=config.horizon or 45)

    # -- grammar -----------------------------------------------------------

    def arity(self, production: str) -> int:
        return 0

    def slot_values(self, production: str) -> tuple[Any, ...]:
        return SLOT_VALUES[production]

    def next_productions(self, state: SynthState) -> tuple[str, ...]:
        return next_productions(state.pending, self.max_chain)

    def iter_legal_actions(self, state: SynthState) -> Iterator[Action]:
        for production in self.next_productions(state):
            if production == "Commit":
                yield Action("Commit")
            else:
                for value in SLOT_VALUES[production]:
                    yield Action(production, (value,))

    def action_key(self, action: Action) -> tuple[Any, ...]:
        index = _SLOT_INDEX[action.production]
        return (PRODUCTIONS.index(action.production), tuple(index[v] for v in action.params))

    def check_action(self, state: SynthState, action: Action) -> None:
        super().check_action(state, action)
        advance_pending(state.pending, action, self.max_chain)

    def transition(self, state: SynthState, action: Action) -> SynthState:
        pending, committed = advance_pending(state.pending, action, self.max_chain)
        pp = state.pp + (committed,) if committed is not None else state.pp
        return SynthState(pp=pp, spec=state.spec, step_count=state.step_count + 1, pending=pending)

    # -- REPL ------------------------------------------------------------------

    def execute(
        self, state: SynthState, parent: Any | None = None, action: Action | None = None
    ) -> StringReplState:
        if parent is not None and action is not None:
            return apply_string_action(parent, action, self.max_chain)
        history = tuple(program_actions(EditProgram(tuple(state.pp)))) + tuple(
            pending_actions(state.pending)
        )
        last_action = history[-1] if history else None
        examples = list(initial_repl(state.spec).examples)
        try:
            for expr in state.pp:
                examples = [_commit(e, expr, eval_expr(expr, e.input)) for e in examples]
            examples = [replace(e, scratch=_scratch(state.pending, e.input)) for e in examples]
        except NoMatch as exc:
            return StringReplState(
                examples=tuple(examples),
                pending=state.pending,
                error=str(exc),
                last_action=last_action,
                history=history,
            )
        return StringReplState(
            examples=tuple(examples),
            pending=state.pending,
            last_action=last_action,
            history=history,
        )

    def satisfied(self, state: SynthState, view: StringReplState) -> bool:
        return satisfies_string(view, state.spec)

    def dead(self, state: SynthState, view: StringReplState) -> bool:
        return view.error is not None or not prefix_consistent(view)

    def quality(self, state: SynthState, view: StringReplState) -> float:
        """Negative total edit distance between committed strings and targets."""
        return -float(sum(levenshtein(e.committed, e.output) for e in view.examples))

    def best_program(self, state: SynthState, view: Any) -> str:
        return self.format_program(EditProgram(tuple(state.pp)))

    # -- text and specs --------------------------------------------------------------

    def format_action(self, action: Action) -> str:
        return format_token(action)

    def parse_action(self, text: str) -> Action:
        actions = parse_tokens(text)
        if len(actions) != 1:
            raise ProgramParseError(f"Expected exactly one token in {text!r}")
        return actions[0]

    def format_program(self, program: EditProgram) -> str:
        return format_tokens(program_actions(program))

    def parse_program(self, text: str) -> EditProgram:
        """Replay a token trace syntactically into a program.

        Raises:
            ProgramParseError: If the trace does not end on a Commit
        """
        pending: PendingExpr | None = None
        expressions: list[Expr] = []
        for action in parse_tokens(text):
            try:
                pending, committed = advance_pending(pending, action, max_chain=10**6)
            except IllegalActionError as exc:
                raise ProgramParseError(str(exc)) from exc
            if committed is not None:
                expressions.append(committed)
        if pending is not None:
            raise ProgramParseError("Trace ends inside an uncommitted expression")
        return EditProgram(tuple(expressions))

    def spec_id(self, spec: StringSpec) -> str:
        payload = json.dumps(spec.examples, ensure_ascii=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def spec_to_json(self, spec: StringSpec) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "examples": [{"input": i, "output": o} for i, o in spec.examples]
        }
        if spec.test:
            payload["test"] = [{"input": i, "output": o} for i, o in spec.test]
        return payload

    def spec_from_json(self, payload: dict[str, Any]) -> StringSpec:
        try:
            examples = tuple((str(e["input"]), str(e["output"])) for e in payload["examples"])
            test = tuple((str(e["input"]), str(e["output"])) for e in payload.get("test", []))
        except (KeyError, TypeError) as exc:
            raise ProgramParseError(f"Malformed string spec: {exc}") from exc
        return StringSpec(examples=examples, test=test)

    def fingerprint(self) -> str:
        grammar = {
            "name": self.name,
            "max_chain": self.max_chain,
            "slots": {p: [str(v) for v in values] for p, values in SLOT_VALUES.items()},
        }
        return hashlib.sha256(json.dumps(grammar, sort_keys=True).encode()).hexdigest()

    # -- data generation ------------------------------------------------------------

    def sample_program(self, config: Any, rng: np.random.Generator) -> EditProgram:
        return random_program(
            rng, max_expressions=config.max_expressions, max_chain=min(config.max_chain, self.max_chain)
        )

    def make_spec(
        self, program: EditProgram, config: Any, rng: np.random.Generator, attempts: int = 20
    ) -> StringSpec | None:
        """Sample inputs the program runs on; None when no acceptable input set was found."""
        cap = config.string_length_cap
        examples: list[tuple[str, str]] = []
        for _ in range(attempts):
            if len(examples) == config.examples_per_spec:
                break
            text = random_input(rng, cap)
            try:
                output = eval_program(program, text)
            except NoMatch:
                continue
            if output and len(output) <= cap:
                examples.append((text, output))
        if len(examples) < config.examples_per_spec:
            return None
        return StringSpec(examples=tuple(examples))

    def recover_actions(self, program: EditProgram) -> list[Action]:
        return program_actions(program)
