"""Constructive solid geometry languages and their rendering REPL.

Programs are trees of primitives combined by union and difference. The REPL
renders every scope entry to its own boolean grid. Lattice coordinates live
in a world box [0, 32); lattice value ``c`` maps to ``c + 0.5`` and pixel
``i`` samples the world at ``(i + 0.5) * 32 / R``. Membership tests are done
on integers scaled by ``2R`` so the vectorised rasteriser and the scalar
:func:`point_in` agree bit for bit.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import re
from collections.abc import Iterator, Sequence
from dataclasses import astuple, dataclass, fields
from typing import Any, ClassVar

import numpy as np

from replsynth.mdp import (
    Action,
    Domain,
    IllegalActionError,
    SynthesisError,
    SynthState,
)

logger = logging.getLogger(__name__)

WORLD = 32
COMBINATORS = ("union", "difference")


class InvalidDimension(SynthesisError):
    """A node of the wrong dimensionality was found in a tree."""


class DimensionMismatch(SynthesisError):
    """Two grids that must share a shape do not."""


class CsgParseError(SynthesisError):
    """Text is not valid CSG concrete syntax."""


# -- expression types ---------------------------------------------------------------


@dataclass(frozen=True)
class Circle:
    radius: int
    x: int
    y: int

    name: ClassVar[str] = "circle"
    dimension: ClassVar[int] = 2


@dataclass(frozen=True)
class Quadrilateral:
    """Rectangle centred on ``(x, y)``, rotated by ``angle`` degrees (0 or 45)."""

    x: int
    y: int
    w: int
    h: int
    angle: int = 0

    name: ClassVar[str] = "quadrilateral"
    dimension: ClassVar[int] = 2


@dataclass(frozen=True)
class Sphere:
    radius: int
    x: int
    y: int
    z: int

    name: ClassVar[str] = "sphere"
    dimension: ClassVar[int] = 3


@dataclass(frozen=True)
class Cube:
    """Axis-aligned box between two corners."""

    x0: int
    y0: int
    z0: int
    x1: int
    y1: int
    z1: int

    name: ClassVar[str] = "cube"
    dimension: ClassVar[int] = 3


@dataclass(frozen=True)
class Cylinder:
    """Closed cylinder whose axis runs from corner 0 to corner 1."""

    x0: int
    y0: int
    z0: int
    x1: int
    y1: int
    z1: int
    radius: int

    name: ClassVar[str] = "cylinder"
    dimension: ClassVar[int] = 3


@dataclass(frozen=True)
class Union:
    left: CsgExpr
    right: CsgExpr

    name: ClassVar[str] = "union"
    symbol: ClassVar[str] = "+"


@dataclass(frozen=True)
class Difference:
    left: CsgExpr
    right: CsgExpr

    name: ClassVar[str] = "difference"
    symbol: ClassVar[str] = "-"


Primitive = Circle | Quadrilateral | Sphere | Cube | Cylinder
Combinator = Union | Difference
CsgExpr = Primitive | Combinator

PRIMITIVES: dict[str, type] = {
    cls.name: cls for cls in (Circle, Quadrilateral, Sphere, Cube, Cylinder)
}
PRIMITIVES_2D = ("circle", "quadrilateral")
PRIMITIVES_3D = ("sphere", "cube", "cylinder")
ANGLES = (0, 45)


def is_combinator(expr: CsgExpr) -> bool:
    return isinstance(expr, Union | Difference)


def leaves(expr: CsgExpr) -> int:
    """Number of primitives in a tree."""
    if is_combinator(expr):
        return leaves(expr.left) + leaves(expr.right)
    return 1


def dimension_of(expr: CsgExpr) -> int:
    """Dimensionality of a tree.

    Raises:
        InvalidDimension: If 2D and 3D nodes are mixed
    """
    if is_combinator(expr):
        left, right = dimension_of(expr.left), dimension_of(expr.right)
        if left != right:
            raise InvalidDimension(f"Mixed {left}D and {right}D nodes in {format_expr(expr)}")
        return left
    return expr.dimension


# -- rendering ------------------------------------------------------------------------


def _offsets(c: int, resolution: int) -> np.ndarray:
    """Scaled signed distance from lattice value `c` to every sample centre along one axis."""
    centres = (2 * np.arange(resolution, dtype=np.int64) + 1) * WORLD
    return centres - (2 * c + 1) * resolution


def _primitive_mask(shape: Primitive, resolution: int) -> np.ndarray:
    n = resolution
    if isinstance(shape, Circle):
        if shape.radius <= 0:
            return np.zeros((n, n), dtype=bool)
        dx = _offsets(shape.x, n)[None, :]
        dy = _offsets(shape.y, n)[:, None]
        return dx * dx + dy * dy <= (2 * n * shape.radius) ** 2

    if isinstance(shape, Quadrilateral):
        if shape.w <= 0 or shape.h <= 0:
            return np.zeros((n, n), dtype=bool)
        dx = _offsets(shape.x, n)[None, :]
        dy = _offsets(shape.y, n)[:, None]
        if shape.angle == 0:
            return (dx * dx <= (n * shape.w) ** 2) & (dy * dy <= (n * shape.h) ** 2)
        u = dx + dy
        v = dy - dx
        return (u * u <= 2 * (n * shape.w) ** 2) & (v * v <= 2 * (n * shape.h) ** 2)

    if isinstance(shape, Sphere):
        if shape.radius <= 0:
            return np.zeros((n, n, n), dtype=bool)
        dx = _offsets(shape.x, n)[:, None, None]
        dy = _offsets(shape.y, n)[None, :, None]
        dz = _offsets(shape.z, n)[None, None, :]
        return dx * dx + dy * dy + dz * dz <= (2 * n * shape.radius) ** 2

    if isinstance(shape, Cube):
        if shape.x1 <= shape.x0 or shape.y1 <= shape.y0 or shape.z1 <= shape.z0:
            return np.zeros((n, n, n), dtype=bool)
        inside_x = (_offsets(shape.x0, n) >= 0) & (_offsets(shape.x1, n) <= 0)
        inside_y = (_offsets(shape.y0, n) >= 0) & (_offsets(shape.y1, n) <= 0)
        inside_z = (_offsets(shape.z0, n) >= 0) & (_offsets(shape.z1, n) <= 0)
        return inside_x[:, None, None] & inside_y[None, :, None] & inside_z[None, None, :]

    if isinstance(shape, Cylinder):
        ex, ey, ez = shape.x1 - shape.x0, shape.y1 - shape.y0, shape.z1 - shape.z0
        axis_sq = ex * ex + ey * ey + ez * ez
        if shape.radius <= 0 or axis_sq == 0:
            return np.zeros((n, n, n), dtype=bool)
        wx = _offsets(shape.x0, n)[:, None, None]
        wy = _offsets(shape.y0, n)[None, :, None]
        wz = _offsets(shape.z0, n)[None, None, :]
        along = wx * ex + wy * ey + wz * ez
        dist_sq = wx * wx + wy * wy + wz * wz
        within_caps = (along >= 0) & (along <= 2 * n * axis_sq)
        within_radius = dist_sq * axis_sq - along * along <= (2 * n * shape.radius) ** 2 * axis_sq
        return within_caps & within_radius

    raise InvalidDimension(f"Unknown primitive {shape!r}")


def _render(expr: CsgExpr, resolution: int, dimension: int) -> np.ndarray:
    if isinstance(expr, Union):
        return _render(expr.left, resolution, dimension) | _render(
            expr.right, resolution, dimension
        )
    if isinstance(expr, Difference):
        return _render(expr.left, resolution, dimension) & ~_render(
            expr.right, resolution, dimension
        )
    if expr.dimension != dimension:
        raise InvalidDimension(f"{expr.name} is {expr.dimension}D, expected {dimension}D")
    return _primitive_mask(expr, resolution)


def render2d(expr: CsgExpr, resolution: int = 64) -> np.ndarray:
    """Rasterise a 2D tree to a ``[y, x]`` boolean canvas.

    Raises:
        InvalidDimension: If the tree contains 3D nodes
    """
    return _render(expr, resolution, 2)


def render3d(expr: CsgExpr, resolution: int = 32) -> np.ndarray:
    """Voxelise a 3D tree to an ``[x, y, z]`` boolean grid.

    Raises:
        InvalidDimension: If the tree contains 2D nodes
    """
    return _render(expr, resolution, 3)


def point_in(expr: CsgExpr, index: Sequence[int], resolution: int) -> bool:
    """Scalar membership test for one sample centre.

    `index` is ``(row, col)`` for 2D canvases and ``(i, j, k)`` for voxels,
    matching the array layout of :func:`render2d` and :func:`render3d`.
    """
    if isinstance(expr, Union):
        return point_in(expr.left, index, resolution) or point_in(expr.right, index, resolution)
    if isinstance(expr, Difference):
        return point_in(expr.left, index, resolution) and not point_in(
            expr.right, index, resolution
        )

    n = resolution

    def offset(c: int, i: int) -> int:
        return (2 * i + 1) * WORLD - (2 * c + 1) * n

    if isinstance(expr, Circle):
        row, col = index
        dx, dy = offset(expr.x, col), offset(expr.y, row)
        return expr.radius > 0 and dx * dx + dy * dy <= (2 * n * expr.radius) ** 2
    if isinstance(expr, Quadrilateral):
        if expr.w <= 0 or expr.h <= 0:
            return False
        row, col = index
        dx, dy = offset(expr.x, col), offset(expr.y, row)
        if expr.angle == 0:
            return abs(dx) <= n * expr.w and abs(dy) <= n * expr.h
        return (dx + dy) ** 2 <= 2 * (n * expr.w) ** 2 and (dy - dx) ** 2 <= 2 * (n * expr.h) ** 2
    if isinstance(expr, Sphere):
        i, j, k = index
        d = (offset(expr.x, i), offset(expr.y, j), offset(expr.z, k))
        return expr.radius > 0 and sum(v * v for v in d) <= (2 * n * expr.radius) ** 2
    if isinstance(expr, Cube):
        i, j, k = index
        lows = (expr.x0, expr.y0, expr.z0)
        highs = (expr.x1, expr.y1, expr.z1)
        return all(
            lo < hi and offset(lo, p) >= 0 and offset(hi, p) <= 0
            for lo, hi, p in zip(lows, highs, (i, j, k), strict=True)
        )
    if isinstance(expr, Cylinder):
        i, j, k = index
        e = (expr.x1 - expr.x0, expr.y1 - expr.y0, expr.z1 - expr.z0)
        axis_sq = sum(v * v for v in e)
        if expr.radius <= 0 or axis_sq == 0:
            return False
        w = (offset(expr.x0, i), offset(expr.y0, j), offset(expr.z0, k))
        along = sum(a * b for a, b in zip(w, e, strict=True))
        if along < 0 or along > 2 * n * axis_sq:
            return False
        return sum(v * v for v in w) * axis_sq - along * along <= (
            2 * n * expr.radius
        ) ** 2 * axis_sq
    raise InvalidDimension(f"Unknown node {expr!r}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean grids; two empty grids score 1.

    Raises:
        DimensionMismatch: If the shapes differ
    """
    if a.shape != b.shape:
        raise DimensionMismatch(f"Cannot compare grids of shape {a.shape} and {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def csg_repl(pp: Sequence[CsgExpr], resolution: int, dimension: int) -> tuple[np.ndarray, ...]:
    """One canvas per scope entry, in scope order."""
    return tuple(_render(p, resolution, dimension) for p in pp)


def satisfies(canvases: Sequence[np.ndarray], target: np.ndarray) -> bool:
    """True iff some canvas equals the target bit for bit."""
    return any(np.array_equal(c, target) for c in canvases)


# -- concrete syntax ------------------------------------------------------------------


def format_primitive(shape: Primitive) -> str:
    args = ", ".join(f"{f.name}={getattr(shape, f.name)}" for f in fields(shape))
    return f"{shape.name}({args})"


def format_expr(expr: CsgExpr) -> str:
    """Concrete syntax, e.g. ``(circle(radius=4, x=8, y=8) - quadrilateral(...))``."""
    if is_combinator(expr):
        return f"({format_expr(expr.left)} {expr.symbol} {format_expr(expr.right)})"
    return format_primitive(expr)


_TOKEN = re.compile(r"\s*(?:(?P<call>[a-z]+\([^()]*\))|(?P<sym>[()+\-]))")
_ARG = re.compile(r"^\s*([a-z0-9]+)\s*=\s*(-?\d+)\s*$")


def parse_primitive(text: str) -> Primitive:
    """Parse ``name(k=v, ...)``.

    Raises:
        CsgParseError: On unknown names or a wrong keyword set
    """
    match = re.fullmatch(r"\s*([a-z]+)\((.*)\)\s*", text)
    if not match or match.group(1) not in PRIMITIVES:
        raise CsgParseError(f"Not a primitive: {text!r}")
    cls = PRIMITIVES[match.group(1)]
    values: dict[str, int] = {}
    body = match.group(2).strip()
    for part in body.split(",") if body else []:
        arg = _ARG.match(part)
        if not arg:
            raise CsgParseError(f"Bad argument {part!r} in {text!r}")
        values[arg.group(1)] = int(arg.group(2))
    expected = [f.name for f in fields(cls)]
    if sorted(values) != sorted(expected):
        raise CsgParseError(f"{cls.name} takes {', '.join(expected)}; got {', '.join(values)}")
    return cls(**values)


def parse_expr(text: str) -> CsgExpr:
    """Inverse of :func:`format_expr`.

    Raises:
        CsgParseError: If the text is not a single well-formed tree
    """
    tokens: list[tuple[str, str]] = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if not match or match.end() == pos:
            raise CsgParseError(f"Unexpected input at offset {pos}: {text[pos:pos + 20]!r}")
        kind = "call" if match.group("call") else "sym"
        tokens.append((kind, match.group(kind)))
        pos = match.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def parse(i: int) -> tuple[CsgExpr, int]:
        if i >= len(tokens):
            raise CsgParseError("Unexpected end of expression")
        kind, value = tokens[i]
        if kind == "call":
            return parse_primitive(value), i + 1
        if value != "(":
            raise CsgParseError(f"Unexpected {value!r}")
        left, i = parse(i + 1)
        if i >= len(tokens) or tokens[i] not in (("sym", "+"), ("sym", "-")):
            raise CsgParseError("Expected '+' or '-'")
        op = tokens[i][1]
        right, i = parse(i + 1)
        if i >= len(tokens) or tokens[i] != ("sym", ")"):
            raise CsgParseError("Expected ')'")
        node = Union(left, right) if op == "+" else Difference(left, right)
        return node, i + 1

    expr, end = parse(0)
    if end != len(tokens):
        raise CsgParseError(f"Trailing input after {format_expr(expr)}")
    dimension_of(expr)
    return expr


# -- export formats -------------------------------------------------------------------


def _runs(flat: np.ndarray) -> str:
    values = flat.astype(np.uint8)
    if values.size == 0:
        return ""
    edges = np.flatnonzero(np.diff(values)) + 1
    starts = np.concatenate(([0], edges))
    lengths = np.diff(np.concatenate((starts, [values.size])))
    return " ".join(f"{values[s]}:{n}" for s, n in zip(starts, lengths, strict=True))


def _unruns(text: str, size: int) -> np.ndarray:
    out: list[np.ndarray] = []
    for run in text.split():
        value, _, count = run.partition(":")
        out.append(np.full(int(count), int(value) != 0, dtype=bool))
    flat = np.concatenate(out) if out else np.zeros(0, dtype=bool)
    if flat.size != size:
        raise CsgParseError(f"Run-length data covers {flat.size} cells, expected {size}")
    return flat


def to_pgm(canvas: np.ndarray) -> str:
    """Plain (P2) grey-map with maxval 1."""
    height, width = canvas.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in canvas)
    return f"P2\n{width} {height}\n1\n{rows}\n"


def from_pgm(text: str) -> np.ndarray:
    """Read a plain grey-map; any non-zero value is occupied.

    Raises:
        CsgParseError: If the header or pixel count is wrong
    """
    words = [w for line in text.splitlines() for w in line.split("#", 1)[0].split()]
    if len(words) < 4 or words[0] != "P2":
        raise CsgParseError("Not a plain PGM (P2) image")
    width, height = int(words[1]), int(words[2])
    pixels = [int(w) for w in words[4:]]
    if len(pixels) != width * height:
        raise CsgParseError(f"Expected {width * height} pixels, found {len(pixels)}")
    return np.array(pixels, dtype=np.int64).reshape(height, width) != 0


def voxels_to_text(grid: np.ndarray) -> str:
    """``V <size>`` header followed by ``value:count`` runs of the x-major flattening."""
    return f"V {grid.shape[0]}\n{_runs(grid.reshape(-1))}\n"


def voxels_from_text(text: str) -> np.ndarray:
    header, _, body = text.strip().partition("\n")
    parts = header.split()
    if len(parts) != 2 or parts[0] != "V":
        raise CsgParseError("Voxel dump must start with 'V <size>'")
    size = int(parts[1])
    return _unruns(body, size**3).reshape(size, size, size)


# -- action space ---------------------------------------------------------------------


def default_lattice(dimension: int) -> tuple[int, ...]:
    """Default lattice: 0..30 step 2 in 2D, 0..28 step 4 in 3D."""
    return tuple(range(0, 31, 2)) if dimension == 2 else tuple(range(0, 29, 4))


def param_slots(
    production: str, coords: Sequence[int], sizes: Sequence[int]
) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, values)`` pairs a primitive's parameters range over."""
    coords, sizes = tuple(coords), tuple(sizes)
    layouts: dict[str, list[tuple[str, tuple[int, ...]]]] = {
        "circle": [("radius", sizes), ("x", coords), ("y", coords)],
        "quadrilateral": [("x", coords), ("y", coords), ("w", sizes), ("h", sizes), ("angle", ANGLES)],
        "sphere": [("radius", sizes), ("x", coords), ("y", coords), ("z", coords)],
        "cube": [(axis, coords) for axis in ("x0", "y0", "z0", "x1", "y1", "z1")],
        "cylinder": [(axis, coords) for axis in ("x0", "y0", "z0", "x1", "y1", "z1")]
        + [("radius", sizes)],
    }
    if production not in layouts:
        raise KeyError(production)
    return layouts[production]


def action_space_size(
    dimension: int,
    scope_size: int,
    coords: Sequence[int] | None = None,
    sizes: Sequence[int] | None = None,
    primitives: Sequence[str] | None = None,
) -> int:
    """Exact number of legal actions for a scope of `scope_size` entries."""
    if scope_size < 0:
        raise ValueError("scope_size must be non-negative")
    coords = tuple(coords) if coords is not None else default_lattice(dimension)
    sizes = tuple(sizes) if sizes is not None else default_lattice(dimension)
    if primitives is None:
        primitives = PRIMITIVES_2D if dimension == 2 else PRIMITIVES_3D
    terminals = sum(
        math.prod(len(values) for _, values in param_slots(p, coords, sizes)) for p in primitives
    )
    return terminals + len(COMBINATORS) * scope_size * (scope_size - 1)


# -- domain ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CsgSpec:
    """Target grid, plus the program that produced it when known."""

    target: np.ndarray
    program: CsgExpr | None = None


def _catalan(n: int) -> int:
    return math.comb(2 * n, n) // (n + 1)


class CsgDomain(Domain):
    """2D or 3D CSG over a quantised parameter lattice."""

    def __init__(
        self,
        dimension: int = 2,
        resolution: int | None = None,
        coords: Sequence[int] | None = None,
        sizes: Sequence[int] | None = None,
        primitives: Sequence[str] | None = None,
        horizon: int | None = None,
        max_objects: int = 13,
    ) -> None:
        if dimension not in (2, 3):
            raise InvalidDimension(f"dimension must be 2 or 3, got {dimension}")
        allowed = PRIMITIVES_2D if dimension == 2 else PRIMITIVES_3D
        primitives = tuple(primitives) if primitives else allowed
        for p in primitives:
            if p not in allowed:
                raise InvalidDimension(f"{p} is not a {dimension}D primitive")

        self.dimension = dimension
        self.name = f"csg{dimension}d"
        self.resolution = resolution or (64 if dimension == 2 else 32)
        self.coords = tuple(sorted(coords)) if coords else default_lattice(dimension)
        self.sizes = tuple(sorted(sizes)) if sizes else default_lattice(dimension)
        self.primitives = tuple(p for p in allowed if p in primitives)
        self.productions = self.primitives + COMBINATORS
        self.horizon = horizon or 2 * max_objects - 1
        self._slots = {p: param_slots(p, self.coords, self.sizes) for p in self.primitives}

    @classmethod
    def from_config(cls, config: Any, max_objects: int = 13) -> CsgDomain:
        return cls(
            dimension=3 if config.name == "csg3d" else 2,
            resolution=config.resolution,
            coords=config.coords,
            sizes=config.sizes,
            primitives=config.primitives,
            horizon=config.horizon,
            max_objects=max_objects,
        )

    # -- grammar -----------------------------------------------------------

    def arity(self, production: str) -> int:
        return 2 if production in COMBINATORS else 0

    def slots(self, production: str) -> list[tuple[str, tuple[int, ...]]]:
        return self._slots[production]

    def iter_legal_actions(self, state: SynthState) -> Iterator[Action]:
        for production in self.primitives:
            lattices = [values for _, values in self._slots[production]]
            for params in itertools.product(*lattices):
                yield Action(production, tuple(params))
        n = len(state.pp)
        for production in COMBINATORS:
            for i, j in itertools.permutations(range(n), 2):
                yield Action(production, (), (i, j))

    def action_space_size(self, scope_size: int) -> int:
        return action_space_size(
            self.dimension, scope_size, self.coords, self.sizes, self.primitives
        )

    def check_action(self, state: SynthState, action: Action) -> None:
        super().check_action(state, action)
        if action.production in COMBINATORS:
            if action.params:
                raise IllegalActionError(f"{action.production} takes no parameters", action=action)
            return
        slots = self._slots[action.production]
        if len(action.params) != len(slots):
            raise IllegalActionError(
                f"{action.production} takes {len(slots)} parameters", action=action
            )
        for value, (slot, values) in zip(action.params, slots, strict=True):
            if value not in values:
                raise IllegalActionError(
                    f"{action.production}.{slot}={value} is off the lattice", action=action
                )

    def build(self, action: Action, children: Sequence[Any]) -> CsgExpr:
        if action.production == "union":
            return Union(children[0], children[1])
        if action.production == "difference":
            return Difference(children[0], children[1])
        return PRIMITIVES[action.production](*action.params)

    # -- REPL ------------------------------------------------------------------

    def render(self, expr: CsgExpr) -> np.ndarray:
        return _render(expr, self.resolution, self.dimension)

    def empty_canvas(self) -> np.ndarray:
        return np.zeros((self.resolution,) * self.dimension, dtype=bool)

    def execute(
        self, state: SynthState, parent: Any | None = None, action: Action | None = None
    ) -> tuple[np.ndarray, ...]:
        if parent is None or action is None:
            return csg_repl(state.pp, self.resolution, self.dimension)
        if action.production in COMBINATORS:
            i, j = action.operands
            a, b = parent[i], parent[j]
            combined = a | b if action.production == "union" else a & ~b
            kept = tuple(c for k, c in enumerate(parent) if k not in (i, j))
            return kept + (combined,)
        return tuple(parent) + (self.render(state.pp[-1]),)

    def satisfied(self, state: SynthState, view: Any) -> bool:
        return satisfies(view, state.spec.target)

    def quality(self, state: SynthState, view: Any) -> float:
        """Best IoU of any scope entry against the target."""
        if not view:
            return iou(self.empty_canvas(), state.spec.target)
        return max(iou(c, state.spec.target) for c in view)

    def best_index(self, state: SynthState, view: Any) -> int | None:
        if not view:
            return None
        scores = [iou(c, state.spec.target) for c in view]
        return int(np.argmax(scores))

    def best_program(self, state: SynthState, view: Any) -> str:
        index = self.best_index(state, view)
        return "" if index is None else format_expr(state.pp[index])

    # -- text and specs --------------------------------------------------------------

    def format_action(self, action: Action) -> str:
        if action.production in COMBINATORS:
            i, j = action.operands
            return f"{action.production}({i}, {j})"
        return format_primitive(self.build(action, ()))

    def parse_action(self, text: str) -> Action:
        match = re.fullmatch(r"\s*(union|difference)\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*", text)
        if match:
            return Action(match.group(1), (), (int(match.group(2)), int(match.group(3))))
        shape = parse_primitive(text)
        return Action(shape.name, astuple(shape))

    def format_program(self, program: Any) -> str:
        return format_expr(program)

    def parse_program(self, text: str) -> CsgExpr:
        expr = parse_expr(text)
        if dimension_of(expr) != self.dimension:
            raise InvalidDimension(f"Expected a {self.dimension}D program")
        return expr

    def spec_from_program(self, program: CsgExpr) -> CsgSpec:
        return CsgSpec(target=self.render(program), program=program)

    def spec_from_grid(self, grid: np.ndarray) -> CsgSpec:
        expected = (self.resolution,) * self.dimension
        if grid.shape != expected:
            raise DimensionMismatch(f"Spec grid has shape {grid.shape}, expected {expected}")
        return CsgSpec(target=grid.astype(bool))

    def spec_id(self, spec: CsgSpec) -> str:
        digest = hashlib.sha256(spec.target.astype(np.uint8).tobytes())
        digest.update(str(spec.target.shape).encode())
        return digest.hexdigest()[:16]

    def spec_to_json(self, spec: CsgSpec) -> dict[str, Any]:
        if spec.program is not None:
            return {"program": format_expr(spec.program)}
        return {"shape": list(spec.target.shape), "runs": _runs(spec.target.reshape(-1))}

    def spec_from_json(self, payload: dict[str, Any]) -> CsgSpec:
        if "program" in payload:
            return self.spec_from_program(self.parse_program(payload["program"]))
        shape = tuple(payload["shape"])
        grid = _unruns(payload["runs"], math.prod(shape)).reshape(shape)
        return self.spec_from_grid(grid)

    def fingerprint(self) -> str:
        grammar = {
            "name": self.name,
            "resolution": self.resolution,
            "coords": self.coords,
            "sizes": self.sizes,
            "productions": self.productions,
        }
        payload = json.dumps(grammar, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    # -- data generation ------------------------------------------------------------

    def sample_primitive(self, rng: np.random.Generator) -> Primitive:
        """Uniform primitive with non-degenerate parameters."""
        production = self.primitives[int(rng.integers(len(self.primitives)))]
        positive = [s for s in self.sizes if s > 0] or list(self.sizes)

        def pick(values: Sequence[int]) -> int:
            return int(values[int(rng.integers(len(values)))])

        if production in ("cube", "cylinder"):
            corners: list[tuple[int, int]] = []
            for _ in range(3):
                a, b = sorted(rng.choice(len(self.coords), size=2, replace=False))
                corners.append((int(self.coords[a]), int(self.coords[b])))
            low = [c[0] for c in corners]
            high = [c[1] for c in corners]
            if production == "cube":
                return Cube(*low, *high)
            if rng.random() < 0.5:
                low, high = high, low
            return Cylinder(*low, *high, radius=pick(positive))

        values = []
        for slot, lattice in self._slots[production]:
            values.append(pick(positive) if slot in ("radius", "w", "h") else pick(lattice))
        return PRIMITIVES[production](*values)

    def sample_tree(self, n_leaves: int, rng: np.random.Generator) -> CsgExpr:
        """Random tree with exactly `n_leaves` primitives, uniform over binary tree shapes."""
        if n_leaves == 1:
            return self.sample_primitive(rng)
        weights = np.array(
            [_catalan(k - 1) * _catalan(n_leaves - k - 1) for k in range(1, n_leaves)],
            dtype=np.float64,
        )
        left_size = 1 + int(rng.choice(n_leaves - 1, p=weights / weights.sum()))
        left = self.sample_tree(left_size, rng)
        right = self.sample_tree(n_leaves - left_size, rng)
        return Union(left, right) if rng.random() < 0.5 else Difference(left, right)

    def sample_program(self, config: Any, rng: np.random.Generator) -> CsgExpr:
        if config.exact_objects:
            n_leaves = config.max_objects
        else:
            n_leaves = int(rng.integers(1, config.max_objects + 1))
        return self.sample_tree(n_leaves, rng)

    def make_spec(
        self, program: CsgExpr, config: Any, rng: np.random.Generator
    ) -> CsgSpec | None:
        spec = self.spec_from_program(program)
        if not spec.target.any():
            return None
        return spec

    def recover_actions(self, program: CsgExpr) -> list[Action]:
        """Post-order, left child first; combinators always take the last two scope entries."""
        actions: list[Action] = []

        def visit(expr: CsgExpr, scope_size: int) -> int:
            if is_combinator(expr):
                scope_size = visit(expr.left, scope_size)
                scope_size = visit(expr.right, scope_size)
                actions.append(Action(expr.name, (), (scope_size - 2, scope_size - 1)))
                return scope_size - 1
            actions.append(Action(expr.name, astuple(expr)))
            return scope_size + 1

        visit(program, 0)
        return actions
