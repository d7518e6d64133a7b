"""Tests for the CSG languages: rendering, IoU, concrete syntax and the scope REPL."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from replsynth.csg import (
    Circle,
    CsgDomain,
    CsgParseError,
    Cube,
    Cylinder,
    Difference,
    DimensionMismatch,
    InvalidDimension,
    Quadrilateral,
    Sphere,
    Union,
    action_space_size,
    format_expr,
    from_pgm,
    iou,
    parse_expr,
    point_in,
    render2d,
    render3d,
    to_pgm,
    voxels_from_text,
    voxels_to_text,
)
from replsynth.mdp import (
    Action,
    ArityMismatch,
    IllegalActionError,
    OperandOutOfRange,
    apply_action,
    initial_state,
    legal_actions,
    replay,
)

HOUSE = Union(
    Quadrilateral(x=16, y=20, w=12, h=10),
    Difference(Circle(radius=6, x=16, y=10), Quadrilateral(x=16, y=4, w=14, h=6)),
)


def oracle_grid(expr, resolution: int, dimension: int) -> np.ndarray:
    """Per-sample membership, one scalar test at a time."""
    shape = (resolution,) * dimension
    grid = np.zeros(shape, dtype=bool)
    for index in itertools.product(range(resolution), repeat=dimension):
        grid[index] = point_in(expr, index, resolution)
    return grid


def test_rasteriser_matches_point_oracle_2d() -> None:
    domain = CsgDomain(dimension=2, resolution=16)
    rng = np.random.default_rng(0)

    for _ in range(300):
        expr = domain.sample_tree(int(rng.integers(1, 6)), rng)
        assert np.array_equal(render2d(expr, 16), oracle_grid(expr, 16, 2)), format_expr(expr)


def test_rasteriser_matches_point_oracle_3d() -> None:
    domain = CsgDomain(dimension=3, resolution=8)
    rng = np.random.default_rng(1)

    for _ in range(60):
        expr = domain.sample_tree(int(rng.integers(1, 5)), rng)
        assert np.array_equal(render3d(expr, 8), oracle_grid(expr, 8, 3)), format_expr(expr)


@pytest.mark.slow
def test_rasteriser_matches_point_oracle_many() -> None:
    for dimension, resolution in ((2, 32), (3, 8)):
        domain = CsgDomain(dimension=dimension, resolution=resolution)
        rng = np.random.default_rng(dimension)
        for _ in range(1000):
            expr = domain.sample_tree(int(rng.integers(1, 8)), rng)
            assert np.array_equal(
                domain.render(expr), oracle_grid(expr, resolution, dimension)
            ), format_expr(expr)


def test_circle_occupancy_is_close_to_its_area() -> None:
    canvas = render2d(Circle(radius=8, x=16, y=16), 64)
    expected = np.pi * 8**2 / 32**2

    assert canvas.shape == (64, 64)
    assert abs(canvas.mean() - expected) <= 2 / 64


def test_box_occupancy_is_resolution_stable() -> None:
    box = Quadrilateral(x=14, y=14, w=10, h=6)
    fractions = [render2d(box, r).mean() for r in (16, 32, 64)]

    for fraction, resolution in zip(fractions, (16, 32, 64), strict=True):
        assert abs(fraction - 60 / 32**2) <= 2 / resolution


def test_rotated_square_is_symmetric_about_its_centre() -> None:
    canvas = render2d(Quadrilateral(x=15, y=15, w=8, h=8, angle=45), 64)
    # Pixel i samples (i + 0.5) / 2, so the centre 15.5 sits between pixels 30 and 31.
    window = canvas[:62, :62]

    assert canvas.any()
    assert not canvas[62:].any() and not canvas[:, 62:].any()
    assert np.array_equal(canvas, canvas.T)
    assert np.array_equal(window, window[::-1, ::-1])


def test_difference_removes_the_subtrahend() -> None:
    whole = render2d(Circle(radius=8, x=16, y=16), 64)
    hole = render2d(Circle(radius=4, x=16, y=16), 64)
    ring = render2d(Difference(Circle(radius=8, x=16, y=16), Circle(radius=4, x=16, y=16)), 64)

    assert np.array_equal(ring, whole & ~hole)
    assert not (ring & hole).any()


def test_degenerate_shapes_render_empty() -> None:
    assert not render3d(Cube(8, 8, 8, 4, 12, 12), 32).any()
    assert not render3d(Cylinder(4, 4, 4, 4, 4, 4, radius=4), 32).any()
    assert not render2d(Circle(radius=0, x=8, y=8), 64).any()


def test_sphere_and_cylinder_render_inside_the_grid() -> None:
    sphere = render3d(Sphere(radius=8, x=16, y=16, z=16), 32)
    cylinder = render3d(Cylinder(4, 16, 16, 28, 16, 16, radius=4), 32)

    assert sphere[16, 16, 16]
    assert not sphere[0, 0, 0]
    assert cylinder[16, 16, 16]
    assert not cylinder[0, 16, 16]


def test_mixed_dimensions_are_rejected() -> None:
    with pytest.raises(InvalidDimension):
        render2d(Sphere(radius=4, x=8, y=8, z=8), 64)
    with pytest.raises(InvalidDimension):
        parse_expr("(circle(radius=4, x=8, y=8) + sphere(radius=4, x=8, y=8, z=8))")


def test_iou_properties() -> None:
    a = render2d(Circle(radius=8, x=12, y=16), 64)
    b = render2d(Circle(radius=8, x=20, y=16), 64)
    empty = np.zeros((64, 64), dtype=bool)

    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 < iou(a, b) < 1.0
    assert iou(a, a) == 1.0
    assert iou(a, empty) == 0.0
    assert iou(empty, empty) == 1.0
    with pytest.raises(DimensionMismatch):
        iou(a, np.zeros((32, 32), dtype=bool))


def test_concrete_syntax_round_trip() -> None:
    text = format_expr(HOUSE)

    assert text.startswith("(quadrilateral(x=16, y=20, w=12, h=10, angle=0) + (circle(")
    assert parse_expr(text) == HOUSE
    assert format_expr(parse_expr(text)) == text


def test_parse_rejects_malformed_programs() -> None:
    for text in (
        "circle(radius=4, x=8)",
        "(circle(radius=4, x=8, y=8) * circle(radius=2, x=8, y=8))",
        "(circle(radius=4, x=8, y=8) + circle(radius=2, x=8, y=8)",
        "triangle(x=1)",
    ):
        with pytest.raises(CsgParseError):
            parse_expr(text)


def test_pgm_export_round_trip() -> None:
    canvas = render2d(HOUSE, 64)
    text = to_pgm(canvas)

    assert text.startswith("P2\n64 64\n1\n")
    assert np.array_equal(from_pgm(text), canvas)


def test_voxel_export_round_trip() -> None:
    grid = render3d(Difference(Sphere(8, 16, 16, 16), Cube(16, 0, 0, 28, 28, 28)), 32)

    assert np.array_equal(voxels_from_text(voxels_to_text(grid)), grid)


def test_action_space_size_counts_the_lattice() -> None:
    assert action_space_size(2, 0) == 16**3 + 2 * 16**4
    assert action_space_size(2, 0) == 135168
    assert action_space_size(3, 0) == 8**4 + 8**6 + 8**7
    assert action_space_size(3, 0) == 2363392
    assert action_space_size(2, 3) == 135168 + 2 * 3 * 2
    assert 1e5 <= action_space_size(2, 13) <= 1e7


def test_legal_actions_match_action_space_size() -> None:
    domain = CsgDomain(dimension=2, coords=[0, 8, 16], sizes=[4, 8])
    state = initial_state(domain, domain.spec_from_program(HOUSE))
    state = apply_action(domain, state, Action("circle", (4, 8, 8)))
    state = apply_action(domain, state, Action("circle", (8, 16, 16)))

    actions = legal_actions(domain, state)

    assert len(actions) == domain.action_space_size(2)
    assert len(set(actions)) == len(actions)
    assert Action("difference", (), (1, 0)) in actions


def test_scope_rule_consumes_operands() -> None:
    domain = CsgDomain(dimension=2)
    state = initial_state(domain, domain.spec_from_program(HOUSE))
    for action in (
        Action("circle", (4, 8, 8)),
        Action("circle", (4, 16, 16)),
        Action("quadrilateral", (8, 8, 4, 4, 0)),
        Action("union", (), (0, 2)),
    ):
        state = apply_action(domain, state, action)

    assert state.step_count == 4
    assert state.pp == (
        Circle(4, 16, 16),
        Union(Circle(4, 8, 8), Quadrilateral(8, 8, 4, 4, 0)),
    )


def test_malformed_actions_are_rejected() -> None:
    domain = CsgDomain(dimension=2)
    state = initial_state(domain, domain.spec_from_program(HOUSE))
    state = apply_action(domain, state, Action("circle", (4, 8, 8)))

    with pytest.raises(OperandOutOfRange):
        apply_action(domain, state, Action("union", (), (0, 1)))
    with pytest.raises(ArityMismatch):
        apply_action(domain, state, Action("union", (), (0,)))
    with pytest.raises(IllegalActionError):
        apply_action(domain, state, Action("circle", (5, 8, 8)))


def test_incremental_execution_matches_full_render() -> None:
    domain = CsgDomain(dimension=2)
    spec = domain.spec_from_program(HOUSE)

    trajectory = replay(domain, spec, domain.recover_actions(HOUSE))

    assert trajectory.reward == 1
    for state, view in zip(trajectory.states, trajectory.views, strict=True):
        full = domain.execute(state)
        assert len(full) == len(view) == len(state.pp)
        assert all(np.array_equal(a, b) for a, b in zip(full, view, strict=True))


def test_recovered_actions_rebuild_the_program() -> None:
    domain = CsgDomain(dimension=2)
    actions = domain.recover_actions(HOUSE)

    trajectory = replay(domain, domain.spec_from_program(HOUSE), actions)

    assert [a.production for a in actions] == [
        "quadrilateral",
        "circle",
        "quadrilateral",
        "difference",
        "union",
    ]
    assert trajectory.states[-1].pp == (HOUSE,)


def test_quality_and_best_program() -> None:
    domain = CsgDomain(dimension=2)
    spec = domain.spec_from_program(HOUSE)
    start = initial_state(domain, spec)
    one = apply_action(domain, start, Action("quadrilateral", (16, 20, 12, 10, 0)))

    assert domain.quality(start, domain.execute(start)) == 0.0
    assert domain.best_program(start, domain.execute(start)) == ""
    assert 0.0 < domain.quality(one, domain.execute(one)) < 1.0
    assert domain.best_program(one, domain.execute(one)).startswith("quadrilateral(")


def test_action_text_round_trip() -> None:
    domain = CsgDomain(dimension=3)
    for action in (Action("sphere", (4, 8, 8, 8)), Action("difference", (), (2, 0))):
        assert domain.parse_action(domain.format_action(action)) == action
    assert domain.format_action(Action("union", (), (0, 1))) == "union(0, 1)"


def test_spec_json_round_trip_from_grid() -> None:
    domain = CsgDomain(dimension=2)
    spec = domain.spec_from_grid(render2d(HOUSE, 64))

    rebuilt = domain.spec_from_json(domain.spec_to_json(spec))

    assert np.array_equal(rebuilt.target, spec.target)
    assert domain.spec_id(rebuilt) == domain.spec_id(spec)
    with pytest.raises(DimensionMismatch):
        domain.spec_from_grid(np.zeros((32, 32), dtype=bool))


def test_fingerprint_follows_the_grammar() -> None:
    assert CsgDomain(2).fingerprint() == CsgDomain(2, horizon=9).fingerprint()
    assert CsgDomain(2).fingerprint() != CsgDomain(2, resolution=32).fingerprint()
    assert CsgDomain(2).fingerprint() != CsgDomain(3).fingerprint()
