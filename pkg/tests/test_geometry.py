import math

import numpy as np
import pytest

from services.errors import ConfigurationError, GeometryError, OffsetThresholdError
from services.geometry import (
    BOUNDARY_ADJACENT,
    INTERIOR,
    boundary_normal,
    build_grid,
    load_level_set_file,
    normal_offset_gap,
    parse_domain,
    signed_distance,
    write_level_set_file,
)


@pytest.mark.parametrize("point, expected", [((0.5, 0.0), -0.5), ((2.0, 0.0), 1.0), ((0.0, 1.0), 0.0)])
def test_signed_distance_on_the_unit_ball(ball, point, expected):
    assert signed_distance(ball, point) == pytest.approx(expected, abs=1e-12)


def test_signed_distance_at_the_ellipse_centre(ellipse):
    assert signed_distance(ellipse, (0.0, 0.0)) == pytest.approx(-1.0 / math.sqrt(2.0), abs=1e-8)


def test_signed_distance_is_one_lipschitz(ellipse):
    rng = np.random.default_rng(3)
    a = rng.uniform(-1.2, 1.2, size=(200, 2))
    b = a + rng.normal(scale=0.05, size=a.shape)
    da = signed_distance(ellipse, a)
    db = signed_distance(ellipse, b)
    assert np.all(np.abs(da - db) <= np.linalg.norm(a - b, axis=1) + 1e-6)


def test_boundary_normals(ball, ellipse):
    assert boundary_normal(ball, (1.0, 0.0)) == pytest.approx([1.0, 0.0])
    assert boundary_normal(ball, (0.0, -1.0)) == pytest.approx([0.0, -1.0])
    assert boundary_normal(ellipse, (0.0, 1.0 / math.sqrt(2.0))) == pytest.approx([0.0, 1.0], abs=1e-12)


def test_boundary_normals_point_outward(ellipse):
    _, y = ellipse.boundary_samples(256)
    nu = boundary_normal(ellipse, y)
    assert np.all(np.sum(nu * y, axis=1) > 0)


def test_boundary_normal_rejects_interior_points(ball):
    with pytest.raises(GeometryError):
        boundary_normal(ball, (0.5, 0.0))


def test_hand_sized_grid_classification(ball):
    grid = build_grid(ball, 0.5, min_nodes_across=4)
    assert grid.n_active == 9
    assert len(grid.interior_ids) == 1
    assert len(grid.boundary_ids) == 8
    assert grid.classes[grid.source_id()] == INTERIOR
    assert np.all(grid.projection_distance <= 0.5 * math.sqrt(2.0))


def test_fine_grid_matches_disc_area(fine_grid):
    area_nodes = math.pi / fine_grid.h ** 2
    assert fine_grid.n_active == pytest.approx(area_nodes, rel=0.02)
    assert np.all(fine_grid.projection_distance <= fine_grid.h * math.sqrt(2.0) + 1e-12)


def test_interior_nodes_have_active_neighbours(coarse_grid):
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            nb = coarse_grid.neighbor_ids(di, dj, coarse_grid.interior_ids)
            assert np.all(nb >= 0)
    assert np.all(coarse_grid.classes[coarse_grid.boundary_ids] == BOUNDARY_ADJACENT)


def test_build_grid_is_deterministic(ball):
    a = build_grid(ball, 1.0 / 20.0)
    b = build_grid(ball, 1.0 / 20.0)
    assert np.array_equal(a.node_class, b.node_class)
    assert np.array_equal(a.projections, b.projections)


@pytest.mark.parametrize("h", [2.5, 0.2])
def test_coarse_grids_are_rejected(ball, h):
    with pytest.raises(ConfigurationError):
        build_grid(ball, h)


def test_offset_gap_is_exact_on_the_ball(ball):
    assert normal_offset_gap(ball, 0.1) == pytest.approx(0.1, abs=1e-9)


def test_offset_gap_ratio_tends_to_one_on_the_ellipse(ellipse):
    lams = [0.04, 0.02, 0.01, 0.005]
    ratios = [normal_offset_gap(ellipse, lam) / lam for lam in lams]
    assert 0.009 <= ratios[2] * 0.01 <= 0.01
    assert all(b >= a - 1e-9 for a, b in zip(ratios, ratios[1:]))
    assert all(r <= 1.0 + 1e-12 for r in ratios)
    assert ratios[-1] >= 0.95


def test_offset_gap_beyond_the_threshold(ellipse):
    with pytest.raises(OffsetThresholdError):
        normal_offset_gap(ellipse, 0.6)


def test_parse_domain_rejects_unknown_kinds():
    with pytest.raises(ConfigurationError):
        parse_domain("square:1")
    with pytest.raises(ConfigurationError):
        parse_domain("ellipse:1")


def test_implicit_domain_from_level_set_file(tmp_path):
    n = 81
    axis = np.linspace(-1.5, 1.5, n)
    X, Y = np.meshgrid(axis, axis, indexing="xy")
    samples = X ** 2 + Y ** 2 - 1.0
    path = tmp_path / "disc.bin"
    write_level_set_file(path, (-1.5, 1.5, -1.5, 1.5), samples)
    bbox, loaded = load_level_set_file(path)
    assert bbox == pytest.approx((-1.5, 1.5, -1.5, 1.5))
    assert np.array_equal(loaded, samples)

    domain = parse_domain(f"implicit:{path}")
    assert domain.rho(np.array([[0.0, 0.0]]))[0] < 0
    assert domain.rho(np.array([[1.2, 0.0]]))[0] > 0
    assert signed_distance(domain, (0.5, 0.0)) == pytest.approx(-0.5, abs=1e-3)
