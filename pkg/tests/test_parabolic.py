import math

import numpy as np
import pytest

from conftest import make_problem
from services.errors import AnisotropyError, ConfigurationError, PreconditionError
from services.geometry import build_grid
from services.model import BoundaryData, coefficients_from_preset, Problem, semilinear_from_preset
from services.parabolic import (
    assemble_operator,
    geometric_ratio,
    geometric_time_grid,
    interpolation_matrix,
    merge_times,
    sigma_cutoff,
    solve_parabolic,
    solve_stationary,
)


@pytest.fixture(scope="module")
def grid(ball):
    return build_grid(ball, 1.0 / 24.0)


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------

def test_operator_is_monotone(iso_problem, grid):
    op = assemble_operator(iso_problem, grid, 0.05)
    assert op.is_monotone()
    assert op.stencil_points == 5
    assert np.max(np.abs(op.apply(np.full(grid.n_active, 3.0)))) <= 1e-9


def test_correlated_diffusion_uses_nine_points(grid):
    problem = make_problem("correlated_diffusion")
    op = assemble_operator(problem, grid, 0.05)
    assert op.stencil_points == 9
    assert op.is_monotone()


def test_operator_on_a_quadratic(iso_problem, grid):
    eps = 0.05
    op = assemble_operator(iso_problem, grid, eps)
    x1 = grid.coordinates[:, 0]
    out = op.apply(x1 ** 2)
    pts = grid.coordinates[grid.interior_ids]
    exact = 2.0 * eps - 2.0 * pts[:, 0] ** 2
    assert np.all(np.abs(out - exact) <= grid.h * np.abs(pts[:, 0]) + 1e-9)


def test_operator_rejects_strong_correlation(grid, ball):
    c = coefficients_from_preset("isotropic_quadratic")
    c.diffusion_matrix = np.array([[1.0, 0.9], [0.9, 0.5]])
    problem = Problem(ball, c, make_problem().boundary_data)
    with pytest.raises(AnisotropyError):
        assemble_operator(problem, grid, 0.05)


def test_operator_needs_positive_eps(iso_problem, grid):
    with pytest.raises(PreconditionError):
        assemble_operator(iso_problem, grid, 0.0)


# ---------------------------------------------------------------------------
# Time grids
# ---------------------------------------------------------------------------

def test_geometric_ratio():
    assert geometric_ratio(0.01, math.exp(14.0), 400) == pytest.approx(1.0476, abs=1e-4)


def test_geometric_time_grid_shape():
    times = geometric_time_grid(0.01, 100.0, 40)
    assert times[0] == 0.0
    assert times[8] == pytest.approx(0.01)
    assert times[-1] == 100.0
    assert len(times) == 8 + 1 + 40
    assert np.all(np.diff(times) > 0)
    ratios = times[10:] / times[9:-1]
    assert ratios == pytest.approx(np.full(len(ratios), geometric_ratio(0.01, 100.0, 40)), rel=1e-9)


@pytest.mark.parametrize("t_min, t_max, n", [(0.01, 100.0, 1), (1.0, 1.0, 40), (0.0, 1.0, 40)])
def test_geometric_time_grid_rejects(t_min, t_max, n):
    with pytest.raises(PreconditionError):
        geometric_time_grid(t_min, t_max, n)


def test_merge_times_inserts_inside_the_range():
    times = np.array([0.0, 1.0, 2.0])
    merged = merge_times(times, [0.5, 1.0, 3.0])
    assert merged.tolist() == [0.0, 0.5, 1.0, 2.0]


def test_sigma_cutoff_families():
    assert sigma_cutoff(0.1) == pytest.approx(10.0)
    assert sigma_cutoff(0.1, "log") == pytest.approx(math.log(10.0))
    with pytest.raises(ConfigurationError):
        sigma_cutoff(0.1, "sqrt")


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def test_constant_data_is_preserved(grid):
    problem = make_problem(data="constant", value=0.7)
    sol = solve_parabolic(problem, 0.05, grid, geometric_time_grid(0.01, 50.0, 20))
    assert np.max(np.abs(sol.values - 0.7)) <= 1e-12


def test_maximum_principle(iso_problem, grid):
    sol = solve_parabolic(iso_problem, 0.1, grid, geometric_time_grid(0.01, 100.0, 30))
    g = iso_problem.boundary_data(grid.projections)
    assert sol.maximum_principle_holds(0.0, float(g.max()))
    assert sol.metadata["scheme"] == "backward_euler_upwind"


def test_stored_slices_and_probes(iso_problem, grid):
    times = geometric_time_grid(0.01, 10.0, 20)
    sol = solve_parabolic(iso_problem, 0.1, grid, times, store=[0.0, 10.0])
    assert len(sol) == 2
    assert sol.index_of(10.0) == 1
    with pytest.raises(PreconditionError):
        sol.index_of(5.0)
    series = sol.probe_series([[0.0, 0.0], [0.5, 0.0]])
    assert series.shape == (2, 2)
    assert series[0, 1] == pytest.approx(0.25, abs=1e-12)


def test_decay_to_boundary_average(iso_problem, grid):
    times = geometric_time_grid(0.01, 1e4, 60)
    sol = solve_parabolic(iso_problem, 0.1, grid, times, store=[times[-1]])
    late = sol.probe_series([[0.0, 0.0]])[-1, 0]
    stationary = solve_stationary(iso_problem, 0.1, grid)
    assert late == pytest.approx(stationary.evaluate([[0.0, 0.0]])[0], abs=1e-3)


def test_stationary_constant_data(grid):
    v = solve_stationary(make_problem(data="constant", value=2.0), 0.05, grid)
    assert np.max(np.abs(v.values - 2.0)) <= 1e-9


def test_stationary_semilinear_term_keeps_the_range(grid):
    problem = make_problem(semilinear=semilinear_from_preset("tanh"))
    v = solve_stationary(problem, 0.1, grid)
    assert 0.0 <= v.values.min()
    assert v.values.max() <= 1.0 + 1e-12


def test_probe_next_to_the_boundary_is_rejected(grid):
    with pytest.raises(ConfigurationError):
        interpolation_matrix(grid, [[0.98, 0.15]])


def test_time_grid_must_increase(iso_problem, grid):
    with pytest.raises(PreconditionError):
        solve_parabolic(iso_problem, 0.1, grid, np.array([0.0, 1.0, 1.0]))


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def _ordered_data(rng):
    """Random smooth data g₁ ≤ g₂ on the closed ball."""
    c = rng.normal(size=5)
    d = rng.uniform(0.0, 1.0, size=3)
    g1 = lambda x: c[0] + c[1] * x[..., 0] + c[2] * x[..., 1] + c[3] * x[..., 0] * x[..., 1] + c[4] * x[..., 1] ** 2
    gap = lambda x: d[0] + d[1] * (1.0 + x[..., 0]) + d[2] * x[..., 1] ** 2
    return (BoundaryData("random", g1), BoundaryData("random", lambda x: g1(x) + gap(x)))


def test_evolution_preserves_order_of_data(ball, grid):
    rng = np.random.default_rng(50)
    c = coefficients_from_preset("anisotropic_quadratic")
    times = geometric_time_grid(0.01, 50.0, 10)
    for _ in range(50):
        g1, g2 = _ordered_data(rng)
        u1 = solve_parabolic(Problem(ball, c, g1), 0.07, grid, times)
        u2 = solve_parabolic(Problem(ball, c, g2), 0.07, grid, times)
        assert np.all(u1.values <= u2.values + 1e-10)


def test_stationary_solution_preserves_order_of_data(ball, grid):
    rng = np.random.default_rng(51)
    c = coefficients_from_preset("isotropic_quadratic")
    for _ in range(50):
        g1, g2 = _ordered_data(rng)
        v1 = solve_stationary(Problem(ball, c, g1), 0.07, grid)
        v2 = solve_stationary(Problem(ball, c, g2), 0.07, grid)
        assert np.all(v1.values <= v2.values + 1e-10)


# ---------------------------------------------------------------------------
# Semilinear reduction
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("term", [semilinear_from_preset("zero"), semilinear_from_preset("tanh", M_scale=0.0)],
                         ids=["zero", "tanh_without_reaction"])
def test_vanishing_reaction_reduces_to_the_linear_solver(iso_problem, grid, term):
    times = geometric_time_grid(0.01, 20.0, 12)
    linear = solve_parabolic(iso_problem, 0.1, grid, times)
    semilinear = solve_parabolic(iso_problem, 0.1, grid, times, semilinear=term)
    assert np.max(np.abs(semilinear.values - linear.values)) <= 1e-8
    assert semilinear.metadata["semilinear"] == (None if term.preset == "zero" else "tanh")
