import math

import numpy as np
import pytest

from conftest import make_problem
from services.certificates import (
    EPS_LADDER_RATIO,
    SHRINK_LADDER,
    bound_check,
    build_appendix_barriers,
    build_exit_supersolution,
    build_exponential_barrier,
    build_psi,
    build_strict_subsolution,
    inf_convolution,
    lambda_balance,
    balance_residual,
    barrier_domination,
    probe_barrier_threshold,
    strict_subsolution_stages,
)
from services.errors import InfeasibleMarginError, ParameterError, PreconditionError, StabilityError
from services.geometry import GridFunction, build_grid
from services.parabolic import geometric_time_grid, solve_parabolic
from services.quasipotential import solve_from_point


@pytest.fixture(scope="module")
def iso_V(iso_problem, coarse_grid):
    return solve_from_point(iso_problem, coarse_grid)


@pytest.fixture(scope="module")
def psi(iso_problem, coarse_grid):
    return build_psi(iso_problem, coarse_grid, R=2.0, ramp_width=1.0)


@pytest.fixture(scope="module")
def stages(iso_problem, coarse_grid, iso_V, psi):
    return strict_subsolution_stages(iso_problem, coarse_grid, 0.2, V=iso_V, psi=psi)


def _same_reports(cert):
    reports, checks = cert.recompute()
    assert [r.max for r in reports] == pytest.approx([r.max for r in cert.reports], abs=1e-12)
    assert [c["passed"] for c in checks] == [c["passed"] for c in cert.checks]


# ---------------------------------------------------------------------------
# ψ and the strict subsolution pipeline
# ---------------------------------------------------------------------------

def test_psi_is_a_logarithm_on_the_ball(psi):
    inner = psi.values.at((0.5, 0.0))
    outer = psi.values.at((0.75, 0.0))
    assert inner - outer == pytest.approx(math.log(0.5 / 0.75), abs=1e-3)
    assert inner == pytest.approx(math.log(0.5) - (2.0 * math.log(2.0) - 1.0), abs=1e-3)


def test_psi_transport_residual(psi):
    assert psi.verified
    assert psi.report.max <= 0.05
    assert psi.params["masked_radius"] == pytest.approx(2.0 * psi.grid.h)
    _same_reports(psi)


def test_psi_diverges_toward_the_origin(psi, coarse_grid):
    h = coarse_grid.h
    assert psi.values.at((3 * h, 0.0)) <= psi.values.at((0.5, 0.0)) + math.log(3 * h / 0.5) + 1e-3


def test_psi_needs_a_confining_flow(coarse_grid):
    with pytest.raises(StabilityError):
        build_psi(make_problem("outward"), coarse_grid)


def test_psi_domain_must_fit_in_the_ramp(iso_problem, coarse_grid):
    with pytest.raises(PreconditionError):
        build_psi(iso_problem, coarse_grid, R=0.9)


def test_scaling_uses_the_measured_constant(stages):
    psi_r = stages["psi_r"]
    p = psi_r.params
    assert p["lambda"] == p["theta"] / (2.0 * p["C"])
    assert psi_r.eta == p["lambda"] / 2.0
    assert psi_r.verified


def test_blend_stays_within_r_of_V(stages):
    V_r = stages["V_r"]
    assert 0 < V_r.params["delta"] <= 0.5
    assert all(c["passed"] for c in V_r.checks)


def test_mollified_stage(stages):
    W_r = stages["W_r"]
    assert W_r.params["shrink"] in SHRINK_LADDER
    assert W_r.params["mollifier_radius"] < W_r.params["r"] / 2.0
    distance = next(c for c in W_r.checks if c["name"].startswith("‖W_r"))
    assert distance["passed"]
    _same_reports(W_r)


def test_unknown_stage_is_rejected(iso_problem, coarse_grid, psi):
    with pytest.raises(PreconditionError):
        strict_subsolution_stages(iso_problem, coarse_grid, 0.2, psi=psi, upto="W")


def test_single_stage_matches_the_pipeline(iso_problem, coarse_grid, psi, stages):
    psi_r = build_strict_subsolution(iso_problem, coarse_grid, 0.2, stage="psi_r", psi=psi)
    assert psi_r.kind == "psi_r"
    assert np.array_equal(psi_r.values.values, stages["psi_r"].values.values)


# ---------------------------------------------------------------------------
# Inf-convolution
# ---------------------------------------------------------------------------

def test_inf_convolution_of_a_constant(coarse_grid):
    f = GridFunction(coarse_grid, np.full(coarse_grid.n_active, 0.3))
    assert np.all(inf_convolution(f, 0.1).values == pytest.approx(0.3, abs=1e-15))


def test_inf_convolution_of_a_paraboloid(coarse_grid):
    x = coarse_grid.coordinates
    r2 = np.sum(x ** 2, axis=1)
    alpha = 0.5
    out = inf_convolution(GridFunction(coarse_grid, r2), alpha).values
    assert np.all(out <= r2 + 1e-15)
    assert np.all(np.abs(out - r2 / (1.0 + alpha)) <= 2.0 * coarse_grid.h * np.sqrt(r2) + 1e-12)


def test_inf_convolution_is_monotone(coarse_grid):
    rng = np.random.default_rng(8)
    f = rng.uniform(0, 1, coarse_grid.n_active)
    g = f + rng.uniform(0, 0.5, coarse_grid.n_active)
    a = inf_convolution(GridFunction(coarse_grid, f), 0.05).values
    b = inf_convolution(GridFunction(coarse_grid, g), 0.05).values
    assert np.all(a <= b + 1e-15)


def test_inf_convolution_needs_positive_alpha(coarse_grid):
    with pytest.raises(PreconditionError):
        inf_convolution(GridFunction(coarse_grid, np.zeros(coarse_grid.n_active)), 0.0)


# ---------------------------------------------------------------------------
# Exit supersolution
# ---------------------------------------------------------------------------

def test_exit_supersolution_bounds(iso_problem, coarse_grid, iso_V):
    cert = build_exit_supersolution(iso_problem, coarse_grid, 0.7, V=iso_V)
    w = cert.values.values
    assert 0.01 <= w.min()
    assert w.max() <= 0.69
    assert all(c["passed"] for c in cert.checks)
    assert cert.eta == min(cert.params["mu"] / 4.0, 0.01)
    assert cert.verified
    assert cert.report.max <= cert.params["tolerance"]


def test_anisotropic_exit_supersolution(aniso_problem, coarse_grid):
    cert = build_exit_supersolution(aniso_problem, coarse_grid, 0.8)
    assert cert.verified
    assert cert.eta >= 1e-3
    w = cert.values.values
    assert 0.0 < w.min() and w.max() < 0.8


@pytest.mark.slow
def test_exit_supersolution_at_finer_resolution(aniso_problem):
    grid = build_grid(aniso_problem.domain, 1.0 / 64.0)
    cert = build_exit_supersolution(aniso_problem, grid, 0.8)
    assert cert.verified
    assert cert.eta >= 1e-3


def test_inf_convolution_scale_stays_inside_the_collar(iso_problem, coarse_grid, iso_V):
    cert = build_exit_supersolution(iso_problem, coarse_grid, 0.7, V=iso_V)
    p = cert.params
    assert p["alpha"] * p["lip"] <= 0.5 * p["collar"] + 1e-15
    assert p["collar"] == pytest.approx(p["shrink"] / (1.0 - p["shrink"]))


def test_exit_supersolution_margin_too_small(iso_problem, coarse_grid, iso_V):
    with pytest.raises(InfeasibleMarginError):
        build_exit_supersolution(iso_problem, coarse_grid, 0.51, V=iso_V)


# ---------------------------------------------------------------------------
# Exponential barrier
# ---------------------------------------------------------------------------

def test_barrier_values_follow_the_formula(iso_problem, stages):
    W_r = stages["W_r"]
    cert = build_exponential_barrier(iso_problem, W_r, 0.4, 0.05)
    expected = np.exp((W_r.values.values - 0.4) / 0.05)
    assert np.max(np.abs(cert.values.values - expected)) <= 1e-12 * expected.max()
    inside = np.linalg.norm(W_r.grid.coordinates, axis=1) <= 0.2
    assert cert.time_slope == pytest.approx(2.0 / 0.05 * expected[inside].max(), rel=1e-12)
    assert cert.params["R_eps"] == cert.time_slope


def test_barrier_fails_above_the_probed_threshold(iso_problem, stages):
    W_r = stages["W_r"]
    eps0 = probe_barrier_threshold(iso_problem, W_r, 0.4)
    if eps0 >= 1.0:
        pytest.skip("barrier holds on the whole ε ladder")
    above = 1.0 if eps0 == 0.0 else eps0 / EPS_LADDER_RATIO
    cert = build_exponential_barrier(iso_problem, W_r, 0.4, above)
    assert not cert.verified
    assert cert.report.worst_point is not None


def test_barrier_needs_a_mollified_stage(iso_problem, stages):
    with pytest.raises(PreconditionError):
        build_exponential_barrier(iso_problem, stages["psi_r"], 0.4, 0.05)


def test_solution_below_the_barrier_stays_below_it(iso_problem, stages):
    W_r = stages["W_r"]
    eps0 = probe_barrier_threshold(iso_problem, W_r, 0.4)
    assert eps0 > 0.0
    barrier = build_exponential_barrier(iso_problem, W_r, 0.4, eps0)
    assert barrier.verified
    grid, v = W_r.grid, barrier.values
    cap = float(v.values[grid.boundary_ids].min())
    times = geometric_time_grid(0.01, 20.0, 30)
    below = solve_parabolic(make_problem(data="constant", value=cap), eps0, grid, times,
                            initial=lambda x: np.minimum(v.evaluate(x), cap))
    report = barrier_domination(barrier, below, 1e-12 * max(1.0, float(v.values.max())))
    assert report.passed
    assert report.n_checked == len(grid.interior_ids)

    above = solve_parabolic(make_problem(data="constant", value=float(v.values.max()) + 1.0), eps0, grid, times)
    assert not barrier_domination(barrier, above).passed


def test_barrier_domination_needs_matching_eps(iso_problem, stages):
    W_r = stages["W_r"]
    barrier = build_exponential_barrier(iso_problem, W_r, 0.4, 0.05)
    sol = solve_parabolic(iso_problem, 0.1, W_r.grid, geometric_time_grid(0.01, 1.0, 8))
    with pytest.raises(PreconditionError):
        barrier_domination(barrier, sol)


# ---------------------------------------------------------------------------
# Perron barriers
# ---------------------------------------------------------------------------

def test_balance_equation():
    Lam = lambda_balance(0.05, 0.05, 1.0, 2, 2.0, 1.0)
    assert Lam == pytest.approx(32.5, abs=1e-12)
    assert abs(balance_residual(0.05, 0.05, 1.0, 2, 2.0, 1.0, Lam)) <= 1e-12


@pytest.mark.parametrize("eps, M", [(0.0, 0.05), (0.05, -1.0)])
def test_balance_equation_rejects_bad_inputs(eps, M):
    with pytest.raises(ParameterError):
        lambda_balance(eps, M, 1.0, 2, 2.0, 1.0)


def test_appendix_barriers_on_the_ball(iso_problem, coarse_grid):
    cert = build_appendix_barriers(iso_problem, coarse_grid, 0.05, 0.05, max_boundary_points=32)
    p = cert.params
    assert p["Lambda"] == pytest.approx(32.5, abs=1e-9)
    assert p["n_boundary_points"] == 32
    assert all(c["passed"] for c in cert.checks)
    assert all(v <= 1e-4 for v in p["v_b_at_y"])
    assert np.all(cert.values.values >= iso_problem.boundary_data(coarse_grid.coordinates) - p["boundary_tolerance"] - 1e-9)


def test_bound_check_senses():
    assert bound_check("x", 1.0, 2.0)["passed"]
    assert not bound_check("x", 2.0, 2.0, "<")["passed"]
    assert bound_check("x", 2.0, 1.0, ">=")["passed"]


@pytest.mark.slow
def test_strict_subsolution_at_full_resolution(iso_problem, ball):
    grid = build_grid(ball, 1.0 / 128.0)
    W_r = strict_subsolution_stages(iso_problem, grid, 0.2)["W_r"]
    assert W_r.eta > 0
    assert W_r.verified
