import numpy as np
import pytest

from conftest import make_problem
from services.errors import ConfigurationError, ModelError
from services.model import (
    boundary_data_from_preset,
    coefficients_from_preset,
    hamiltonian,
    lagrangian,
    noise_root_matrix,
    semilinear_from_preset,
    validate_assumptions,
)


@pytest.fixture(scope="module")
def iso():
    return coefficients_from_preset("isotropic_quadratic")


def test_hamiltonian_examples(iso):
    x = np.array([0.3, 0.4])
    assert hamiltonian(iso, x, x) == pytest.approx(0.0, abs=1e-15)
    assert hamiltonian(iso, x, np.zeros(2)) == 0.0
    assert hamiltonian(iso, np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1.0)


def test_lagrangian_examples(iso):
    x = np.array([0.5, 0.0])
    assert lagrangian(iso, x, iso.b(x)) == pytest.approx(0.0, abs=1e-15)
    assert lagrangian(iso, x, np.array([1.0, 0.0])) == pytest.approx(0.5625)


def test_lagrangian_is_the_legendre_transform(iso):
    rng = np.random.default_rng(11)
    axis = np.linspace(-5.0, 5.0, 401)
    P = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    for _ in range(20):
        x = rng.uniform(-0.7, 0.7, size=2)
        xi = rng.uniform(-1.0, 1.0, size=2)
        sup = np.max(P @ xi - hamiltonian(iso, np.broadcast_to(x, P.shape), P))
        assert sup == pytest.approx(float(lagrangian(iso, x, xi)), abs=1e-3)


def test_hamiltonian_is_convex_and_elliptic():
    c = coefficients_from_preset("anisotropic_diffusion")
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, size=(500, 2))
    p = rng.normal(size=(500, 2))
    q = rng.normal(size=(500, 2))
    mid = hamiltonian(c, x, 0.5 * (p + q))
    assert np.all(mid <= 0.5 * (hamiltonian(c, x, p) + hamiltonian(c, x, q)) + 1e-12)
    lower = np.sum(c.b(x) * p, axis=1) + c.theta * np.sum(p * p, axis=1)
    assert np.all(hamiltonian(c, x, p) >= lower - 1e-12)


@pytest.mark.parametrize("a", [np.eye(2), np.diag([4.0, 1.0]), np.array([[2.0, 1.0], [1.0, 2.0]])])
def test_noise_root_squares_back(a):
    s = noise_root_matrix(a)
    assert np.allclose(s, s.T)
    assert np.max(np.abs(s @ s.T - a)) <= 1e-12


def test_noise_root_of_diagonal():
    assert noise_root_matrix(np.diag([4.0, 1.0])) == pytest.approx(np.diag([2.0, 1.0]))


def test_noise_root_rejects_indefinite_matrices():
    with pytest.raises(ModelError):
        noise_root_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))


@pytest.mark.parametrize("preset", ["isotropic_quadratic", "anisotropic_quadratic"])
def test_quadratic_presets_pass_validation(preset):
    report = validate_assumptions(make_problem(preset), n_samples=2000)
    assert report.passed
    assert report.metrics["max_boundary_b_dot_nu"] == pytest.approx(-1.0, abs=1e-3)


def test_outward_drift_fails_validation():
    report = validate_assumptions(make_problem("outward"), n_samples=2000)
    assert not report.passed
    assert report.metrics["max_boundary_b_dot_nu"] > 0
    assert any(issue.assumption == "A5" for issue in report.issues)


def test_semilinear_presets_against_growth_bound():
    ok = make_problem(semilinear=semilinear_from_preset("tanh"))
    assert validate_assumptions(ok, n_samples=2000).passed

    bad = make_problem(semilinear=semilinear_from_preset("constant_M", 0.5))
    report = validate_assumptions(bad, n_samples=2000)
    assert not report.passed
    assert any(issue.assumption == "A6" for issue in report.issues)


def test_semilinear_term_vanishes_at_zero_gradient():
    term = semilinear_from_preset("tanh")
    x = np.zeros((4, 2))
    u = np.linspace(-2, 2, 4)
    assert np.all(term(0.1, x, u, np.zeros((4, 2))) == 0.0)
    assert term.M(0.1) == pytest.approx(0.1)


def test_boundary_data_presets():
    g = boundary_data_from_preset("x1_squared")
    assert g(np.array([[0.5, 3.0]]))[0] == pytest.approx(0.25)
    c = boundary_data_from_preset("constant", 2.5)
    assert np.all(c(np.zeros((3, 2))) == 2.5)
    with pytest.raises(ConfigurationError):
        boundary_data_from_preset("sine")


def test_unknown_coefficient_preset():
    with pytest.raises(ConfigurationError, match="known"):
        coefficients_from_preset("cubic")
