"""
Coefficients, boundary data, semilinear terms and assumption validation.

Coefficient presets are linear drifts b(x) = Bx with constant diffusion
matrices a; every routine accepts batches of points shaped (..., 2).
"""

import logging
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from services.errors import ConfigurationError, ModelError, StabilityError
from services.geometry import Domain

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

class Coefficients:
    """Diffusion a(x), drift b(x) and ellipticity constant θ."""

    def __init__(
        self,
        preset: str,
        drift_matrix: np.ndarray,
        diffusion_matrix: np.ndarray,
        theta: float,
        description: str = "",
    ):
        self.preset = preset
        self.drift_matrix = np.asarray(drift_matrix, dtype=float)
        self.diffusion_matrix = np.asarray(diffusion_matrix, dtype=float)
        if not 0 < theta <= 1:
            raise ModelError(f"{preset}: ellipticity constant must lie in (0, 1], got {theta}")
        self.theta = float(theta)
        self.description = description
        self._inverse = np.linalg.inv(self.diffusion_matrix)
        self._root = noise_root_matrix(self.diffusion_matrix)

    def a(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.diffusion_matrix, x.shape[:-1] + (2, 2))

    def a_inv(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._inverse, x.shape[:-1] + (2, 2))

    def sigma(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self._root, x.shape[:-1] + (2, 2))

    def b(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.drift_matrix.T

    @property
    def is_constant_diffusion(self) -> bool:
        return True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "preset": self.preset,
            "drift_matrix": self.drift_matrix.tolist(),
            "diffusion_matrix": self.diffusion_matrix.tolist(),
            "theta": self.theta,
        }


def _linear(preset, drift, diffusion, theta, description):
    return lambda: Coefficients(preset, np.array(drift, dtype=float), np.array(diffusion, dtype=float), theta, description)


COEFFICIENT_PRESETS: Dict[str, Callable[[], Coefficients]] = {
    "isotropic_quadratic": _linear(
        "isotropic_quadratic", [[-1, 0], [0, -1]], [[1, 0], [0, 1]], 1.0, "a=I, b(x)=-x"),
    "anisotropic_quadratic": _linear(
        "anisotropic_quadratic", [[-1, 0], [0, -2]], [[1, 0], [0, 1]], 1.0, "a=I, b(x)=(-x1,-2x2)"),
    "anisotropic_diffusion": _linear(
        "anisotropic_diffusion", [[-1, 0], [0, -1]], [[1, 0], [0, 0.5]], 0.5, "a=diag(1,1/2), b(x)=-x"),
    "rotational_quadratic": _linear(
        "rotational_quadratic", [[-1, 1], [-1, -1]], [[1, 0], [0, 1]], 1.0, "a=I, b(x)=-x+Jx"),
    "correlated_diffusion": _linear(
        "correlated_diffusion", [[-1, 0], [0, -1]], [[1, 0.25], [0.25, 1]], 0.75, "a=[[1,1/4],[1/4,1]], b(x)=-x"),
    "outward": _linear(
        "outward", [[1, 0], [0, 1]], [[1, 0], [0, 1]], 1.0, "a=I, b(x)=+x (violates stability)"),
}


def coefficients_from_preset(name: str) -> Coefficients:
    try:
        return COEFFICIENT_PRESETS[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown coefficient preset '{name}' (known: {', '.join(sorted(COEFFICIENT_PRESETS))})"
        ) from None


# ---------------------------------------------------------------------------
# Hamiltonian, Lagrangian, square roots
# ---------------------------------------------------------------------------

def hamiltonian(c: Coefficients, x, p) -> np.ndarray:
    """H(x,p) = a(x)p·p + b(x)·p."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    ap = np.einsum("...ij,...j->...i", c.a(x), p)
    return np.sum(ap * p, axis=-1) + np.sum(c.b(x) * p, axis=-1)


def lagrangian(c: Coefficients, x, xi) -> np.ndarray:
    """L(x,ξ) = ¼ a(x)⁻¹(ξ−b(x))·(ξ−b(x))."""
    x = np.asarray(x, dtype=float)
    d = np.asarray(xi, dtype=float) - c.b(x)
    ad = np.einsum("...ij,...j->...i", c.a_inv(x), d)
    return 0.25 * np.sum(ad * d, axis=-1)


def noise_root_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ModelError(f"diffusion matrix must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-14):
        raise ModelError(f"diffusion matrix is not symmetric: {a.tolist()}")
    if a.shape == (2, 2):
        det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
        tr = a[0, 0] + a[1, 1]
        if det <= 0 or tr <= 0:
            raise ModelError(f"diffusion matrix is not positive definite: {a.tolist()}")
        s = np.sqrt(det)
        return (a + s * np.eye(2)) / np.sqrt(tr + 2.0 * s)
    w, v = np.linalg.eigh(a)
    if w.min() <= 0:
        raise ModelError(f"diffusion matrix is not positive definite (eigenvalue {w.min():.3e})")
    return (v * np.sqrt(w)) @ v.T


def noise_root(c: Coefficients, x) -> np.ndarray:
    """Symmetric positive square root σ of a(x), so that σσᵗ = a(x)."""
    return noise_root_matrix(np.asarray(c.a(np.asarray(x, dtype=float)), dtype=float))


# ---------------------------------------------------------------------------
# Boundary data
# ---------------------------------------------------------------------------

class BoundaryData:
    """Continuous data g on the closed domain."""

    def __init__(self, preset: str, func: Callable[[np.ndarray], np.ndarray], params: Optional[Dict[str, float]] = None):
        self.preset = preset
        self._func = func
        self.params = params or {}

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.asarray(self._func(x), dtype=float) * np.ones(x.shape[:-1])

    def lipschitz_estimate(self, points: np.ndarray, rng: np.random.Generator, n_pairs: int = 10000) -> float:
        i = rng.integers(0, len(points), n_pairs)
        j = rng.integers(0, len(points), n_pairs)
        dist = np.linalg.norm(points[i] - points[j], axis=1)
        keep = dist > 1e-12
        if not keep.any():
            return 0.0
        quot = np.abs(self(points[i[keep]]) - self(points[j[keep]])) / dist[keep]
        return float(quot.max())

    def to_dict(self) -> Dict[str, Any]:
        return {"preset": self.preset, **self.params}


def boundary_data_from_preset(name: str, value: Optional[float] = None) -> BoundaryData:
    if name == "x1_squared":
        return BoundaryData(name, lambda x: x[..., 0] ** 2)
    if name == "x2_squared":
        return BoundaryData(name, lambda x: x[..., 1] ** 2)
    if name == "linear_x1":
        return BoundaryData(name, lambda x: x[..., 0])
    if name == "radial_squared":
        return BoundaryData(name, lambda x: np.sum(x * x, axis=-1))
    if name == "constant":
        c = 1.0 if value is None else float(value)
        return BoundaryData(name, lambda x: np.full(x.shape[:-1], c), {"value": c})
    raise ConfigurationError(
        f"unknown boundary data preset '{name}' (known: constant, linear_x1, radial_squared, x1_squared, x2_squared)"
    )


BOUNDARY_PRESETS = ("constant", "linear_x1", "radial_squared", "x1_squared", "x2_squared")


# ---------------------------------------------------------------------------
# Semilinear terms
# ---------------------------------------------------------------------------

class SemilinearTerm:
    """Lower-order term f_ε(x,u,p) with the bound |f_ε| ≤ M(ε)|p|."""

    def __init__(self, preset: str, M: Callable[[float], float], f: Callable, params: Optional[Dict[str, float]] = None):
        self.preset = preset
        self.M = M
        self._f = f
        self.params = params or {}

    def __call__(self, eps: float, x, u, p) -> np.ndarray:
        return self._f(eps, np.asarray(x, dtype=float), np.asarray(u, dtype=float), np.asarray(p, dtype=float))

    def drift_coefficient(self, eps: float, x, u, p) -> np.ndarray:
        """c with c·p = f_ε(x,u,p) and |c| ≤ M(ε); zero where p = 0."""
        p = np.asarray(p, dtype=float)
        pp = np.sum(p * p, axis=-1)
        f = self(eps, x, u, p)
        scale = np.divide(f, pp, out=np.zeros_like(pp), where=pp > 0)
        return scale[..., None] * p

    def to_dict(self) -> Dict[str, Any]:
        return {"preset": self.preset, **self.params}


def semilinear_from_preset(name: str, M_scale: float = 1.0) -> SemilinearTerm:
    params = {"M_scale": float(M_scale)}
    if name == "tanh":
        M = lambda eps: M_scale * eps
        return SemilinearTerm(name, M, lambda eps, x, u, p: -M(eps) * np.linalg.norm(p, axis=-1) * np.tanh(u), params)
    if name == "zero":
        return SemilinearTerm(name, lambda eps: 0.0, lambda eps, x, u, p: np.zeros(np.broadcast(u, p[..., 0]).shape), params)
    if name == "plus":
        M = lambda eps: M_scale * eps
        return SemilinearTerm(name, M, lambda eps, x, u, p: M(eps) * np.linalg.norm(p, axis=-1) + 0.0 * u, params)
    if name == "constant_M":
        M = lambda eps: M_scale
        return SemilinearTerm(name, M, lambda eps, x, u, p: -M(eps) * np.linalg.norm(p, axis=-1) * np.tanh(u), params)
    raise ConfigurationError(f"unknown semilinear preset '{name}' (known: constant_M, plus, tanh, zero)")


SEMILINEAR_PRESETS = ("constant_M", "plus", "tanh", "zero")


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------

class Problem:
    """A full problem instance: domain, coefficients, boundary data, optional semilinear term."""

    def __init__(
        self,
        domain: Domain,
        coefficients: Coefficients,
        boundary_data: BoundaryData,
        semilinear: Optional[SemilinearTerm] = None,
    ):
        self.domain = domain
        self.coefficients = coefficients
        self.boundary_data = boundary_data
        self.semilinear = semilinear

    @property
    def preset(self) -> str:
        return self.coefficients.preset

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain": self.domain.describe(),
            "coefficients": self.coefficients.to_dict(),
            "boundary_data": self.boundary_data.to_dict(),
            "semilinear": self.semilinear.to_dict() if self.semilinear else None,
        }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

class ValidationIssue:
    """A violated or noteworthy assumption."""

    def __init__(self, assumption: str, severity: str, message: str, suggestion: Optional[str] = None):
        self.assumption = assumption
        self.severity = severity  # "error", "warning", "info"
        self.message = message
        self.suggestion = suggestion

    def to_dict(self) -> Dict[str, Any]:
        return {
            "assumption": self.assumption,
            "severity": self.severity,
            "message": self.message,
            "suggestion": self.suggestion,
        }


class ValidationReport:
    """Outcome of sampling the structural assumptions on a problem."""

    def __init__(self):
        self.issues: List[ValidationIssue] = []
        self.metrics: Dict[str, Any] = {}

    @property
    def passed(self) -> bool:
        return not any(issue.severity == "error" for issue in self.issues)

    def add(self, assumption: str, severity: str, message: str, suggestion: Optional[str] = None) -> None:
        self.issues.append(ValidationIssue(assumption, severity, message, suggestion))
        if severity == "error":
            logger.warning(f"Assumption {assumption} violated: {message}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "metrics": self.metrics,
            "issues": [issue.to_dict() for issue in self.issues],
        }


def _sample_inside(domain: Domain, n: int, rng: np.random.Generator) -> np.ndarray:
    xmin, xmax, ymin, ymax = domain.bounding_box
    out = []
    count = 0
    while count < n:
        cand = rng.uniform([xmin, ymin], [xmax, ymax], size=(2 * n, 2))
        cand = cand[domain.contains(cand)]
        out.append(cand)
        count += len(cand)
    return np.concatenate(out)[:n]


def validate_assumptions(problem: Problem, n_samples: int = 10000, rng_seed: int = 0) -> ValidationReport:
    """Sample the structural assumptions on coefficients, domain, data and semilinear term."""
    from services import flow

    report = ValidationReport()
    rng = np.random.default_rng(rng_seed)
    c = problem.coefficients
    domain = problem.domain
    x = _sample_inside(domain, n_samples, rng)

    # ellipticity
    eig = np.linalg.eigvalsh(c.a(x))
    report.metrics["a_min_eigenvalue"] = float(eig.min())
    report.metrics["a_max_eigenvalue"] = float(eig.max())
    report.metrics["theta"] = c.theta
    if eig.min() < c.theta - 1e-12 or eig.max() > 1.0 / c.theta + 1e-12:
        report.add("A2", "error",
                   f"eigenvalues of a span [{eig.min():.4g}, {eig.max():.4g}], outside [θ, 1/θ] with θ={c.theta}",
                   "lower theta for this preset")

    # Lipschitz quotients
    i = rng.integers(0, len(x), n_samples)
    j = rng.integers(0, len(x), n_samples)
    dist = np.linalg.norm(x[i] - x[j], axis=1)
    keep = dist > 1e-12
    lip_b = np.linalg.norm(c.b(x[i[keep]]) - c.b(x[j[keep]]), axis=1) / dist[keep]
    lip_a = np.linalg.norm(c.a(x[i[keep]]) - c.a(x[j[keep]]), axis=(1, 2)) / dist[keep]
    report.metrics["lipschitz_b"] = float(lip_b.max())
    report.metrics["lipschitz_a"] = float(lip_a.max())

    # equilibrium
    b0 = float(np.linalg.norm(c.b(np.zeros(2))))
    report.metrics["b_at_origin"] = b0
    if b0 > 1e-12:
        report.add("A4", "error", f"|b(0)| = {b0:.3e}; the origin must be an equilibrium")

    # inward drift on the boundary
    _, y = domain.boundary_samples(1024)
    b_dot_nu = np.sum(c.b(y) * domain.unit_normals(y), axis=1)
    report.metrics["max_boundary_b_dot_nu"] = float(b_dot_nu.max())
    if b_dot_nu.max() >= 0:
        worst = y[int(np.argmax(b_dot_nu))]
        report.add("A5", "error", f"b·ν = {b_dot_nu.max():.4g} ≥ 0 at {worst.tolist()}",
                   "the drift must point strictly into the domain on the boundary")

    # stability
    radius = float(np.linalg.norm(y, axis=1).max())
    try:
        T = flow.confinement_time(c, 0.1 * radius, radius, n_samples=256)
        report.metrics["confinement_time"] = T
    except StabilityError as e:
        report.metrics["confinement_time"] = None
        report.add("A4", "error", f"flow is not confining: {e}")

    # boundary data continuity
    g = problem.boundary_data
    h = domain.diameter / 64.0
    lattice = np.stack(np.meshgrid(np.arange(-32, 33) * h, np.arange(-32, 33) * h, indexing="ij"), axis=-1)
    inside = domain.contains(lattice)
    gv = np.where(inside, g(lattice), np.nan)
    jumps = np.concatenate([np.abs(np.diff(gv, axis=0)).ravel(), np.abs(np.diff(gv, axis=1)).ravel()])
    jumps = jumps[np.isfinite(jumps)]
    lip_g = g.lipschitz_estimate(x, rng)
    report.metrics["lipschitz_g"] = lip_g
    if jumps.size and jumps.max() > 10.0 * h * max(lip_g, 1e-12):
        report.add("g", "error", f"boundary data jumps by {jumps.max():.4g} between neighbouring nodes")

    if problem.semilinear is not None:
        _validate_semilinear(problem, x, rng, report)

    logger.info(f"Validated assumptions for {c.preset} on {domain.describe()}: passed={report.passed}")
    return report


def _validate_semilinear(problem: Problem, x: np.ndarray, rng: np.random.Generator, report: ValidationReport) -> None:
    term = problem.semilinear
    n = min(len(x), 2000)
    xs = x[:n]
    p = rng.normal(size=(n, 2))
    u = rng.uniform(-3.0, 3.0, size=n)
    du = rng.uniform(0.0, 2.0, size=n)
    worst_bound = 0.0
    worst_mono = 0.0
    worst_zero = 0.0
    for eps in (0.2, 0.1, 0.05):
        M = term.M(eps)
        f = term(eps, xs, u, p)
        worst_bound = max(worst_bound, float(np.max(np.abs(f) - M * np.linalg.norm(p, axis=1))))
        worst_mono = max(worst_mono, float(np.max(term(eps, xs, u + du, p) - f)))
        worst_zero = max(worst_zero, float(np.max(np.abs(term(eps, xs, u, np.zeros_like(p))))))
    report.metrics["semilinear_bound_excess"] = worst_bound
    report.metrics["semilinear_monotonicity_excess"] = worst_mono
    report.metrics["semilinear_zero_gradient"] = worst_zero
    if worst_bound > 1e-12:
        report.add("A6", "error", f"|f| exceeds M(ε)|p| by {worst_bound:.3e}")
    if worst_mono > 1e-12:
        report.add("A6", "error", f"f is increasing in u by up to {worst_mono:.3e}")
    if worst_zero > 1e-12:
        report.add("A6", "error", f"f(x,u,0) reaches {worst_zero:.3e}")
    M_small = term.M(1e-6)
    report.metrics["M_at_1e-6"] = M_small
    if M_small > 1e-3:
        report.add("A6", "error", f"M(ε) does not vanish as ε→0 (M(1e-6) = {M_small:.4g})",
                   "use a semilinear term whose bound scales with ε")
