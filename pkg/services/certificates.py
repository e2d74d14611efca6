"""
Grid constructions of the auxiliary functions used in the metastability
estimates, each bundled with a recomputable check of its differential
inequality.

Stages:
    psi          reverse-flow potential with b·Dψ = −1
    psi_r        clamped and scaled ψ, strict subsolution off B_r
    V_r          blend of V with ψ_r
    W_r          shrink pull-back and mollification of V_r
    exit_W       supersolution below λ built from u_μ
    exp_barrier  exp((W_r − μ)/ε) + R_ε t
    appendix     Perron barriers for the semilinear Dirichlet problem
"""

import csv
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from services.errors import ConstructionError, InfeasibleMarginError, ParameterError, PreconditionError
from services.flow import reverse_flow_integral
from services.geometry import GridFunction, MaskedGrid, boundary_normal, normal_offset_gap, signed_distance
from services.parabolic import assemble_operator
from services.quasipotential import PotentialField, solve_from_point, solve_to_boundary, stencil_hamiltonian
from services.residuals import (
    ResidualReport,
    central_gradient,
    grid_lipschitz,
    hamiltonian_residual,
    make_report,
    second_differences,
)

logger = logging.getLogger(__name__)

KINDS = ("psi", "psi_r", "V_r", "W_r", "exit_W", "exp_barrier", "appendix_barrier")
STAGES = ("psi_r", "V_r", "W_r")
SHRINK_LADDER = (0.05, 0.1, 0.15, 0.2, 0.3)
GAMMA_MIN = 0.01
EPS_LADDER_RATIO = 0.75
EPS_LADDER_SIZE = 24


class Certificate:
    """A constructed grid function with the checks of its claimed inequality."""

    def __init__(
        self,
        kind: str,
        values: GridFunction,
        eta: float,
        params: Dict[str, Any],
        problem,
        inputs: Optional[Dict[str, np.ndarray]] = None,
        time_slope: Optional[float] = None,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown certificate kind '{kind}'")
        self.kind = kind
        self.values = values
        self.eta = float(eta)
        self.params = params
        self.problem = problem
        self.inputs = inputs or {}
        self.time_slope = time_slope
        self.reports: List[ResidualReport] = []
        self.checks: List[Dict[str, Any]] = []

    @property
    def grid(self) -> MaskedGrid:
        return self.values.grid

    @property
    def report(self) -> Optional[ResidualReport]:
        return self.reports[0] if self.reports else None

    @property
    def verified(self) -> bool:
        return all(r.passed for r in self.reports) and all(c["passed"] for c in self.checks)

    def recompute(self) -> Tuple[List[ResidualReport], List[Dict[str, Any]]]:
        """Re-derive every report and check from the stored values and params."""
        return _VERIFIERS[self.kind](self)

    def verify(self) -> bool:
        self.reports, self.checks = self.recompute()
        status = "verified" if self.verified else "FAILED"
        logger.info(f"Certificate {self.kind} {status} (η={self.eta:.4g})")
        return self.verified

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "params": _jsonable(self.params),
            "eta": self.eta,
            "time_slope": self.time_slope,
            "residual_stats": [r.to_dict() for r in self.reports],
            "checks": self.checks,
            "verified": self.verified,
        }

    def export_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["x1", "x2", self.kind])
            for (x1, x2), v in zip(self.grid.coordinates, self.values.values):
                writer.writerow([repr(float(x1)), repr(float(x2)), repr(float(v))])


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


_SENSES = {
    "<=": lambda v, b: v <= b,
    "<": lambda v, b: v < b,
    ">=": lambda v, b: v >= b,
    ">": lambda v, b: v > b,
}


def bound_check(name: str, value: float, bound: float, sense: str = "<=") -> Dict[str, Any]:
    return {"name": name, "value": float(value), "bound": float(bound), "sense": sense,
            "passed": bool(_SENSES[sense](value, bound))}


def _radii(grid: MaskedGrid) -> np.ndarray:
    return np.linalg.norm(grid.coordinates, axis=1)


def _max_diffusion_eigenvalue(c) -> float:
    return float(np.linalg.eigvalsh(c.a(np.zeros(2))).max())


# ---------------------------------------------------------------------------
# ψ
# ---------------------------------------------------------------------------

def radial_ramp(R: float, ramp_width: float) -> Callable[[np.ndarray], np.ndarray]:
    """1 on B_{R−w}, linear down to 0 at radius R."""
    return lambda y: np.clip((R - np.linalg.norm(y, axis=-1)) / ramp_width, 0.0, 1.0)


def build_psi(problem, grid: MaskedGrid, R: float = 2.0, ramp_width: float = 1.0, dt: float = 5e-3,
              annulus: Tuple[float, float] = (0.1, 0.95), tol: float = 0.05) -> Certificate:
    """ψ(x) = −∫₀^∞ f(X(−t;x)) dt on active nodes; nodes within 2h of 0 are masked."""
    if ramp_width <= 0:
        raise PreconditionError(f"ramp width must be positive, got {ramp_width}")
    _, samples = problem.domain.boundary_samples()
    reach = float(np.linalg.norm(samples, axis=1).max())
    if reach >= R:
        raise PreconditionError(f"the closed domain (radius {reach:.4f}) must lie inside B_{R:g}")
    if R - ramp_width < reach:
        logger.warning(f"ramp starts inside the domain (R−w={R - ramp_width:g} < {reach:.4f}); f is not 1 on Ω̄")

    radii = _radii(grid)
    mask = radii <= 2.0 * grid.h
    integral, _ = reverse_flow_integral(problem.coefficients, grid.coordinates[~mask],
                                        radial_ramp(R, ramp_width), R, dt)
    values = np.empty(grid.n_active)
    values[~mask] = -integral
    values[mask] = values[~mask].min()

    params = {"R": R, "ramp_width": ramp_width, "dt": dt, "masked_radius": 2.0 * grid.h,
              "annulus": list(annulus), "tolerance": tol}
    cert = Certificate("psi", GridFunction(grid, values, "psi"), 0.0, params, problem, {"mask": mask})
    cert.verify()
    return cert


def _verify_psi(cert: Certificate):
    grid, p = cert.grid, cert.params
    lo, hi = p["annulus"]
    ids = grid.interior_ids
    rr = _radii(grid)[ids]
    ids = ids[(rr >= lo) & (rr <= hi)]
    grad, valid = central_gradient(grid, cert.values.values, ids)
    bdot = np.sum(cert.problem.coefficients.b(grid.coordinates[ids]) * grad, axis=1)
    report = make_report("transport b·Dψ = −1", grid, ids[valid], np.abs(bdot + 1.0)[valid], p["tolerance"])
    return [report], []


# ---------------------------------------------------------------------------
# Strict subsolutions ψ_r → V_r → W_r
# ---------------------------------------------------------------------------

def _stage_psi_r(problem, psi: Certificate, r: float, tol: float) -> Certificate:
    grid = psi.grid
    radii = _radii(grid)
    if not np.any(radii >= r):
        raise ConstructionError(f"no active nodes outside B_{r:g}")
    clamp = float(psi.values.values[radii >= r].min())
    chi = np.maximum(psi.values.values, clamp)
    L = grid_lipschitz(grid, chi)
    C = max(L, _max_diffusion_eigenvalue(problem.coefficients) * L * L)
    theta = problem.coefficients.theta
    lam = theta / (2.0 * C)
    params = {"r": r, "clamp": clamp, "L": L, "C": C, "theta": theta, "lambda": lam, "tolerance": tol}
    cert = Certificate("psi_r", GridFunction(grid, lam * chi, "psi_r"), lam / 2.0, params, problem)
    cert.verify()
    return cert


def _verify_psi_r(cert: Certificate):
    grid, p = cert.grid, cert.params
    ids = grid.interior_ids
    res, valid = hamiltonian_residual(grid, cert.values.values, cert.problem.coefficients, ids)
    outside = _radii(grid)[ids] > p["r"]
    strict = make_report("H(x,Dψ_r) ≤ −λ/2 off B_r", grid, ids[valid & outside],
                         (res + cert.eta)[valid & outside], p["tolerance"])
    inner = make_report("H(x,Dψ_r) ≤ 0 in B_r", grid, ids[valid & ~outside], res[valid & ~outside], p["tolerance"])
    return [strict, inner], []


def _stage_V_r(problem, V: GridFunction, psi_r: Certificate, tol: float) -> Certificate:
    r = psi_r.params["r"]
    gap = float(np.max(np.abs(V.values - psi_r.values.values)))
    if not np.isfinite(gap):
        raise ConstructionError("ψ_r is unbounded on the grid; blend weight collapses to 0")
    delta = min(r / (2.0 * gap), 0.5) if gap > 0 else 0.5
    if delta <= 1e-12:
        raise ConstructionError(f"blend weight collapses to 0 (‖V−ψ_r‖ = {gap:.3e})")
    values = (1.0 - delta) * V.values + delta * psi_r.values.values
    eta = delta * psi_r.eta
    params = {"r": r, "delta": delta, "gap": gap, "lambda": psi_r.params["lambda"], "tolerance": tol}
    cert = Certificate("V_r", GridFunction(V.grid, values, "V_r"), eta, params, problem, {"V": V.values})
    cert.verify()
    return cert


def _verify_V_r(cert: Certificate):
    grid, p = cert.grid, cert.params
    ids = grid.interior_ids
    res, valid = hamiltonian_residual(grid, cert.values.values, cert.problem.coefficients, ids)
    keep = valid & (_radii(grid)[ids] > p["r"])
    report = make_report("H(x,DV_r) ≤ −η off B_r", grid, ids[keep], (res + cert.eta)[keep], p["tolerance"])
    dist = float(np.max(np.abs(cert.values.values - cert.inputs["V"])))
    return [report], [bound_check("‖V_r − V‖∞ < r", dist, p["r"])]


def _padded_lattice(grid: MaskedGrid, pad: int) -> np.ndarray:
    nx, ny = grid.shape
    xs = grid.origin[0] + grid.h * np.arange(-pad, nx + pad)
    ys = grid.origin[1] + grid.h * np.arange(-pad, ny + pad)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X, Y], axis=-1)


def mollifier_kernel(radius: float, h: float) -> np.ndarray:
    """Discretely normalised bump (1 − |z/γ|²)³ on |z| < γ."""
    k = int(math.ceil(radius / h))
    offs = h * np.arange(-k, k + 1)
    Z2 = (offs[:, None] ** 2 + offs[None, :] ** 2) / radius ** 2
    kernel = np.where(Z2 < 1.0, (1.0 - Z2) ** 3, 0.0)
    return kernel / kernel.sum()


def _stage_W_r(problem, V_r: Certificate, V: GridFunction, tol: float) -> Certificate:
    grid = V_r.grid
    domain = problem.domain
    if not domain.is_star_shaped:
        raise ConstructionError(f"the shrink map needs a domain star-shaped about 0; {domain.describe()} is not")
    r = V_r.params["r"]
    gamma = r / 4.0
    kernel = mollifier_kernel(gamma, grid.h)
    pad = kernel.shape[0] // 2 + 1
    lattice = _padded_lattice(grid, pad)
    active = np.pad(grid.active, pad)
    needed = ndimage.binary_dilation(active, structure=kernel > 0)
    ij = grid.ij + pad

    chosen = None
    for shrink in sorted(SHRINK_LADDER, reverse=True):
        pulled_pts = (1.0 - shrink) * lattice
        if np.any(domain.rho(pulled_pts[needed]) > 1e-12):
            continue
        pulled = V_r.values.evaluate(pulled_pts.reshape(-1, 2)).reshape(lattice.shape[:2])
        smooth = ndimage.convolve(pulled, kernel, mode="nearest")
        values = smooth[ij[:, 0], ij[:, 1]]
        if np.max(np.abs(values - V.values)) <= 2.0 * r:
            chosen = (shrink, values)
            break
    if chosen is None:
        raise ConstructionError(f"no shrink factor in {SHRINK_LADDER} keeps W_r within 2r of V and inside Ω")
    shrink, values = chosen

    ids = grid.interior_ids
    res, valid = hamiltonian_residual(grid, values, problem.coefficients, ids)
    far = valid & (_radii(grid)[ids] > r + gamma)
    margin = -float(res[far].max()) if far.any() else 0.0
    eta = min(V_r.eta, margin)
    params = {"r": r, "shrink": shrink, "mollifier_radius": gamma, "margin": margin,
              "check_radius": r + gamma, "tolerance": tol}
    cert = Certificate("W_r", GridFunction(grid, values, "W_r"), eta, params, problem, {"V": V.values})
    cert.verify()
    return cert


def _verify_W_r(cert: Certificate):
    grid, p = cert.grid, cert.params
    ids = grid.interior_ids
    res, valid = hamiltonian_residual(grid, cert.values.values, cert.problem.coefficients, ids)
    radii = _radii(grid)[ids]
    far = valid & (radii > p["check_radius"])
    inner = valid & (radii <= p["r"])
    strict = make_report("H(x,DW_r) ≤ −η/2 off B_r", grid, ids[far], (res + 0.5 * cert.eta)[far], 0.0)
    bounded = make_report("H(x,DW_r) ≤ 1 in B_r", grid, ids[inner], (res - 1.0)[inner], p["tolerance"])
    dist = float(np.max(np.abs(cert.values.values - cert.inputs["V"])))
    checks = [bound_check("η > 0", cert.eta, 0.0, ">"),
              bound_check("‖W_r − V‖∞ ≤ 3r", dist, 3.0 * p["r"])]
    return [strict, bounded], checks


def strict_subsolution_stages(problem, grid: MaskedGrid, r: float, V: Optional[PotentialField] = None,
                              psi: Optional[Certificate] = None, R: float = 2.0, ramp_width: float = 1.0,
                              tol: Optional[float] = None, upto: str = "W_r") -> Dict[str, Certificate]:
    """Run the ψ_r → V_r → W_r pipeline up to the requested stage."""
    if upto not in STAGES:
        raise PreconditionError(f"stage must be one of {STAGES}, got '{upto}'")
    tol = 5.0 * grid.h if tol is None else tol
    if psi is None:
        psi = build_psi(problem, grid, R, ramp_width)
    out = {"psi_r": _stage_psi_r(problem, psi, r, tol)}
    if upto == "psi_r":
        return out
    if V is None:
        V = solve_from_point(problem, grid)
    out["V_r"] = _stage_V_r(problem, V, out["psi_r"], tol)
    if upto == "W_r":
        out["W_r"] = _stage_W_r(problem, out["V_r"], V, tol)
    return out


def build_strict_subsolution(problem, grid: MaskedGrid, r: float, stage: str = "W_r", **kwargs) -> Certificate:
    return strict_subsolution_stages(problem, grid, r, upto=stage, **kwargs)[stage]


# ---------------------------------------------------------------------------
# Inf-convolution
# ---------------------------------------------------------------------------

def _lower_envelope(f: np.ndarray, c: float) -> np.ndarray:
    """min_q f[q] + c·(p − q)² for every p, skipping infinite f."""
    n = len(f)
    out = np.full(n, np.inf)
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        return out
    v = np.zeros(finite.size, dtype=np.int64)
    z = np.empty(finite.size + 1)
    k = 0
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    for q in finite[1:]:
        s = ((f[q] + c * q * q) - (f[v[k]] + c * v[k] * v[k])) / (2.0 * c * (q - v[k]))
        while s <= z[k]:
            k -= 1
            s = ((f[q] + c * q * q) - (f[v[k]] + c * v[k] * v[k])) / (2.0 * c * (q - v[k]))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        out[p] = f[v[k]] + c * (p - v[k]) ** 2
    return out


def inf_convolution(f: GridFunction, alpha: float) -> GridFunction:
    """min over active y of f(y) + |x − y|²/α, by two separable envelope passes."""
    if alpha <= 0:
        raise PreconditionError(f"α must be positive, got {alpha}")
    grid = f.grid
    c = grid.h * grid.h / alpha
    full = grid.full_array(f.values, fill=np.inf)
    for i in range(full.shape[0]):
        full[i, :] = _lower_envelope(full[i, :], c)
    for j in range(full.shape[1]):
        full[:, j] = _lower_envelope(full[:, j], c)
    return GridFunction(grid, full[grid.ij[:, 0], grid.ij[:, 1]], name=f"{f.name}_infconv")


def semiconcavity_report(f: GridFunction, alpha: float, tol: float) -> ResidualReport:
    """Second differences along axes and diagonals against the bound 2/α."""
    grid = f.grid
    ids = grid.interior_ids
    d2, valid = second_differences(grid, f.values, ids)
    res = d2.max(axis=1) - 2.0 / alpha
    return make_report("D²W ≤ 2/α", grid, ids[valid], res[valid], tol)


# ---------------------------------------------------------------------------
# Exit supersolution
# ---------------------------------------------------------------------------

def build_exit_supersolution(problem, grid: MaskedGrid, lam: float, V: Optional[PotentialField] = None,
                             U: Optional[PotentialField] = None, stencil_order: int = 2, eta_cap: float = 0.01,
                             tol: Optional[float] = None, max_halvings: int = 8) -> Certificate:
    """W = infconv(pull-back of u_μ + γ) with 0 < W < λ and H(x,−DW) ≥ η."""
    if V is None:
        V = solve_from_point(problem, grid, stencil_order)
    m0 = V.m0
    gamma = (lam - m0) / 4.0
    if gamma < GAMMA_MIN:
        raise InfeasibleMarginError(
            f"λ={lam:g} leaves margin γ={gamma:.4f} above m0={m0:.4f}; need λ ≥ m0 + {4 * GAMMA_MIN:g}"
        )
    if not problem.domain.is_star_shaped:
        raise ConstructionError(f"the shrink map needs a domain star-shaped about 0; {problem.domain.describe()} is not")
    if U is None:
        U = solve_to_boundary(problem, grid, 0.0, stencil_order)

    mu = gamma
    for _ in range(max_halvings + 1):
        u_mu = solve_to_boundary(problem, grid, mu, stencil_order)
        gap = float(np.max(np.abs(u_mu.values - U.values)))
        if gap < gamma:
            break
        mu /= 2.0
    else:
        raise ConstructionError(f"‖u_μ − U‖ stays above γ={gamma:.4f} down to μ={mu:.3e}")

    raised = GridFunction(grid, u_mu.values + gamma, "u_mu+gamma")
    lip = max(grid_lipschitz(grid, raised.values), 1e-12)
    shrink = mu / (16.0 * max(lip, 1.0) ** 2)
    pulled = raised.with_values(raised.evaluate((1.0 - shrink) * grid.coordinates), "W_delta")
    # minimisers of the inf-convolution lie within α·Lip of x; keep them inside Ω/(1 − δ)
    collar = shrink * float(-signed_distance(problem.domain, np.zeros(2))) / (1.0 - shrink)
    alpha = min(4.0 * grid.h, 0.5 * collar) / lip
    W = inf_convolution(pulled, alpha)
    W.name = "exit_W"
    eta = min(mu / 4.0, eta_cap)
    params = {"lambda": lam, "m0": m0, "gamma": gamma, "mu": mu, "stencil_order": stencil_order, "gap": gap,
              "lip": lip, "shrink": shrink, "collar": collar, "alpha": alpha,
              "tolerance": 5.0 * grid.h if tol is None else tol,
              "semiconcavity_tolerance": 10.0 * grid.h}
    cert = Certificate("exit_W", W, eta, params, problem)
    cert.verify()
    return cert


def _trace_second(grid: MaskedGrid, values: np.ndarray, ids: np.ndarray, a: np.ndarray):
    d2, valid = second_differences(grid, values, ids)
    uxx, uyy, dpp, dpm = d2.T
    uxy = 0.5 * (dpp - dpm)
    return a[0, 0] * uxx + 2.0 * a[0, 1] * uxy + a[1, 1] * uyy, valid


def _verify_exit_W(cert: Certificate):
    grid, p = cert.grid, cert.params
    c = cert.problem.coefficients
    ids = grid.interior_ids
    H, valid = stencil_hamiltonian(c, grid, cert.values.values, ids, p.get("stencil_order", 2))
    super_report = make_report("H(x,−DW) ≥ η", grid, ids[valid], (cert.eta - H)[valid], p["tolerance"])
    tr, tvalid = _trace_second(grid, cert.values.values, ids, c.a(np.zeros(2)))
    trace_report = make_report("η·tr[aD²W] ≤ 1", grid, ids[tvalid], (cert.eta * tr - 1.0)[tvalid], 0.0)
    semi = semiconcavity_report(cert.values, p["alpha"], p["semiconcavity_tolerance"])
    w = cert.values.values
    checks = [bound_check("min W > 0", w.min(), 0.0, ">"),
              bound_check("max W < λ", w.max(), p["lambda"], "<")]
    return [super_report, trace_report, semi], checks


# ---------------------------------------------------------------------------
# Exponential barrier
# ---------------------------------------------------------------------------

def _barrier_residual(problem, grid: MaskedGrid, W: np.ndarray, mu: float, r: float, eps: float):
    v = np.exp((W - mu) / eps)
    inside = _radii(grid) <= r
    R_eps = 2.0 / eps * float(v[inside].max())
    Lv = assemble_operator(problem, grid, eps).apply(v)
    return v, R_eps, Lv - R_eps


def probe_barrier_threshold(problem, W_r: Certificate, mu: float) -> float:
    """Largest ε on the ladder 1, ¾, (¾)², … for which R_ε > L_ε^h v^ε at every interior node."""
    grid = W_r.grid
    for k in range(EPS_LADDER_SIZE):
        eps = EPS_LADDER_RATIO ** k
        _, _, res = _barrier_residual(problem, grid, W_r.values.values, mu, W_r.params["r"], eps)
        if res.max() < 0:
            return eps
    return 0.0


def build_exponential_barrier(problem, W_r: Certificate, mu: float, eps: float) -> Certificate:
    """v^ε = exp((W_r − μ)/ε) and w^ε = v^ε + R_ε t with R_ε = (2/ε) max_{B_r} v^ε."""
    if W_r.kind != "W_r":
        raise PreconditionError(f"expected a W_r certificate, got '{W_r.kind}'")
    if eps <= 0:
        raise PreconditionError(f"ε must be positive, got {eps}")
    grid = W_r.grid
    r = W_r.params["r"]
    v, R_eps, _ = _barrier_residual(problem, grid, W_r.values.values, mu, r, eps)
    eps0 = probe_barrier_threshold(problem, W_r, mu)
    if eps > eps0:
        logger.warning(f"ε={eps:g} is above the probed threshold ε0={eps0:g}; the barrier is expected to fail")
    params = {"r": r, "mu": mu, "eps": eps, "R_eps": R_eps, "eps0": eps0}
    cert = Certificate("exp_barrier", GridFunction(grid, v, "v_eps"), W_r.eta, params, problem,
                       {"W_r": W_r.values.values}, time_slope=R_eps)
    cert.verify()
    return cert


def barrier_at(cert: Certificate, t: float) -> np.ndarray:
    """w^ε(·, t) on active nodes."""
    return cert.values.values + cert.time_slope * t


def barrier_domination(cert: Certificate, solution, delta: float = 0.0) -> ResidualReport:
    """u^ε − δ − w^ε(·, t) over every stored slice; the worst slice per interior node.

    For a verified barrier whose v^ε bounds the initial data and the boundary
    data, the backward-Euler solution stays below w^ε by the M-matrix property.
    """
    if cert.kind != "exp_barrier":
        raise PreconditionError(f"expected an exp_barrier certificate, got '{cert.kind}'")
    grid = cert.grid
    if solution.grid is not grid:
        raise PreconditionError("the solution and the barrier must live on the same grid")
    if abs(solution.eps - cert.params["eps"]) > 1e-12:
        raise PreconditionError(f"barrier built for ε={cert.params['eps']:g}, solution has ε={solution.eps:g}")
    ids = grid.interior_ids
    worst = np.full(len(ids), -np.inf)
    for t, u in zip(solution.times, solution.values):
        worst = np.maximum(worst, u[ids] - delta - barrier_at(cert, t)[ids])
    return ResidualReport("u^ε − δ ≤ w^ε", worst, ids, grid.coordinates[ids], 0.0)


def _verify_exp_barrier(cert: Certificate):
    grid, p = cert.grid, cert.params
    _, R_eps, res = _barrier_residual(cert.problem, grid, cert.inputs["W_r"], p["mu"], p["r"], p["eps"])
    ids = grid.interior_ids
    report = ResidualReport("R_ε > L_ε^h v^ε", res, ids, grid.coordinates[ids], 0.0)
    strict = bound_check("strict inequality", report.max, 0.0, "<")
    return [report], [strict, bound_check("R_ε recomputed", abs(R_eps - p["R_eps"]), 1e-12 * max(1.0, R_eps))]


# ---------------------------------------------------------------------------
# Perron barriers
# ---------------------------------------------------------------------------

def lambda_balance(eps: float, M_eps: float, theta: float, n: int, d: float, b_norm: float) -> float:
    """Λ solving ε(2nθ⁻¹ − 4θΛ) + 2(d+1)(M + ‖b‖) = 0."""
    if eps <= 0:
        raise ParameterError(f"ε must be positive, got {eps}")
    if M_eps < 0:
        raise ParameterError(f"M(ε) must be nonnegative, got {M_eps}")
    Lam = (2.0 * n / theta * eps + 2.0 * (d + 1.0) * (M_eps + b_norm)) / (4.0 * theta * eps)
    if not Lam > 0:
        raise ParameterError(f"balance equation gives Λ={Lam} ≤ 0 for ε={eps}, M={M_eps}")
    return Lam


def balance_residual(eps: float, M_eps: float, theta: float, n: int, d: float, b_norm: float, Lam: float) -> float:
    return eps * (2.0 * n / theta - 4.0 * theta * Lam) + 2.0 * (d + 1.0) * (M_eps + b_norm)


def _thin(points: np.ndarray, limit: Optional[int]) -> np.ndarray:
    order = np.argsort(np.arctan2(points[:, 1], points[:, 0]), kind="stable")
    points = points[order]
    if limit is None or len(points) <= limit:
        return points
    return points[np.linspace(0, len(points) - 1, limit).astype(int)]


def _plus_operator(op, grid: MaskedGrid, M_eps: float, block: np.ndarray) -> np.ndarray:
    """𝓛⁺_h of each column of a (n_active, k) block, at interior nodes."""
    ids = grid.interior_ids
    out = op.interior @ block[ids] + op.coupling @ block[grid.boundary_ids]
    if M_eps > 0:
        h = grid.h
        gx = (block[grid.neighbor_ids(1, 0, ids)] - block[grid.neighbor_ids(-1, 0, ids)]) / (2 * h)
        gy = (block[grid.neighbor_ids(0, 1, ids)] - block[grid.neighbor_ids(0, -1, ids)]) / (2 * h)
        out = out + M_eps * np.hypot(gx, gy)
    return out


def build_appendix_barriers(problem, grid: MaskedGrid, eps: float, M_eps: float, n_lambda: int = 4,
                            max_boundary_points: Optional[int] = None, gammas: Sequence[float] = (0.2, 0.1, 0.05),
                            tol: float = 1e-6, chunk: int = 64, rng_seed: int = 0) -> Certificate:
    """w = min(w_b, w_i) from the boundary barriers v_b and the initial barriers v_i."""
    c = problem.coefficients
    domain = problem.domain
    g = problem.boundary_data
    theta, n, d = c.theta, 2, domain.diameter
    _, samples = domain.boundary_samples()
    b_norm = float(np.linalg.norm(c.b(np.concatenate([grid.coordinates, samples])), axis=1).max())
    Lam = lambda_balance(eps, M_eps, theta, n, d, b_norm)
    residual = balance_residual(eps, M_eps, theta, n, d, b_norm, Lam)

    lam0 = domain.offset_threshold()
    lambdas = [lam0 / 2 ** k for k in range(1, n_lambda + 1)]
    deltas = [normal_offset_gap(domain, lam) for lam in lambdas]
    alphas = [Lam / dl ** 2 for dl in deltas]

    ys = _thin(grid.projections, max_boundary_points)
    nus = boundary_normal(domain, ys)
    g_y = g(ys)
    lip_g = g.lipschitz_estimate(grid.coordinates, np.random.default_rng(rng_seed))
    omega = lambda s: 1.05 * lip_g * s
    A = 1.01 * omega(d) / (1.0 - math.exp(-Lam))

    op = assemble_operator(problem, grid, eps)
    X = grid.coordinates
    w_b = np.full(grid.n_active, np.inf)
    w_b_at_y = np.full(len(ys), np.inf)
    worst = np.full(len(grid.interior_ids), -np.inf)
    v_b_at_y = []
    for lam, dl, alpha in zip(lambdas, deltas, alphas):
        Z = ys + lam * nus
        v_self = 1.0 - np.exp(-alpha * (np.sum((ys - Z) ** 2, axis=1) - dl ** 2))
        v_b_at_y.append(float(np.abs(v_self).max()))
        for start in range(0, len(ys), chunk):
            zc = Z[start:start + chunk]
            q = np.sum((X[:, None, :] - zc[None, :, :]) ** 2, axis=2) - dl ** 2
            block = 1.0 - np.exp(-alpha * q)
            worst = np.maximum(worst, _plus_operator(op, grid, M_eps, block).max(axis=1))
            cand = g_y[start:start + chunk] + omega(3 * lam) + A * block
            w_b = np.minimum(w_b, cand.min(axis=1))
            qy = np.sum((ys[:, None, :] - zc[None, :, :]) ** 2, axis=2) - dl ** 2
            w_b_at_y = np.minimum(w_b_at_y, (g_y[start:start + chunk] + omega(3 * lam) + A * (1.0 - np.exp(-alpha * qy))).min(axis=1))

    g_grid = GridFunction(grid, g(X), "g")
    w_i = np.full(grid.n_active, np.inf)
    Bs, Cs = [], []
    for gm in gammas:
        B = omega(d) / gm ** 2
        Bs.append(B)
        Cs.append(2.0 * B * (eps * float(np.trace(c.a(np.zeros(2)))) + (b_norm + M_eps) * d))
        w_i = np.minimum(w_i, omega(gm) + inf_convolution(g_grid, 1.0 / B).values)

    params = {
        "eps": eps, "M_eps": M_eps, "theta": theta, "n": n, "d": d, "b_norm": b_norm,
        "Lambda": Lam, "balance_residual": residual, "lambdas": lambdas, "deltas": deltas, "alphas": alphas,
        "lambda0": lam0, "A": A, "lip_g": lip_g, "omega_coefficient": 1.05 * lip_g, "n_boundary_points": len(ys),
        "v_b_at_y": v_b_at_y, "gammas": list(gammas), "B": Bs, "C": Cs, "tolerance": tol,
        "boundary_tolerance": omega(3 * lambdas[-1]) + 2.0 * grid.h * lip_g,
    }
    inputs = {"w_b": w_b, "w_i": w_i, "w_b_at_y": w_b_at_y, "g_y": g_y, "v_b_worst": worst, "ys": ys}
    cert = Certificate("appendix_barrier", GridFunction(grid, np.minimum(w_b, w_i), "w"), 0.0, params, problem, inputs)
    cert.verify()
    return cert


def _verify_appendix(cert: Certificate):
    grid, p, inp = cert.grid, cert.params, cert.inputs
    g = cert.problem.boundary_data
    ids = grid.interior_ids
    g_nodes = g(grid.coordinates)
    slack = 2.0 * grid.h * p["lip_g"]
    reports = [
        ResidualReport("𝓛⁺ v_b ≤ 0", inp["v_b_worst"], ids, grid.coordinates[ids], p["tolerance"]),
        make_report("w_b ≥ g", grid, np.arange(grid.n_active), g_nodes - inp["w_b"], slack + p["omega_coefficient"] * 3 * p["lambdas"][-1]),
        ResidualReport("|w_b − g| on ∂Ω", np.abs(inp["w_b_at_y"] - inp["g_y"]), np.arange(len(inp["ys"])),
                       inp["ys"], p["boundary_tolerance"]),
        make_report("w_i ≥ g", grid, np.arange(grid.n_active), g_nodes - inp["w_i"], slack),
    ]
    recomputed = balance_residual(p["eps"], p["M_eps"], p["theta"], p["n"], p["d"], p["b_norm"], p["Lambda"])
    checks = [
        bound_check("Λ balance residual", abs(recomputed), 1e-12),
        bound_check("α·δ(λ)² = Λ", max(abs(a * dl ** 2 - p["Lambda"]) for a, dl in zip(p["alphas"], p["deltas"])),
                    1e-9 * p["Lambda"]),
    ]
    return reports, checks


_VERIFIERS = {
    "psi": _verify_psi,
    "psi_r": _verify_psi_r,
    "V_r": _verify_V_r,
    "W_r": _verify_W_r,
    "exit_W": _verify_exit_W,
    "exp_barrier": _verify_exp_barrier,
    "appendix_barrier": _verify_appendix,
}
