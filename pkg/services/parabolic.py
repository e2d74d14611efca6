"""
Monotone implicit finite differences for u_t = ε tr[aD²u] + b·Du (+ f_ε)
and the stationary Dirichlet problem on masked grids.

Unknowns live on interior nodes; boundary-adjacent nodes carry the Dirichlet
data g evaluated at their boundary projections.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from services.errors import AnisotropyError, ConfigurationError, PreconditionError, SemilinearStepError, SolverError
from services.geometry import GridFunction, MaskedGrid
from services.residuals import central_gradient

logger = logging.getLogger(__name__)

RAMP_STEPS = 8
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 200
DAMPING = 0.5
SOLVE_TOL = 1e-10


class DiscreteOperator:
    """L_ε^h split as A·u_interior + Bc·g_boundary at interior nodes."""

    def __init__(self, grid: MaskedGrid, eps: float, interior: sparse.csr_matrix, coupling: sparse.csr_matrix,
                 stencil_points: int):
        self.grid = grid
        self.eps = eps
        self.interior = interior
        self.coupling = coupling
        self.stencil_points = stencil_points

    @property
    def n_unknowns(self) -> int:
        return self.interior.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """L_ε^h of a grid function (active-node values) at the interior nodes."""
        grid = self.grid
        return self.interior @ values[grid.interior_ids] + self.coupling @ values[grid.boundary_ids]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.interior.sum(axis=1)).ravel()

    def is_monotone(self) -> bool:
        A = self.interior.tocoo()
        off = A.data[A.row != A.col]
        return bool(off.min(initial=0.0) >= 0 and self.coupling.data.min(initial=0.0) >= 0
                    and np.all(self.row_sums() <= 1e-12))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "n_unknowns": self.n_unknowns,
            "stencil_points": self.stencil_points,
            "nnz": int(self.interior.nnz + self.coupling.nnz),
        }


def _diffusion_weights(a: np.ndarray, eps: float, h: float, worst_point) -> Dict[tuple, float]:
    a11, a12, a22 = float(a[0, 0]), float(a[0, 1]), float(a[1, 1])
    if min(a11, a22) < abs(a12) - 1e-15:
        raise AnisotropyError(
            f"9-point stencil needs a11, a22 ≥ |a12| (a11={a11}, a22={a22}, a12={a12}) at node {list(worst_point)}"
        )
    k = eps / (h * h)
    weights = {
        (1, 0): k * (a11 - abs(a12)), (-1, 0): k * (a11 - abs(a12)),
        (0, 1): k * (a22 - abs(a12)), (0, -1): k * (a22 - abs(a12)),
    }
    if a12 > 0:
        weights[(1, 1)] = weights[(-1, -1)] = k * a12
    elif a12 < 0:
        weights[(1, -1)] = weights[(-1, 1)] = k * abs(a12)
    return weights


def assemble_operator(problem, grid: MaskedGrid, eps: float, extra_drift: Optional[np.ndarray] = None) -> DiscreteOperator:
    """Upwind drift plus 5- or 9-point diffusion; extra_drift is added to b at interior nodes."""
    if eps <= 0:
        raise PreconditionError(f"ε must be positive, got {eps}")
    c = problem.coefficients
    ids = grid.interior_ids
    if len(ids) == 0:
        raise ConfigurationError("grid has no interior nodes")
    pts = grid.coordinates[ids]
    h = grid.h
    diff = _diffusion_weights(c.a(np.zeros(2)), eps, h, pts[0])
    drift = c.b(pts)
    if extra_drift is not None:
        drift = drift + extra_drift

    pos = np.full(grid.n_active, -1, dtype=np.int64)
    pos[ids] = np.arange(len(ids))
    bpos = np.full(grid.n_active, -1, dtype=np.int64)
    bpos[grid.boundary_ids] = np.arange(len(grid.boundary_ids))

    offsets = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    rows = np.arange(len(ids))
    a_rows, a_cols, a_vals = [], [], []
    b_rows, b_cols, b_vals = [], [], []
    diagonal = np.zeros(len(ids))
    for di, dj in offsets:
        w = np.full(len(ids), diff.get((di, dj), 0.0))
        if dj == 0:
            w = w + (np.maximum(drift[:, 0], 0.0) if di > 0 else np.maximum(-drift[:, 0], 0.0)) / h
        elif di == 0:
            w = w + (np.maximum(drift[:, 1], 0.0) if dj > 0 else np.maximum(-drift[:, 1], 0.0)) / h
        if not np.any(w > 0):
            continue
        nb = grid.neighbor_ids(di, dj, ids)
        diagonal -= w
        inner = pos[nb] >= 0
        a_rows.append(rows[inner])
        a_cols.append(pos[nb[inner]])
        a_vals.append(w[inner])
        b_rows.append(rows[~inner])
        b_cols.append(bpos[nb[~inner]])
        b_vals.append(w[~inner])
    a_rows.append(rows)
    a_cols.append(rows)
    a_vals.append(diagonal)

    n, nb_count = len(ids), len(grid.boundary_ids)
    A = sparse.csr_matrix((np.concatenate(a_vals), (np.concatenate(a_rows), np.concatenate(a_cols))), shape=(n, n))
    Bc = sparse.csr_matrix((np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))), shape=(n, nb_count))
    return DiscreteOperator(grid, eps, A, Bc, 9 if len(diff) > 4 else 5)


# ---------------------------------------------------------------------------
# Time grids
# ---------------------------------------------------------------------------

def geometric_ratio(t_min: float, t_max: float, n_steps: int) -> float:
    return (t_max / t_min) ** (1.0 / n_steps)


def geometric_time_grid(t_min: float, t_max: float, n_steps: int) -> np.ndarray:
    """0, an 8-step uniform ramp to t_min, then t_min·ρᵏ ending exactly at t_max."""
    if n_steps < RAMP_STEPS:
        raise PreconditionError(f"n_steps must be at least {RAMP_STEPS}, got {n_steps}")
    if not 0 < t_min < t_max:
        raise PreconditionError(f"need 0 < t_min < t_max, got t_min={t_min}, t_max={t_max}")
    ramp = np.linspace(0.0, t_min, RAMP_STEPS + 1)
    rho = geometric_ratio(t_min, t_max, n_steps)
    tail = t_min * rho ** np.arange(1, n_steps + 1)
    tail[-1] = t_max
    return np.concatenate([ramp, tail])


def merge_times(times: np.ndarray, extra: Sequence[float]) -> np.ndarray:
    """Time grid with the extra times inserted (within the grid's range)."""
    extra = [t for t in extra if times[0] < t < times[-1]]
    merged = np.unique(np.concatenate([times, np.asarray(extra, dtype=float)]))
    keep = np.concatenate([[True], np.diff(merged) > 1e-12 * np.maximum(merged[1:], 1.0)])
    return merged[keep]


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------

def interpolation_matrix(grid: MaskedGrid, points) -> sparse.csr_matrix:
    """Bilinear weights onto active nodes; every cell corner must be active."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rel = (pts - grid.origin) / grid.h
    base = np.floor(rel).astype(np.int64)
    frac = rel - base
    rows, cols, vals = [], [], []
    nx, ny = grid.shape
    for k, ((i, j), (fx, fy)) in enumerate(zip(base, frac)):
        for di, dj, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            ii, jj = i + di, j + dj
            node = grid.active_index[ii, jj] if 0 <= ii < nx and 0 <= jj < ny else -1
            if node < 0:
                raise ConfigurationError(f"probe {pts[k].tolist()} is too close to the boundary for interpolation")
            rows.append(k)
            cols.append(node)
            vals.append(w)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(pts), grid.n_active))


class SpaceTimeSolution:
    """Slices u(·, t_k) on active nodes for a time grid."""

    def __init__(self, grid: MaskedGrid, times: np.ndarray, values: np.ndarray, eps: float,
                 metadata: Optional[Dict[str, Any]] = None):
        self.grid = grid
        self.times = times
        self.values = values
        self.eps = eps
        self.metadata = metadata or {}

    def __len__(self) -> int:
        return len(self.times)

    def slice(self, k: int) -> GridFunction:
        return GridFunction(self.grid, self.values[k], name=f"u(t={self.times[k]:.6g})")

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise PreconditionError(f"time {t} is not on the solution's time grid")
        return k

    def at_time(self, t: float) -> GridFunction:
        return self.slice(self.index_of(t))

    def probe_series(self, points) -> np.ndarray:
        """(n_times, n_points) interpolated probe values."""
        W = interpolation_matrix(self.grid, points)
        return np.asarray((W @ self.values.T).T)

    def maximum_principle_holds(self, lower: float, upper: float) -> bool:
        return bool(self.values.min() >= lower and self.values.max() <= upper)

    def export_slice_csv(self, path: Union[str, Path], k: int) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["x1", "x2", "u"])
            for (x1, x2), v in zip(self.grid.coordinates, self.values[k]):
                writer.writerow([repr(float(x1)), repr(float(x2)), repr(float(v))])

    def export_probe_series(self, path: Union[str, Path], points) -> None:
        series = self.probe_series(points)
        data = {
            "eps": self.eps,
            "probes": np.atleast_2d(points).tolist(),
            "series": [{"t": float(t), "u": row.tolist()} for t, row in zip(self.times, series)],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def _boundary_values(problem, grid: MaskedGrid) -> np.ndarray:
    return problem.boundary_data(grid.projections)


def _semilinear_drift(term, eps: float, grid: MaskedGrid, full: np.ndarray) -> np.ndarray:
    ids = grid.interior_ids
    p, _ = central_gradient(grid, full, ids)
    return term.drift_coefficient(eps, grid.coordinates[ids], full[ids], p)


class _StepSolver:
    """Backward-Euler step (I − Δt·A)u⁺ = u + Δt·Bc·g, factorisation reused for equal Δt."""

    def __init__(self, op: DiscreteOperator, g_bd: np.ndarray):
        self.op = op
        self.rhs_shift = op.coupling @ g_bd
        self._dt = None
        self._lu = None

    def solve(self, u: np.ndarray, dt: float) -> np.ndarray:
        if self._dt != dt:
            n = self.op.n_unknowns
            M = (sparse.identity(n, format="csc") - dt * self.op.interior).tocsc()
            self._lu = splu(M)
            self._dt = dt
        return self._lu.solve(u + dt * self.rhs_shift)


def solve_parabolic(problem, eps: float, grid: MaskedGrid, times: np.ndarray, semilinear=None,
                    initial: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                    store: Optional[Sequence[float]] = None) -> SpaceTimeSolution:
    """Backward Euler on the given time grid.

    `initial` replaces g as initial data on interior nodes (boundary values stay
    g); `store` restricts the stored slices to the listed times.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise PreconditionError("time grid must be strictly increasing with at least two points")
    ids = grid.interior_ids
    g_bd = _boundary_values(problem, grid)
    init = initial if initial is not None else problem.boundary_data
    u = np.asarray(init(grid.coordinates[ids]), dtype=float) * np.ones(len(ids))
    data_values = np.concatenate([u, g_bd])
    lower, upper = float(data_values.min()), float(data_values.max())

    term = semilinear if semilinear is not None else problem.semilinear
    if term is not None and term.preset == "zero":
        term = None
    op = assemble_operator(problem, grid, eps)
    stepper = _StepSolver(op, g_bd)

    full = np.empty(grid.n_active)
    full[grid.boundary_ids] = g_bd
    store_idx = set(range(len(times))) if store is None else {int(np.argmin(np.abs(times - t))) for t in store}
    stored_times: List[float] = []
    stored: List[np.ndarray] = []

    def keep(k: int, interior_values: np.ndarray) -> None:
        if k in store_idx:
            full[ids] = interior_values
            stored_times.append(float(times[k]))
            stored.append(full.copy())

    keep(0, u)
    total_iterations = 0
    for k in range(1, len(times)):
        dt = float(times[k] - times[k - 1])
        if term is None:
            u_new = stepper.solve(u, dt)
        else:
            u_new, iterations = _semilinear_step(problem, grid, eps, term, u, g_bd, dt, times[k])
            total_iterations += iterations
        # the exact solution stays in [lower, upper]; only roundoff is removed here
        u = np.clip(u_new, lower, upper)
        keep(k, u)

    metadata = {
        "scheme": "backward_euler_upwind",
        "stencil_points": op.stencil_points,
        "n_steps": len(times) - 1,
        "semilinear": term.preset if term is not None else None,
        "fixed_point_iterations": total_iterations,
    }
    logger.info(f"Solved parabolic problem ε={eps:g} to t={times[-1]:.4g} in {len(times) - 1} steps")
    return SpaceTimeSolution(grid, np.asarray(stored_times), np.vstack(stored), eps, metadata)


def _semilinear_step(problem, grid: MaskedGrid, eps: float, term, u: np.ndarray, g_bd: np.ndarray,
                     dt: float, t: float):
    ids = grid.interior_ids
    full = np.empty(grid.n_active)
    full[grid.boundary_ids] = g_bd
    v = u.copy()
    for iteration in range(FIXED_POINT_MAX_ITER):
        full[ids] = v
        op = assemble_operator(problem, grid, eps, _semilinear_drift(term, eps, grid, full))
        w = _StepSolver(op, g_bd).solve(u, dt)
        v_next = w if iteration == 0 else DAMPING * v + (1.0 - DAMPING) * w
        change = float(np.max(np.abs(v_next - v)))
        v = v_next
        if iteration > 0 and change <= FIXED_POINT_TOL:
            return v, iteration + 1
    raise SemilinearStepError(
        f"fixed-point iteration did not converge at t={t:.4g} (Δt={dt:.3g}, last change {change:.3e}); "
        f"M(ε)={term.M(eps):.3g} may be too large for this step"
    )


def _direct_solve(op: DiscreteOperator, g_bd: np.ndarray) -> np.ndarray:
    rhs = -(op.coupling @ g_bd)
    try:
        u = splu(op.interior.tocsc()).solve(rhs)
    except RuntimeError as e:
        raise SolverError(f"sparse factorisation failed: {e}") from e
    residual = float(np.max(np.abs(op.interior @ u - rhs), initial=0.0))
    scale = max(1.0, float(np.max(np.abs(rhs), initial=0.0)))
    if not np.all(np.isfinite(u)) or residual > SOLVE_TOL * scale * 1e3:
        raise SolverError(f"stationary solve did not converge (residual {residual:.3e})")
    return u


def solve_stationary(problem, eps: float, grid: MaskedGrid, semilinear=None) -> GridFunction:
    """Dirichlet solve of L_ε v (+ f_ε) = 0 with v = g at boundary projections."""
    ids = grid.interior_ids
    g_bd = _boundary_values(problem, grid)
    lower, upper = float(g_bd.min()), float(g_bd.max())
    term = semilinear if semilinear is not None else problem.semilinear
    if term is not None and term.preset == "zero":
        term = None

    full = np.empty(grid.n_active)
    full[grid.boundary_ids] = g_bd
    v = _direct_solve(assemble_operator(problem, grid, eps), g_bd)
    if term is not None:
        for iteration in range(1, FIXED_POINT_MAX_ITER + 1):
            full[ids] = v
            w = _direct_solve(assemble_operator(problem, grid, eps, _semilinear_drift(term, eps, grid, full)), g_bd)
            v_next = DAMPING * v + (1.0 - DAMPING) * w
            change = float(np.max(np.abs(v_next - v)))
            v = v_next
            if change <= FIXED_POINT_TOL:
                break
        else:
            raise SemilinearStepError(f"stationary fixed-point iteration did not converge (last change {change:.3e})")
    full[ids] = np.clip(v, lower, upper)
    logger.info(f"Solved stationary problem ε={eps:g}: v(0)={full[grid.source_id()]:.5f}")
    return GridFunction(grid, full.copy(), name=f"v_eps={eps:g}")


def sigma_cutoff(eps: float, family: str = "inverse") -> float:
    """Lower time cutoff σ(ε) → ∞."""
    if family == "inverse":
        return 1.0 / eps
    if family == "log":
        return math.log(1.0 / eps)
    raise ConfigurationError(f"unknown σ(ε) family '{family}' (known: inverse, log)")
