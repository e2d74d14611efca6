"""
Quasi-potential fields by label-setting on the geometric action.

V(y) = V_Ω(0, y) is computed as a shortest path on the active lattice with
edge weights given by the optimal-time action of straight chords; the
boundary-source field U (and its γ-perturbation u_γ) runs the same search
backwards from a virtual source attached to every boundary-adjacent node.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from services.errors import PreconditionError, StabilityError, TopologyError
from services.geometry import CLASS_NAMES, Domain, GridFunction, MaskedGrid, project_to_boundary
from services.residuals import ResidualReport, hamiltonian_residual, make_report

logger = logging.getLogger(__name__)

# Lower bound on edge weights; keeps zero-cost edges visible to the graph search.
_WEIGHT_FLOOR = 1e-14
UNIFORM_FRACTION = 0.9

STENCIL_OFFSETS = {
    1: [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    2: [(1, 2), (-1, 2), (1, -2), (-1, -2), (2, 1), (-2, 1), (2, -1), (-2, -1)],
    3: [(1, 3), (-1, 3), (1, -3), (-1, -3), (3, 1), (-3, 1), (3, -1), (-3, -1),
        (2, 3), (-2, 3), (2, -3), (-2, -3), (3, 2), (-3, 2), (3, -2), (-3, -2)],
}


def stencil(order: int) -> List[Tuple[int, int]]:
    """Lattice offsets of a stencil; higher orders contain the lower ones."""
    if order not in STENCIL_OFFSETS:
        raise PreconditionError(f"stencil order must be 1, 2 or 3, got {order}")
    return [d for k in range(1, order + 1) for d in STENCIL_OFFSETS[k]]


# ---------------------------------------------------------------------------
# Segment action
# ---------------------------------------------------------------------------

def _segment_terms(c, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = y - x
    m = 0.5 * (x + y)
    P = c.a_inv(m)
    bm = c.b(m)
    Ps = np.einsum("...ij,...j->...i", P, s)
    A = np.sum(Ps * s, axis=-1)
    B = np.sum(Ps * bm, axis=-1)
    C = np.sum(np.einsum("...ij,...j->...i", P, bm) * bm, axis=-1)
    return A, B, C


def segment_action(c, x, y, gamma: float = 0.0) -> np.ndarray:
    """Optimal-time action ½√(A(C+4γ)) − B/2 of the straight chord x → y."""
    A, B, C = _segment_terms(c, x, y)
    if np.any((C + 4.0 * gamma <= 0) & (A > 0)):
        logger.debug("Segment action evaluated at the equilibrium; returning the infinite-time limit")
    return np.maximum(0.5 * np.sqrt(A * (C + 4.0 * gamma)) - 0.5 * B, 0.0)


def segment_time(c, x, y, gamma: float = 0.0) -> np.ndarray:
    """Optimal traversal time √(A/(C+4γ)) of the chord."""
    A, _, C = _segment_terms(c, x, y)
    D = C + 4.0 * gamma
    with np.errstate(divide="ignore"):
        return np.where(D > 0, np.sqrt(A / np.where(D > 0, D, 1.0)), np.inf)


# ---------------------------------------------------------------------------
# Potential fields
# ---------------------------------------------------------------------------

class PotentialField(GridFunction):
    """A V, U or u_γ field with provenance and boundary extraction."""

    def __init__(
        self,
        grid: MaskedGrid,
        values: np.ndarray,
        source: str = "point",
        gamma: float = 0.0,
        stencil_order: int = 2,
        boundary_values: Optional[np.ndarray] = None,
        name: str = "",
    ):
        super().__init__(grid, values, name or ("V" if source == "point" else "U"))
        self.source = source
        self.gamma = float(gamma)
        self.stencil_order = stencil_order
        self.boundary_values = boundary_values
        self.m0: Optional[float] = None
        self.argmin: Optional[np.ndarray] = None
        self.clusters: List[Dict[str, Any]] = []
        self.uniform = False

    def boundary_point_values(self) -> np.ndarray:
        if self.boundary_values is not None:
            return self.boundary_values
        return self.evaluate(self.grid.projections)

    def summary(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "source": self.source,
            "gamma": self.gamma,
            "stencil_order": self.stencil_order,
            "m0": self.m0,
            "uniform": self.uniform,
            "clusters": self.clusters,
            "min": float(self.values.min()),
            "max": float(self.values.max()),
        }

    def export_csv(self, path: Union[str, Path]) -> None:
        grid = self.grid
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["i", "j", "x1", "x2", "value", "class"])
            for (i, j), (x1, x2), v, k in zip(grid.ij, grid.coordinates, self.values, grid.classes):
                writer.writerow([int(i), int(j), repr(float(x1)), repr(float(x2)), repr(float(v)), CLASS_NAMES[int(k)]])

    def export_summary(self, path: Union[str, Path], residuals: Optional[ResidualReport] = None) -> None:
        data = self.summary()
        data["residual_stats"] = residuals.to_dict() if residuals is not None else None
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, ensure_ascii=False)


def _segment_inside(domain: Domain, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    ok = np.ones(len(x), dtype=bool)
    for t in (0.25, 0.5, 0.75):
        ok &= domain.contains(x + t * (y - x))
    return ok


def _admissible_chords(grid: MaskedGrid, ids: np.ndarray, di: int, dj: int) -> Tuple[np.ndarray, np.ndarray]:
    """Positions in `ids` and neighbour ids of the chords x → x + (di, dj)h the action graph uses."""
    nb = grid.neighbor_ids(di, dj, ids)
    pos = np.flatnonzero(nb >= 0)
    xu, xv = grid.coordinates[ids[pos]], grid.coordinates[nb[pos]]
    mid = 0.5 * (xu + xv)
    keep = _segment_inside(grid.domain, xu, xv) & (np.linalg.norm(mid, axis=1) >= 0.5 * grid.h - 1e-15)
    return pos[keep], nb[pos[keep]]


def build_action_graph(c, grid: MaskedGrid, stencil_order: int, gamma: float = 0.0) -> sparse.csr_matrix:
    """Directed graph with weight(u→v) = segment_action(x_u → x_v, γ)."""
    rows, cols, weights = [], [], []
    ids = np.arange(grid.n_active)
    for di, dj in stencil(stencil_order):
        u, v = _admissible_chords(grid, ids, di, dj)
        rows.append(u)
        cols.append(v)
        weights.append(np.maximum(segment_action(c, grid.coordinates[u], grid.coordinates[v], gamma), _WEIGHT_FLOOR))
    n = grid.n_active
    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def _check_reachable(values: np.ndarray, grid: MaskedGrid, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        worst = grid.coordinates[np.flatnonzero(bad)[0]]
        raise TopologyError(f"{int(bad.sum())} active nodes are unreachable from the {what} (e.g. {worst.tolist()})")


def solve_from_point(problem, grid: MaskedGrid, stencil_order: int = 2) -> PotentialField:
    """V = V_Ω(0, ·) by label-setting from the node at the origin."""
    c = problem.coefficients
    source = grid.source_id()
    if grid.classes[source] != 2:
        raise PreconditionError("the node at the origin must be an interior node")
    graph = build_action_graph(c, grid, stencil_order)
    values = dijkstra(graph, directed=True, indices=source)
    _check_reachable(values, grid, "origin")
    values[source] = 0.0

    bd = grid.boundary_ids
    proj_values = values[bd] + segment_action(c, grid.coordinates[bd], grid.projections)
    field = PotentialField(grid, values, "point", 0.0, stencil_order, proj_values, name="V")
    boundary_minimum(field)
    logger.info(f"Solved V for {c.preset} (stencil {stencil_order}): m0={field.m0:.5f}, {len(field.clusters)} argmin cluster(s)")
    return field


def solve_to_boundary(problem, grid: MaskedGrid, gamma: float = 0.0, stencil_order: int = 2) -> PotentialField:
    """U (γ = 0) or u_γ (γ > 0): least action to reach ∂Ω, with running cost γ."""
    if gamma < 0:
        raise PreconditionError(f"γ must be nonnegative, got {gamma}")
    c = problem.coefficients
    n = grid.n_active
    graph = build_action_graph(c, grid, stencil_order, gamma)
    bd = grid.boundary_ids
    seeds = np.maximum(segment_action(c, grid.coordinates[bd], grid.projections, gamma), _WEIGHT_FLOOR)
    # reversed graph plus a virtual source (index n) feeding every boundary-adjacent node
    rev = graph.T.tocoo()
    rows = np.concatenate([rev.row, np.full(len(bd), n)])
    cols = np.concatenate([rev.col, bd])
    data = np.concatenate([rev.data, seeds])
    augmented = sparse.csr_matrix((data, (rows, cols)), shape=(n + 1, n + 1))
    values = dijkstra(augmented, directed=True, indices=n)[:n]
    _check_reachable(values, grid, "boundary")
    name = "U" if gamma == 0 else f"u_{gamma:g}"
    field = PotentialField(grid, values, "boundary", gamma, stencil_order, np.zeros(len(bd)), name=name)
    logger.info(f"Solved {name} for {c.preset}: value at origin {values[grid.source_id()]:.5f}")
    return field


def boundary_minimum(field: PotentialField, tol: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """m₀ and the (clustered) boundary points where it is attained within tol."""
    grid = field.grid
    if len(grid.boundary_ids) == 0:
        raise PreconditionError("the grid has no boundary-adjacent nodes")
    vals = field.boundary_point_values()
    m0 = float(vals.min())
    if tol is None:
        tol = 2.0 * grid.h * max(_boundary_lipschitz(field), 1e-12)
    in_argmin = vals <= m0 + tol
    points = grid.projections[in_argmin]

    clusters: List[Dict[str, Any]] = []
    if len(points):
        pairs = cKDTree(points).query_pairs(r=3.0 * grid.h, output_type="ndarray")
        adjacency = sparse.coo_matrix(
            (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(points), len(points))
        ) if len(pairs) else sparse.coo_matrix((len(points), len(points)))
        n_clusters, labels = connected_components(adjacency, directed=False)
        member_values = vals[in_argmin]
        for k in range(n_clusters):
            members = labels == k
            centre, _ = project_to_boundary(grid.domain, points[members].mean(axis=0, keepdims=True))
            best = int(np.argmin(np.where(members, member_values, np.inf)))
            clusters.append({
                "center": [float(v) for v in centre[0]],
                "min_point": [float(v) for v in points[best]],
                "radius": float(np.linalg.norm(points[members] - points[best], axis=1).max()),
                "min_value": float(member_values[best]),
                "size": int(members.sum()),
            })
        clusters.sort(key=lambda cl: (cl["center"][0], cl["center"][1]))

    field.m0 = m0
    field.argmin = points
    field.clusters = clusters
    field.uniform = bool(in_argmin.mean() >= UNIFORM_FRACTION)
    return m0, points


def _boundary_lipschitz(field: PotentialField) -> float:
    grid = field.grid
    bd = grid.boundary_ids
    best = 0.0
    for di, dj in stencil(1):
        nb = grid.neighbor_ids(di, dj, bd)
        ok = nb >= 0
        if ok.any():
            diff = np.abs(field.values[nb[ok]] - field.values[bd[ok]]) / (grid.h * np.hypot(di, dj))
            best = max(best, float(diff.max()))
    return best


def check_subsolution(field: GridFunction, c, tol: float, exclude_radius: Optional[float] = None) -> ResidualReport:
    """H(x, D_h f) ≤ tol over interior nodes away from the source."""
    grid = field.grid
    radius = 3.0 * grid.h if exclude_radius is None else exclude_radius
    ids = grid.interior_ids[np.linalg.norm(grid.coordinates[grid.interior_ids], axis=1) > radius]
    res, valid = hamiltonian_residual(grid, field.values, c, ids)
    return make_report(f"subsolution[{field.name or 'field'}]", grid, ids[valid], res[valid], tol)


def stencil_hamiltonian(c, grid: MaskedGrid, values: np.ndarray, ids: np.ndarray,
                        stencil_order: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Upwind H(x, −D_h f) over the chords of the action graph.

    Each chord x → y contributes sup_T [f(x) − f(y) − ∫₀ᵀ L]/T with the
    coefficients frozen at its midpoint, which is (D + B/2)₊²/A − C/4 for
    D = f(x) − f(y). A field solving u(x) = min_y u(y) + segment_action(x → y, γ)
    reaches exactly γ along its optimal chord, so this is the supersolution
    counterpart of the label-setting solver.
    """
    best = np.full(len(ids), -np.inf)
    x = grid.coordinates
    for di, dj in stencil(stencil_order):
        pos, nb = _admissible_chords(grid, ids, di, dj)
        if not pos.size:
            continue
        A, B, C = _segment_terms(c, x[ids[pos]], x[nb])
        drop = values[ids[pos]] - values[nb]
        value = np.maximum(drop + 0.5 * B, 0.0) ** 2 / A - 0.25 * C
        best[pos] = np.maximum(best[pos], value)
    return best, np.isfinite(best)


# ---------------------------------------------------------------------------
# Path oracle
# ---------------------------------------------------------------------------

class ActionPath:
    """Polyline with its per-segment optimal total time and action."""

    def __init__(self, points: np.ndarray, total_time: float, action: float, converged: bool, iterations: int):
        self.points = points
        self.total_time = total_time
        self.action = action
        self.converged = converged
        self.iterations = iterations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "action": self.action,
            "total_time": self.total_time,
            "converged": self.converged,
            "iterations": self.iterations,
            "points": self.points.tolist(),
        }


def path_action(c, points: np.ndarray, gamma: float = 0.0) -> float:
    return float(np.sum(segment_action(c, points[:-1], points[1:], gamma)))


def _linear_constant(c) -> bool:
    """True when b(x) = Bx and a is constant, checked on a few points."""
    B = getattr(c, "drift_matrix", None)
    if B is None or not getattr(c, "is_constant_diffusion", False):
        return False
    pts = np.array([[0.3, -0.2], [-0.7, 0.5], [0.9, 0.8]])
    return bool(np.allclose(c.b(pts), pts @ np.asarray(B).T) and np.allclose(c.a(pts), c.a(np.zeros(2))))


def _action_and_gradient(c, path: np.ndarray, gamma: float) -> Tuple[float, np.ndarray]:
    # linear drift b(m) = Bm and constant a; derivatives of ½√(A·D) − B/2 with D = C + 4γ
    if not _linear_constant(c):
        raise PreconditionError(f"{getattr(c, 'preset', c)}: closed-form action gradient needs linear drift and constant diffusion")
    z0, z1 = path[:-1], path[1:]
    s = z1 - z0
    m = 0.5 * (z0 + z1)
    P = c.a_inv(np.zeros(2))
    Bm = c.drift_matrix
    bm = m @ Bm.T
    Ps = s @ P.T
    Pb = bm @ P.T
    A = np.sum(Ps * s, axis=1)
    Bc = np.sum(Ps * bm, axis=1)
    D = np.sum(Pb * bm, axis=1) + 4.0 * gamma
    root = np.sqrt(A * D + 1e-300)
    cost = 0.5 * root - 0.5 * Bc
    ratio_s = np.where(A > 0, np.sqrt(D / np.maximum(A, 1e-300)), 0.0)
    ratio_m = np.where(D > 0, np.sqrt(A / np.maximum(D, 1e-300)), 0.0)
    d_s = 0.5 * ratio_s[:, None] * Ps - 0.5 * Pb
    d_m = 0.5 * ratio_m[:, None] * (Pb @ Bm) - 0.5 * (Ps @ Bm)
    grad = np.zeros_like(path)
    grad[:-1] += -d_s + 0.5 * d_m
    grad[1:] += d_s + 0.5 * d_m
    return float(cost.sum()), grad


def _equal_arclength(path: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        return path
    target = np.linspace(0.0, arc[-1], len(path))
    return np.column_stack([np.interp(target, arc, path[:, k]) for k in range(path.shape[1])])


def minimize_path_action(c, x, y, n_knots: int = 32, domain: Optional[Domain] = None,
                         gamma: float = 0.0, max_rounds: int = 40, tol: float = 1e-10) -> ActionPath:
    """Minimise the geometric action over polylines from x to y with n_knots segments."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.allclose(x, y):
        raise PreconditionError("path endpoints must differ")
    t = np.linspace(0.0, 1.0, n_knots + 1)
    path = x + t[:, None] * (y - x)
    best_path, best_action = path.copy(), path_action(c, path, gamma)

    def objective(flat):
        full = np.vstack([x, flat.reshape(-1, 2), y])
        value, grad = _action_and_gradient(c, full, gamma)
        return value, grad[1:-1].ravel()

    def action_only(flat):
        return path_action(c, np.vstack([x, flat.reshape(-1, 2), y]), gamma)

    # other coefficients fall back to finite-difference gradients of the chord action
    analytic = _linear_constant(c)

    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        res = optimize.minimize(objective if analytic else action_only, path[1:-1].ravel(), jac=analytic,
                                method="L-BFGS-B",
                                options={"maxiter": 300, "ftol": 1e-15, "gtol": 1e-12})
        path = np.vstack([x, res.x.reshape(-1, 2), y])
        if domain is not None:
            outside = domain.rho(path) > 0
            if outside.any():
                proj, _ = project_to_boundary(domain, path[outside])
                path[outside] = proj
        candidates = [path, _equal_arclength(path)]
        actions = [path_action(c, p, gamma) for p in candidates]
        k = int(np.argmin(actions))
        improvement = best_action - actions[k]
        if improvement > 0:
            best_path, best_action = candidates[k].copy(), actions[k]
        path = candidates[1]
        if improvement <= tol:
            converged = True
            break
    if not converged:
        logger.warning(f"Path optimisation {x.tolist()} -> {y.tolist()} stopped after {rounds} rounds without converging")
    total_time = float(np.sum(segment_time(c, best_path[:-1], best_path[1:], gamma)))
    return ActionPath(best_path, total_time, best_action, converged, rounds)


# ---------------------------------------------------------------------------
# Closed form for linear drift
# ---------------------------------------------------------------------------

def linear_quasipotential(c) -> Callable[[np.ndarray], np.ndarray]:
    """V(x) = ½ x·Σ⁻¹x for b(x) = Bx and constant a, with BΣ + ΣBᵗ + 2a = 0."""
    B = np.asarray(c.drift_matrix, dtype=float)
    if np.linalg.eigvals(B).real.max() >= 0:
        raise StabilityError(f"{c.preset}: drift matrix {B.tolist()} is not Hurwitz")
    sigma = linalg.solve_continuous_lyapunov(B, -2.0 * c.diffusion_matrix)
    P = np.linalg.inv(0.5 * (sigma + sigma.T))

    def V(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, P, x)

    return V
