"""
Residual reports and one-sided finite differences on masked grids.
"""

import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from services.geometry import MaskedGrid
from services.model import hamiltonian

logger = logging.getLogger(__name__)


class ResidualReport:
    """Statistics of the residual of a claimed inequality `residual ≤ tolerance`."""

    def __init__(
        self,
        name: str,
        residuals: np.ndarray,
        node_ids: np.ndarray,
        coordinates: np.ndarray,
        tolerance: float,
        details: Optional[str] = None,
    ):
        self.name = name
        self.residuals = np.asarray(residuals, dtype=float)
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.tolerance = float(tolerance)
        self.details = details
        if self.residuals.size:
            worst = int(np.argmax(self.residuals))
            self.max = float(self.residuals[worst])
            self.p99 = float(np.percentile(self.residuals, 99))
            self.mean = float(self.residuals.mean())
            self.worst_node = int(self.node_ids[worst])
            self.worst_point = [float(v) for v in coordinates[worst]]
        else:
            self.max = self.p99 = self.mean = float("-inf")
            self.worst_node = -1
            self.worst_point = None

    @property
    def n_checked(self) -> int:
        return int(self.residuals.size)

    @property
    def passed(self) -> bool:
        return self.max <= self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "tolerance": self.tolerance,
            "n_checked": self.n_checked,
            "max": self.max,
            "p99": self.p99,
            "mean": self.mean,
            "worst_node": self.worst_node,
            "worst_point": self.worst_point,
            "passed": self.passed,
            "details": self.details,
        }


def make_report(name: str, grid: MaskedGrid, ids: np.ndarray, residuals: np.ndarray, tolerance: float,
                details: Optional[str] = None) -> ResidualReport:
    return ResidualReport(name, residuals, ids, grid.coordinates[ids], tolerance, details)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def _axis_neighbours(grid: MaskedGrid, ids: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    plus = (1, 0) if axis == 0 else (0, 1)
    return grid.neighbor_ids(*plus, ids), grid.neighbor_ids(-plus[0], -plus[1], ids)


def one_sided_gradient(grid: MaskedGrid, values: np.ndarray, ids: np.ndarray,
                       signs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient from the neighbour on side `signs` per component (0 means central)."""
    grad = np.zeros((len(ids), 2))
    valid = np.ones(len(ids), dtype=bool)
    h = grid.h
    for axis in (0, 1):
        fwd, bwd = _axis_neighbours(grid, ids, axis)
        s = signs[:, axis]
        v0 = values[ids]
        d_fwd = np.where(fwd >= 0, (values[np.maximum(fwd, 0)] - v0) / h, np.nan)
        d_bwd = np.where(bwd >= 0, (v0 - values[np.maximum(bwd, 0)]) / h, np.nan)
        d_cen = 0.5 * (d_fwd + d_bwd)
        d = np.where(s > 0, d_fwd, np.where(s < 0, d_bwd, d_cen))
        valid &= np.isfinite(d)
        grad[:, axis] = np.where(np.isfinite(d), d, 0.0)
    return grad, valid


def central_gradient(grid: MaskedGrid, values: np.ndarray, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return one_sided_gradient(grid, values, ids, np.zeros((len(ids), 2)))


def drift_signs(c, points: np.ndarray, zero_tol: float = 1e-12) -> np.ndarray:
    b = c.b(points)
    return np.where(np.abs(b) <= zero_tol, 0.0, np.sign(b))


def hamiltonian_residual(grid: MaskedGrid, values: np.ndarray, c, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """H(x, D_h f) for subsolution tests, differenced toward the equilibrium (side sign(b))."""
    pts = grid.coordinates[ids]
    signs = drift_signs(c, pts)
    grad, valid = one_sided_gradient(grid, values, ids, signs)
    return hamiltonian(c, pts, grad), valid


def second_differences(grid: MaskedGrid, values: np.ndarray, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Second differences along e₁, e₂, e₁+e₂, e₁−e₂ (normalised by the step length²)."""
    h = grid.h
    out = np.zeros((len(ids), 4))
    valid = np.ones(len(ids), dtype=bool)
    v0 = values[ids]
    for k, (di, dj) in enumerate(((1, 0), (0, 1), (1, 1), (1, -1))):
        p = grid.neighbor_ids(di, dj, ids)
        m = grid.neighbor_ids(-di, -dj, ids)
        ok = (p >= 0) & (m >= 0)
        step2 = (di * di + dj * dj) * h * h
        out[:, k] = np.where(ok, (values[np.maximum(p, 0)] + values[np.maximum(m, 0)] - 2.0 * v0) / step2, 0.0)
        valid &= ok
    return out, valid


def grid_lipschitz(grid: MaskedGrid, values: np.ndarray) -> float:
    """Largest difference quotient over neighbouring active pairs (axes and diagonals)."""
    best = 0.0
    ids = np.arange(grid.n_active)
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        nb = grid.neighbor_ids(di, dj, ids)
        ok = nb >= 0
        if ok.any():
            quot = np.abs(values[nb[ok]] - values[ok]) / (grid.h * np.hypot(di, dj))
            best = max(best, float(quot.max()))
    return best
