"""
Domains, masked lattices and grid functions.

A domain is described by a defining function ρ (negative inside, positive
outside). Grids are uniform lattices through the origin, clipped to the
domain and classified node by node; boundary-adjacent nodes carry their
nearest boundary point so that solvers can impose Dirichlet data there.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage, optimize
from scipy.interpolate import RectBivariateSpline, RegularGridInterpolator
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from services.errors import (
    ConfigurationError,
    GeometryError,
    OffsetThresholdError,
    PreconditionError,
    ProjectionError,
)

logger = logging.getLogger(__name__)

EXTERIOR = 0
BOUNDARY_ADJACENT = 1
INTERIOR = 2

CLASS_NAMES = {EXTERIOR: "exterior", BOUNDARY_ADJACENT: "boundary", INTERIOR: "interior"}

_BOUNDARY_SAMPLES = 4096
_NEWTON_MAX_ITER = 60
_NEWTON_TOL = 1e-12
# Lattice padding in nodes; covers the longest stencil offset used by the solvers.
_PAD = 4

ArrayLike = Union[np.ndarray, list, tuple]


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

class Domain:
    """Bounded planar domain given by a defining function ρ."""

    kind = "abstract"

    def __init__(self):
        self._samples: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        self._trees: Dict[int, cKDTree] = {}
        self._diameter: Optional[float] = None
        self._offset_threshold: Optional[float] = None

    # --- defining function -------------------------------------------------

    def rho(self, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def grad_rho(self, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def hess_rho(self, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def boundary_point(self, theta: ArrayLike) -> np.ndarray:
        """Boundary point for parameter θ ∈ [0, 2π)."""
        raise NotImplementedError

    @property
    def bounding_box(self) -> Tuple[float, float, float, float]:
        raise NotImplementedError

    @property
    def is_star_shaped(self) -> bool:
        return True

    def describe(self) -> str:
        raise NotImplementedError

    # --- derived quantities ------------------------------------------------

    def contains(self, x: ArrayLike) -> np.ndarray:
        return self.rho(x) < 0

    def boundary_samples(self, n: int = _BOUNDARY_SAMPLES) -> Tuple[np.ndarray, np.ndarray]:
        """Parameters and points of n boundary samples (cached)."""
        if n not in self._samples:
            theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
            self._samples[n] = (theta, self.boundary_point(theta))
        return self._samples[n]

    def sample_tree(self, n: int = _BOUNDARY_SAMPLES) -> cKDTree:
        if n not in self._trees:
            self._trees[n] = cKDTree(self.boundary_samples(n)[1])
        return self._trees[n]

    def unit_normals(self, y: ArrayLike) -> np.ndarray:
        g = self.grad_rho(y)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    @property
    def diameter(self) -> float:
        if self._diameter is None:
            _, pts = self.boundary_samples(512)
            self._diameter = float(pdist(pts).max())
        return self._diameter

    def min_curvature_radius(self) -> float:
        _, y = self.boundary_samples()
        g = self.grad_rho(y)
        H = self.hess_rho(y)
        gx, gy = g[:, 0], g[:, 1]
        num = np.abs(gy ** 2 * H[:, 0, 0] - 2.0 * gx * gy * H[:, 0, 1] + gx ** 2 * H[:, 1, 1])
        kappa = num / np.linalg.norm(g, axis=1) ** 3
        return float(1.0 / kappa.max())

    def offset_threshold(self) -> float:
        if self._offset_threshold is None:
            self._offset_threshold = probe_offset_threshold(self)
        return self._offset_threshold

    def _validate(self) -> None:
        if not self.rho(np.zeros(2)) < 0:
            raise GeometryError(f"{self.describe()}: the origin must lie strictly inside the domain")
        _, y = self.boundary_samples()
        grad_norm = np.linalg.norm(self.grad_rho(y), axis=1)
        if grad_norm.min() <= 1e-8:
            worst = y[int(np.argmin(grad_norm))]
            raise GeometryError(f"{self.describe()}: defining function is degenerate near {worst.tolist()}")


class BallDomain(Domain):
    """Disk of radius r centred at the origin."""

    kind = "ball"

    def __init__(self, radius: float = 1.0):
        super().__init__()
        if radius <= 0:
            raise GeometryError(f"ball radius must be positive, got {radius}")
        self.radius = float(radius)
        self._validate()

    def rho(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1) / self.radius ** 2 - 1.0

    def grad_rho(self, x):
        return 2.0 * np.asarray(x, dtype=float) / self.radius ** 2

    def hess_rho(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(2.0 / self.radius ** 2 * np.eye(2), x.shape[:-1] + (2, 2)).copy()

    def boundary_point(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    @property
    def bounding_box(self):
        r = self.radius
        return (-r, r, -r, r)

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    def describe(self) -> str:
        return f"ball:{self.radius:g}"


class EllipseDomain(Domain):
    """Axis-aligned ellipse x²/a² + y²/b² < 1."""

    kind = "ellipse"

    def __init__(self, a: float, b: float):
        super().__init__()
        if a <= 0 or b <= 0:
            raise GeometryError(f"ellipse semi-axes must be positive, got ({a}, {b})")
        self.a = float(a)
        self.b = float(b)
        self._validate()

    def rho(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] ** 2 / self.a ** 2 + x[..., 1] ** 2 / self.b ** 2 - 1.0

    def grad_rho(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([2.0 * x[..., 0] / self.a ** 2, 2.0 * x[..., 1] / self.b ** 2], axis=-1)

    def hess_rho(self, x):
        x = np.asarray(x, dtype=float)
        H = np.diag([2.0 / self.a ** 2, 2.0 / self.b ** 2])
        return np.broadcast_to(H, x.shape[:-1] + (2, 2)).copy()

    def boundary_point(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.stack([self.a * np.cos(theta), self.b * np.sin(theta)], axis=-1)

    @property
    def bounding_box(self):
        return (-self.a, self.a, -self.b, self.b)

    @property
    def diameter(self) -> float:
        return 2.0 * max(self.a, self.b)

    def describe(self) -> str:
        return f"ellipse:{self.a:g},{self.b:g}"


class ImplicitDomain(Domain):
    """Domain given by samples of ρ on a rectangle, interpolated bicubically."""

    kind = "implicit"

    def __init__(self, bbox: ArrayLike, samples: np.ndarray, source: Optional[str] = None):
        super().__init__()
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or min(samples.shape) < 4:
            raise GeometryError(f"level-set samples must be a 2-D array with at least 4x4 entries, got {samples.shape}")
        self.box = tuple(float(v) for v in bbox)
        self.source = source
        self.samples = samples
        ny, nx = samples.shape
        xmin, xmax, ymin, ymax = self.box
        self._xs = np.linspace(xmin, xmax, nx)
        self._ys = np.linspace(ymin, ymax, ny)
        self._spline = RectBivariateSpline(self._xs, self._ys, samples.T, kx=3, ky=3)
        border = np.concatenate([samples[0], samples[-1], samples[:, 0], samples[:, -1]])
        if border.min() <= 0:
            raise GeometryError("level-set samples must be positive on the border of the sample box")
        self._star_shaped = True
        self._validate()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ImplicitDomain":
        bbox, samples = load_level_set_file(path)
        return cls(bbox, samples, source=str(path))

    def _ev(self, x, dx=0, dy=0):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        vals = self._spline.ev(flat[:, 0], flat[:, 1], dx=dx, dy=dy)
        return vals.reshape(x.shape[:-1])

    def rho(self, x):
        return self._ev(x)

    def grad_rho(self, x):
        return np.stack([self._ev(x, dx=1), self._ev(x, dy=1)], axis=-1)

    def hess_rho(self, x):
        hxx = self._ev(x, dx=2)
        hxy = self._ev(x, dx=1, dy=1)
        hyy = self._ev(x, dy=2)
        return np.stack([np.stack([hxx, hxy], axis=-1), np.stack([hxy, hyy], axis=-1)], axis=-2)

    def boundary_point(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        xmin, xmax, ymin, ymax = self.box
        t_max = np.hypot(max(abs(xmin), abs(xmax)), max(abs(ymin), abs(ymax)))
        ts = np.linspace(0.0, t_max, 257)
        out = np.empty(theta.shape + (2,))
        for k, th in enumerate(theta):
            u = np.array([np.cos(th), np.sin(th)])
            vals = self.rho(ts[:, None] * u)
            crossings = np.flatnonzero((vals[:-1] < 0) & (vals[1:] >= 0))
            if crossings.size == 0:
                raise GeometryError(f"ray at angle {th:.6f} never leaves the implicit domain")
            if crossings.size > 1:
                self._star_shaped = False
            c = crossings[0]
            t = optimize.brentq(lambda s: float(self.rho(s * u)), ts[c], ts[c + 1], xtol=1e-14)
            out[k] = t * u
        return out

    @property
    def is_star_shaped(self) -> bool:
        self.boundary_samples()
        return self._star_shaped

    @property
    def bounding_box(self):
        inside = self.samples < 0
        cols = np.flatnonzero(inside.any(axis=0))
        rows = np.flatnonzero(inside.any(axis=1))
        dx = self._xs[1] - self._xs[0]
        dy = self._ys[1] - self._ys[0]
        return (
            float(self._xs[cols[0]] - dx),
            float(self._xs[cols[-1]] + dx),
            float(self._ys[rows[0]] - dy),
            float(self._ys[rows[-1]] + dy),
        )

    def describe(self) -> str:
        return f"implicit:{self.source or '<memory>'}"


def parse_domain(text: str) -> Domain:
    """Build a domain from its config string (`ball:r`, `ellipse:a,b`, `implicit:<path>`)."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "ball":
            return BallDomain(float(arg) if arg else 1.0)
        if kind == "ellipse":
            a, b = (float(v) for v in arg.split(","))
            return EllipseDomain(a, b)
        if kind == "implicit":
            return ImplicitDomain.from_file(arg)
    except ValueError as e:
        raise ConfigurationError(f"cannot parse domain '{text}': {e}") from e
    raise ConfigurationError(f"unknown domain kind '{kind}' (expected ball, ellipse or implicit)")


def write_level_set_file(path: Union[str, Path], bbox: ArrayLike, samples: np.ndarray) -> None:
    """Write ρ samples as: int32 nx, ny; float64 xmin, xmax, ymin, ymax; row-major samples."""
    samples = np.asarray(samples, dtype="<f8")
    ny, nx = samples.shape
    with open(path, "wb") as f:
        np.array([nx, ny], dtype="<i4").tofile(f)
        np.asarray(bbox, dtype="<f8").tofile(f)
        samples.ravel().tofile(f)


def load_level_set_file(path: Union[str, Path]) -> Tuple[Tuple[float, ...], np.ndarray]:
    with open(path, "rb") as f:
        header = np.fromfile(f, dtype="<i4", count=2)
        if header.size != 2:
            raise GeometryError(f"{path}: truncated level-set header")
        nx, ny = int(header[0]), int(header[1])
        bbox = np.fromfile(f, dtype="<f8", count=4)
        samples = np.fromfile(f, dtype="<f8", count=nx * ny)
    if bbox.size != 4 or samples.size != nx * ny:
        raise GeometryError(f"{path}: expected {nx}x{ny} samples, file is truncated")
    return tuple(float(v) for v in bbox), samples.reshape(ny, nx)


# ---------------------------------------------------------------------------
# Distances and normals
# ---------------------------------------------------------------------------

def _check_extended_box(domain: Domain, pts: np.ndarray) -> None:
    xmin, xmax, ymin, ymax = domain.bounding_box
    wx, wy = xmax - xmin, ymax - ymin
    bad = (
        (pts[:, 0] < xmin - wx) | (pts[:, 0] > xmax + wx)
        | (pts[:, 1] < ymin - wy) | (pts[:, 1] > ymax + wy)
    )
    if bad.any():
        raise GeometryError(f"point {pts[np.flatnonzero(bad)[0]].tolist()} is outside the extended bounding box")


def project_to_boundary(domain: Domain, points: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest boundary points and distances for an (N, 2) batch."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(domain, BallDomain):
        norms = np.linalg.norm(pts, axis=1)
        dirs = np.tile([1.0, 0.0], (len(pts), 1))
        nz = norms > 0
        dirs[nz] = pts[nz] / norms[nz, None]
        return domain.radius * dirs, np.abs(norms - domain.radius)

    _, samples = domain.boundary_samples()
    _, idx = domain.sample_tree().query(pts)
    y = samples[idx].copy()
    g = domain.grad_rho(y)
    t = np.einsum("ij,ij->i", pts - y, g) / np.einsum("ij,ij->i", g, g)

    def residual(y_, t_):
        g_ = domain.grad_rho(y_)
        return np.column_stack([y_ - pts - t_[:, None] * g_, domain.rho(y_)])

    F = residual(y, t)
    for _ in range(_NEWTON_MAX_ITER):
        fnorm = np.linalg.norm(F, axis=1)
        if fnorm.max() <= _NEWTON_TOL:
            break
        g = domain.grad_rho(y)
        H = domain.hess_rho(y)
        J = np.zeros((len(pts), 3, 3))
        J[:, :2, :2] = np.eye(2) - t[:, None, None] * H
        J[:, :2, 2] = -g
        J[:, 2, :2] = g
        try:
            step = np.linalg.solve(J, -F[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as e:
            raise ProjectionError(f"singular projection system near {pts[int(np.argmax(fnorm))].tolist()}") from e
        damping = np.ones(len(pts))
        for _ in range(30):
            y_new = y + damping[:, None] * step[:, :2]
            t_new = t + damping * step[:, 2]
            F_new = residual(y_new, t_new)
            ok = (np.linalg.norm(F_new, axis=1) <= (1.0 - 1e-4 * damping) * fnorm) | (fnorm <= _NEWTON_TOL)
            if ok.all():
                break
            damping = np.where(ok, damping, 0.5 * damping)
        y, t, F = y_new, t_new, F_new
    fnorm = np.linalg.norm(F, axis=1)
    if fnorm.max() > 1e-10:
        worst = int(np.argmax(fnorm))
        raise ProjectionError(
            f"projection onto {domain.describe()} did not converge for x={pts[worst].tolist()} "
            f"(residual {fnorm[worst]:.3e})"
        )
    return y, np.linalg.norm(pts - y, axis=1)


def signed_distance(domain: Domain, x: ArrayLike) -> Union[float, np.ndarray]:
    """Signed distance to ∂Ω: negative inside, positive outside."""
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    _check_extended_box(domain, pts)
    if isinstance(domain, BallDomain):
        d = np.linalg.norm(pts, axis=1) - domain.radius
    else:
        _, dist = project_to_boundary(domain, pts)
        d = np.where(domain.rho(pts) < 0, -dist, dist)
    return float(d[0]) if x.ndim == 1 else d


def boundary_normal(domain: Domain, y: ArrayLike) -> np.ndarray:
    """Exterior unit normal ∇ρ/|∇ρ| at a boundary point."""
    y = np.asarray(y, dtype=float)
    d = np.atleast_1d(signed_distance(domain, y))
    if np.abs(d).max() > 1e-6:
        raise GeometryError(f"point {y.tolist()} is not on the boundary (distance {np.abs(d).max():.3e})")
    return domain.unit_normals(y)


# ---------------------------------------------------------------------------
# Offset gap
# ---------------------------------------------------------------------------

def _offsets_outside(domain: Domain, lam: float, n_samples: int) -> bool:
    _, y = domain.boundary_samples(n_samples)
    z = y + lam * domain.unit_normals(y)
    return bool((domain.rho(z) > 0).all())


def probe_offset_threshold(domain: Domain, n_samples: int = 1024, rel_tol: float = 1e-4) -> float:
    """Largest λ (capped by min(1, smallest curvature radius)) whose offsets all land outside Ω̄."""
    cap = min(1.0, domain.min_curvature_radius())
    if _offsets_outside(domain, cap, n_samples):
        return cap
    lo, hi = 0.0, cap
    while hi - lo > rel_tol * cap:
        mid = 0.5 * (lo + hi)
        if _offsets_outside(domain, mid, n_samples):
            lo = mid
        else:
            hi = mid
    logger.info(f"Offset threshold for {domain.describe()}: {lo:.6f}")
    return lo


def normal_offset_gap(domain: Domain, lam: float, n_samples: int = 1024) -> float:
    """δ(λ) = min over ∂Ω of dist(y + λν(y), Ω̄)."""
    if lam <= 0:
        raise PreconditionError(f"offset length must be positive, got {lam}")
    lam0 = domain.offset_threshold()
    if lam >= lam0:
        raise OffsetThresholdError(f"λ={lam} is not below the probed threshold λ₀={lam0:.6f} for {domain.describe()}")
    theta, y = domain.boundary_samples(n_samples)
    z = y + lam * domain.unit_normals(y)
    inside = domain.rho(z) <= 0
    if inside.any():
        raise OffsetThresholdError(f"offset of {y[np.flatnonzero(inside)[0]].tolist()} by λ={lam} lands inside the domain")
    d = np.atleast_1d(signed_distance(domain, z))
    k = int(np.argmin(d))
    best = float(d[k])

    def gap(th: float) -> float:
        yb = domain.boundary_point(np.array([th]))
        return float(np.atleast_1d(signed_distance(domain, yb + lam * domain.unit_normals(yb)))[0])

    width = 2.0 * np.pi / n_samples
    res = optimize.minimize_scalar(gap, bounds=(theta[k] - width, theta[k] + width), method="bounded",
                                   options={"xatol": 1e-10})
    if res.success:
        best = min(best, float(res.fun))
    return min(best, lam)


# ---------------------------------------------------------------------------
# Masked grids
# ---------------------------------------------------------------------------

class MaskedGrid:
    """Uniform lattice clipped to a domain with per-node classification."""

    def __init__(self, domain: Domain, h: float, origin: ArrayLike, node_class: np.ndarray):
        self.domain = domain
        self.h = float(h)
        self.origin = np.asarray(origin, dtype=float)
        self.node_class = node_class
        self.shape = node_class.shape
        self.active = node_class != EXTERIOR
        self.interior = node_class == INTERIOR

        flat = np.flatnonzero(self.active.ravel())
        self.active_index = np.full(self.shape, -1, dtype=np.int64)
        self.active_index.ravel()[flat] = np.arange(flat.size)
        self.ij = np.column_stack(np.unravel_index(flat, self.shape))
        self.coordinates = self.origin + self.h * self.ij
        self.classes = node_class.ravel()[flat]
        self.boundary_ids = np.flatnonzero(self.classes == BOUNDARY_ADJACENT)
        self.interior_ids = np.flatnonzero(self.classes == INTERIOR)
        self.projections = np.empty((0, 2))
        self.projection_distance = np.empty(0)
        self._fill_indices = None

    @property
    def n_active(self) -> int:
        return len(self.coordinates)

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        nx, ny = self.shape
        return self.origin[0] + self.h * np.arange(nx), self.origin[1] + self.h * np.arange(ny)

    def neighbor_ids(self, di: int, dj: int, ids: Optional[np.ndarray] = None) -> np.ndarray:
        """Active id of the node at lattice offset (di, dj), or -1."""
        ij = self.ij if ids is None else self.ij[ids]
        i, j = ij[:, 0] + di, ij[:, 1] + dj
        nx, ny = self.shape
        ok = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        out = np.full(len(ij), -1, dtype=np.int64)
        out[ok] = self.active_index[i[ok], j[ok]]
        return out

    def node_at(self, point: ArrayLike) -> int:
        """Active id of the lattice node nearest to a point."""
        p = np.asarray(point, dtype=float)
        i, j = np.rint((p - self.origin) / self.h).astype(int)
        nx, ny = self.shape
        if not (0 <= i < nx and 0 <= j < ny) or self.active_index[i, j] < 0:
            raise GeometryError(f"no active node near {p.tolist()}")
        return int(self.active_index[i, j])

    def source_id(self) -> int:
        return self.node_at(np.zeros(2))

    def full_array(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=float)
        out[self.ij[:, 0], self.ij[:, 1]] = values
        return out

    def extend(self, values: np.ndarray) -> np.ndarray:
        """Full-lattice array with exterior nodes filled by their nearest active value."""
        if self._fill_indices is None:
            _, self._fill_indices = ndimage.distance_transform_edt(~self.active, return_indices=True)
        full = self.full_array(values, fill=0.0)
        return full[self._fill_indices[0], self._fill_indices[1]]

    def sample(self, func) -> "GridFunction":
        return GridFunction(self, np.asarray(func(self.coordinates), dtype=float))

    def summary(self) -> Dict[str, object]:
        return {
            "domain": self.domain.describe(),
            "h": self.h,
            "shape": list(self.shape),
            "active": int(self.n_active),
            "interior": int(len(self.interior_ids)),
            "boundary_adjacent": int(len(self.boundary_ids)),
        }


class GridFunction:
    """Real values on the active nodes of a masked grid."""

    def __init__(self, grid: MaskedGrid, values: np.ndarray, name: str = ""):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n_active,):
            raise ValueError(f"expected {grid.n_active} values, got shape {values.shape}")
        self.grid = grid
        self.values = values
        self.name = name

    def evaluate(self, points: ArrayLike) -> np.ndarray:
        """Bilinear interpolation; exterior lattice values are nearest-active fills."""
        xs, ys = self.grid.axes()
        interp = RegularGridInterpolator((xs, ys), self.grid.extend(self.values), method="linear",
                                         bounds_error=False, fill_value=None)
        return interp(np.atleast_2d(np.asarray(points, dtype=float)))

    def at(self, point: ArrayLike) -> float:
        return float(self.values[self.grid.node_at(point)])

    def with_values(self, values: np.ndarray, name: Optional[str] = None) -> "GridFunction":
        return GridFunction(self.grid, values, self.name if name is None else name)

    def max_abs_difference(self, other: "GridFunction", mask: Optional[np.ndarray] = None) -> float:
        diff = np.abs(self.values - other.values)
        return float(diff[mask].max() if mask is not None else diff.max())


# ---------------------------------------------------------------------------
# Grid construction
# ---------------------------------------------------------------------------

def build_grid(domain: Domain, h: float, min_nodes_across: int = 16) -> MaskedGrid:
    """Lattice of spacing h through the origin, clipped to the domain."""
    if h <= 0:
        raise ConfigurationError(f"grid spacing must be positive, got {h}")
    diameter = domain.diameter
    if h >= diameter:
        raise ConfigurationError(f"grid spacing {h} is not below the domain diameter {diameter:.4f}")
    nodes_across = int(np.floor(diameter / h + 1e-9)) + 1
    if nodes_across < min_nodes_across:
        raise ConfigurationError(
            f"grid too coarse: {nodes_across} nodes across {domain.describe()}, need {min_nodes_across}"
        )

    xmin, xmax, ymin, ymax = domain.bounding_box
    i_range = np.arange(int(np.floor(xmin / h)) - _PAD, int(np.ceil(xmax / h)) + _PAD + 1)
    j_range = np.arange(int(np.floor(ymin / h)) - _PAD, int(np.ceil(ymax / h)) + _PAD + 1)
    X, Y = np.meshgrid(h * i_range, h * j_range, indexing="ij")
    inside = domain.rho(np.stack([X, Y], axis=-1)) < 0

    all_neighbours = inside.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                all_neighbours &= np.roll(inside, shift=(-di, -dj), axis=(0, 1))
    node_class = np.where(inside, np.where(all_neighbours, INTERIOR, BOUNDARY_ADJACENT), EXTERIOR).astype(np.int8)

    grid = MaskedGrid(domain, h, (h * i_range[0], h * j_range[0]), node_class)
    if len(grid.boundary_ids):
        proj, dist = project_to_boundary(domain, grid.coordinates[grid.boundary_ids])
        if dist.max() > h * np.sqrt(2.0) + 1e-9:
            worst = int(grid.boundary_ids[int(np.argmax(dist))])
            raise GeometryError(f"boundary-adjacent node {grid.coordinates[worst].tolist()} is {dist.max():.4f} from the boundary")
        grid.projections = proj
        grid.projection_distance = dist
    logger.info(
        f"Built grid on {domain.describe()} with h={h:g}: "
        f"{len(grid.interior_ids)} interior, {len(grid.boundary_ids)} boundary-adjacent nodes"
    )
    return grid
