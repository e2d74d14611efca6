"""
The deterministic flow Ẋ = b(X): RK4 trajectories, confinement diagnostics
and the transport-limit oracle.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np

from services.errors import PreconditionError, StabilityError

logger = logging.getLogger(__name__)

DEFAULT_DT = 1e-3
HORIZON_CAP = 1e3


def rk4_step(drift: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    k1 = drift(x)
    k2 = drift(x + 0.5 * dt * k1)
    k3 = drift(x + 0.5 * dt * k2)
    k4 = drift(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class Trajectory:
    """Positions of one flow line on a uniform time grid."""

    def __init__(self, times: np.ndarray, points: np.ndarray, dt: float, direction: str,
                 escape_time: Optional[float] = None):
        self.times = times
        self.points = points
        self.dt = dt
        self.direction = direction
        self.escape_time = escape_time

    @property
    def final(self) -> np.ndarray:
        return self.points[-1]

    @property
    def escaped(self) -> bool:
        return self.escape_time is not None

    def export_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "x1", "x2"])
            for t, p in zip(self.times, self.points):
                writer.writerow([repr(float(t)), repr(float(p[0])), repr(float(p[1]))])


def integrate_flow(c, x, t_final: float, dt: float = DEFAULT_DT,
                   box: Optional[Tuple[float, float, float, float]] = None) -> Trajectory:
    """RK4 trajectory of Ẋ = b(X) from x; negative t_final integrates backwards.

    When a box is given the integration stops at the first step that leaves it
    and the time is recorded as an escape event.
    """
    if dt <= 0:
        raise PreconditionError(f"time step must be positive, got {dt}")
    x0 = np.asarray(x, dtype=float)
    n_steps = max(1, int(math.ceil(abs(t_final) / dt - 1e-12)))
    step = t_final / n_steps
    direction = "backward" if t_final < 0 else "forward"
    points = np.empty((n_steps + 1, x0.size))
    points[0] = x0
    escape_time = None
    k = 0
    for k in range(1, n_steps + 1):
        points[k] = rk4_step(c.b, points[k - 1], step)
        if box is not None:
            px, py = points[k]
            if not (box[0] <= px <= box[1] and box[2] <= py <= box[3]):
                escape_time = k * step
                logger.debug(f"Trajectory from {x0.tolist()} left the box at t={escape_time:.4f}")
                break
    points = points[: k + 1]
    times = step * np.arange(k + 1)
    return Trajectory(times, points, abs(step), direction, escape_time)


def flow_map(c, points, t: float, dt: float = DEFAULT_DT) -> np.ndarray:
    """X(t; x) for a batch of starting points."""
    x = np.array(points, dtype=float)
    if t == 0:
        return x
    n_steps = max(1, int(math.ceil(abs(t) / dt - 1e-12)))
    step = t / n_steps
    for _ in range(n_steps):
        x = rk4_step(c.b, x, step)
    return x


def confinement_time(c, r: float, R: float, n_samples: int = 1024, dt: float = 1e-2,
                     cap: float = HORIZON_CAP) -> float:
    """Smallest sampled T with every net trajectory from B_R inside B_r on [T, 2T]."""
    if not 0 < r < R:
        raise PreconditionError(f"need 0 < r < R, got r={r}, R={R}")
    k = int(math.ceil(math.sqrt(n_samples)))
    axis = np.linspace(-R, R, k)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    net = np.column_stack([X.ravel(), Y.ravel()])
    net = net[np.linalg.norm(net, axis=1) <= R]
    angles = np.linspace(0.0, 2.0 * np.pi, 4 * k, endpoint=False)
    net = np.concatenate([net, R * np.column_stack([np.cos(angles), np.sin(angles)])])
    spacing = 2.0 * R / (k - 1)

    horizon = 1.0
    while horizon <= cap:
        n_steps = int(math.ceil(2.0 * horizon / dt))
        x = net.copy()
        last_outside = np.zeros(len(net))
        for step in range(1, n_steps + 1):
            x = rk4_step(c.b, x, dt)
            radius = np.linalg.norm(x, axis=1)
            if not np.all(np.isfinite(radius)) or radius.max() > 1e6 * R:
                raise StabilityError(f"trajectories blow up before t={step * dt:.3f}; the flow is not confining")
            last_outside = np.where(radius >= r, step * dt, last_outside)
        T = float(last_outside.max()) + dt
        if T <= horizon:
            logger.info(f"Confinement time T({r:g},{R:g}) = {T:.4f} on a net of {len(net)} points (spacing {spacing:.4f})")
            return T
        horizon *= 2.0
    raise StabilityError(f"trajectories from B_{R:g} do not settle in B_{r:g} before t={cap:g}")


def transport_solution(c, g, x, t: float, dt: float = DEFAULT_DT) -> Union[float, np.ndarray]:
    """g(X(t;x)): the exact solution of u_t = b·Du with u(·,0) = g."""
    if t < 0:
        raise PreconditionError(f"transport time must be nonnegative, got {t}")
    x = np.asarray(x, dtype=float)
    values = g(flow_map(c, np.atleast_2d(x), t, dt))
    return float(values[0]) if x.ndim == 1 else values


def reverse_flow_integral(c, points: np.ndarray, f: Callable[[np.ndarray], np.ndarray], R: float,
                          dt: float = 5e-3, cap: float = HORIZON_CAP) -> Tuple[np.ndarray, np.ndarray]:
    """∫₀^τ f(X(−s;x)) ds up to the time τ the reverse trajectory leaves B_R.

    Integrand and position are advanced together by RK4. Returns the
    integrals and the exit times.
    """
    x = np.array(points, dtype=float)
    n = len(x)
    integral = np.zeros(n)
    exit_time = np.full(n, np.nan)
    alive = np.linalg.norm(x, axis=1) < R
    exit_time[~alive] = 0.0
    reverse = lambda y: -c.b(y)
    t = 0.0
    while alive.any():
        if t > cap:
            worst = points[np.flatnonzero(alive)[0]]
            raise StabilityError(f"reverse trajectory from {np.asarray(worst).tolist()} stays in B_{R:g} beyond t={cap:g}")
        y = x[alive]
        k1 = reverse(y)
        k2 = reverse(y + 0.5 * dt * k1)
        k3 = reverse(y + 0.5 * dt * k2)
        k4 = reverse(y + dt * k3)
        f1 = f(y)
        f2 = f(y + 0.5 * dt * k1)
        f3 = f(y + 0.5 * dt * k2)
        f4 = f(y + dt * k3)
        x[alive] = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        integral[alive] += dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        t += dt
        left = alive.copy()
        left[alive] = np.linalg.norm(x[alive], axis=1) >= R
        exit_time[left] = t
        alive &= ~left
        if alive.any() and np.linalg.norm(x[alive], axis=1).min() < 1e-9 * R:
            worst = points[np.flatnonzero(alive)[np.argmin(np.linalg.norm(x[alive], axis=1))]]
            raise StabilityError(f"reverse trajectory from {np.asarray(worst).tolist()} collapses onto an equilibrium inside B_{R:g}")
    return integral, exit_time
