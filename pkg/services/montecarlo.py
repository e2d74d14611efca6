"""
Euler–Maruyama exit-time simulation for dX = b(X)dt + √(2ε)σ(X)dW.

Each trajectory owns a counter-based random stream keyed by (seed, stream id),
so a sample does not depend on how trajectories are batched or distributed
over processes. Exits are located by linear interpolation of the signed
distance between the last inside point and the first outside point, then
projected onto the boundary. Trajectories that reach the step cap are kept as
censored samples.
"""

import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from services.errors import PreconditionError, StatisticsError
from services.geometry import project_to_boundary, signed_distance

logger = logging.getLogger(__name__)

DEFAULT_MAX_STEPS = 10 ** 9
MAX_DT = 1e-2
NORMAL_BLOCK = 256
HISTOGRAM_BINS = 16
MIN_UNCENSORED = 100
MAX_CENSORED_FRACTION = 0.01


def stream_generator(seed: int, stream_id: int) -> np.random.Generator:
    """Independent generator for one trajectory."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream_id)])))


def polar_angle(points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)


def angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, 2.0 * np.pi) - np.pi)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

class ExitSample:
    """One simulated first exit (or a censored trajectory)."""

    def __init__(
        self,
        exit_time: float,
        exit_point: Optional[np.ndarray],
        steps: int,
        stream_id: int,
        seed: int,
        eps: float,
        censored: bool = False,
        final_point: Optional[np.ndarray] = None,
    ):
        self.exit_time = float(exit_time)
        self.exit_point = None if exit_point is None else np.asarray(exit_point, dtype=float)
        self.final_point = None if final_point is None else np.asarray(final_point, dtype=float)
        self.steps = int(steps)
        self.stream_id = int(stream_id)
        self.seed = int(seed)
        self.eps = float(eps)
        self.censored = bool(censored)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stream_id": self.stream_id,
            "seed": self.seed,
            "eps": self.eps,
            "tau": self.exit_time,
            "exit_point": None if self.exit_point is None else self.exit_point.tolist(),
            "steps": self.steps,
            "censored": self.censored,
        }


def _check_inputs(problem, eps: float, x0: np.ndarray, dt: float, max_steps: int) -> None:
    if eps < 0:
        raise PreconditionError(f"noise level must be non-negative, got eps={eps}")
    if not 0 < dt <= MAX_DT:
        raise PreconditionError(f"time step must lie in (0, {MAX_DT}], got dt={dt}")
    if max_steps < 1:
        raise PreconditionError(f"step cap must be positive, got {max_steps}")
    if problem.domain.rho(x0[None, :])[0] >= 0:
        raise PreconditionError(f"starting point {x0.tolist()} is not inside {problem.domain.describe()}")


def simulate_exits(
    problem,
    eps: float,
    x0,
    dt: float,
    n: int,
    seed: int = 0,
    first_stream: int = 0,
    max_steps: int = DEFAULT_MAX_STEPS,
    block: int = NORMAL_BLOCK,
    censor_level: int = logging.WARNING,
) -> List[ExitSample]:
    """Simulate streams first_stream … first_stream+n−1 in lockstep; censored samples keep their last position."""
    x0 = np.asarray(x0, dtype=float).reshape(2)
    _check_inputs(problem, eps, x0, dt, max_steps)
    c = problem.coefficients
    domain = problem.domain

    streams = np.arange(first_stream, first_stream + n)
    generators = [stream_generator(seed, int(s)) for s in streams]
    x = np.tile(x0, (n, 1))
    normals = np.empty((n, block, 2))
    alive = np.arange(n)
    scale = np.sqrt(2.0 * eps * dt)
    samples: List[Optional[ExitSample]] = [None] * n

    step = 0
    while alive.size and step < max_steps:
        k = step % block
        if k == 0:
            for i in alive:
                normals[i] = generators[i].standard_normal((block, 2))
        xa = x[alive]
        noise = np.einsum("nij,nj->ni", c.sigma(xa), normals[alive, k])
        new = xa + c.b(xa) * dt + scale * noise
        step += 1

        out = domain.rho(new) >= 0
        if out.any():
            before, after = xa[out], new[out]
            d0 = np.atleast_1d(signed_distance(domain, before))
            d1 = np.atleast_1d(signed_distance(domain, after))
            denom = d1 - d0
            frac = np.where(denom > 0, np.clip(-d0 / np.where(denom > 0, denom, 1.0), 0.0, 1.0), 1.0)
            crossing = before + frac[:, None] * (after - before)
            exit_points, _ = project_to_boundary(domain, crossing)
            for i, point, s in zip(alive[out], exit_points, frac):
                samples[i] = ExitSample((step - 1 + s) * dt, point, step, streams[i], seed, eps)
        x[alive] = new
        alive = alive[~out]

    if alive.size:
        logger.log(censor_level, f"{alive.size}/{n} trajectories censored at {max_steps} steps (eps={eps}, dt={dt})")
        for i in alive:
            samples[i] = ExitSample(max_steps * dt, None, max_steps, streams[i], seed, eps, censored=True,
                                    final_point=x[i].copy())
    logger.debug(f"Simulated {n} exits at eps={eps} in {step} lockstep iterations")
    return samples


def simulate_exit(
    problem,
    eps: float,
    x0,
    dt: float,
    stream: int,
    seed: int = 0,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> ExitSample:
    return simulate_exits(problem, eps, x0, dt, 1, seed=seed, first_stream=stream, max_steps=max_steps)[0]


def export_samples_csv(samples: Sequence[ExitSample], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["stream_id", "tau", "exit_x1", "exit_x2", "censored"])
        for s in samples:
            x1, x2 = (float("nan"), float("nan")) if s.exit_point is None else s.exit_point
            writer.writerow([s.stream_id, repr(s.exit_time), repr(float(x1)), repr(float(x2)), int(s.censored)])


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

class ExitStatistics:
    """Exit-time and exit-location summary of a batch of samples at one noise level."""

    def __init__(
        self,
        eps: float,
        exit_times: np.ndarray,
        exit_angles: np.ndarray,
        n_censored: int,
        argmin_angles: Optional[np.ndarray] = None,
        delta: Optional[float] = None,
        bins: int = HISTOGRAM_BINS,
    ):
        self.eps = float(eps)
        self.exit_times = np.asarray(exit_times, dtype=float)
        self.exit_angles = np.asarray(exit_angles, dtype=float)
        self.n = int(self.exit_times.size)
        self.n_censored = int(n_censored)
        self.argmin_angles = None if argmin_angles is None else np.asarray(argmin_angles, dtype=float)
        self.delta = delta
        self.bin_edges = np.linspace(0.0, 2.0 * np.pi, bins + 1)
        self.histogram, _ = np.histogram(self.exit_angles, bins=self.bin_edges)
        self.mean_tau = float(self.exit_times.mean())
        self.median_tau = float(np.median(self.exit_times))
        self.eps_log_mean = self.eps * float(np.log(self.mean_tau)) if self.mean_tau > 0 else float("-inf")

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / (self.n + self.n_censored)

    @property
    def underpowered(self) -> bool:
        return self.n < MIN_UNCENSORED

    def concentration_mass(self, delta: float) -> Optional[float]:
        """Fraction of exits within angular distance δ of the nearest argmin point."""
        if self.argmin_angles is None or self.argmin_angles.size == 0:
            return None
        dist = angular_distance(self.exit_angles[:, None], self.argmin_angles[None, :]).min(axis=1)
        return float(np.mean(dist <= delta))

    def uniformity_pvalue(self) -> float:
        return float(stats.chisquare(self.histogram).pvalue)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "n": self.n,
            "n_censored": self.n_censored,
            "censored_fraction": self.censored_fraction,
            "mean_tau": self.mean_tau,
            "median_tau": self.median_tau,
            "eps_log_mean": self.eps_log_mean,
            "histogram": self.histogram.tolist(),
            "delta": self.delta,
            "concentration_mass": None if self.delta is None else self.concentration_mass(self.delta),
            "uniformity_pvalue": self.uniformity_pvalue() if self.n else None,
            "underpowered": self.underpowered,
        }


def exit_statistics(
    samples: Sequence[ExitSample],
    argmin: Optional[np.ndarray] = None,
    delta: Optional[float] = None,
    bins: int = HISTOGRAM_BINS,
) -> ExitStatistics:
    """Summarise samples; `argmin` are boundary points of the exit-cost minimum.

    Fewer than MIN_UNCENSORED uncensored samples is not an error: the summary is
    returned with `underpowered` set and a warning is logged. StatisticsError is
    raised only for batches that cannot be summarised at all.
    """
    if not samples:
        raise StatisticsError("no samples to summarise")
    eps_values = {s.eps for s in samples}
    if len(eps_values) != 1:
        raise StatisticsError(f"samples mix noise levels {sorted(eps_values)}")
    done = [s for s in samples if not s.censored]
    n_censored = len(samples) - len(done)
    if not done:
        raise StatisticsError(f"all {len(samples)} samples are censored")
    if len(done) < MIN_UNCENSORED:
        logger.warning(f"Only {len(done)} uncensored samples; statistics need at least {MIN_UNCENSORED}")
    times = np.array([s.exit_time for s in done])
    angles = polar_angle(np.array([s.exit_point for s in done]))
    argmin_angles = None if argmin is None or len(argmin) == 0 else polar_angle(argmin)
    return ExitStatistics(eps_values.pop(), times, angles, n_censored, argmin_angles, delta, bins)


def exit_window_mass(samples: Sequence[ExitSample], m0: float, delta: float) -> float:
    """Fraction of samples with e^{(m₀−δ)/ε} < τ < e^{(m₀+δ)/ε}."""
    if not samples:
        raise StatisticsError("no samples for the exit-time window")
    hits = 0
    for s in samples:
        lo, hi = np.exp((m0 - delta) / s.eps), np.exp((m0 + delta) / s.eps)
        hits += int(not s.censored and lo < s.exit_time < hi)
    return hits / len(samples)


def exit_probability_curve(
    samples: Sequence[ExitSample],
    times: Sequence[float],
    region: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """Empirical ℙ(τ < t, X_τ ∈ Γ), Γ an angular interval (counter-clockwise from region[0])."""
    if not samples:
        raise StatisticsError("no samples for the exit probability curve")
    done = [s for s in samples if not s.censored]
    taus = np.array([s.exit_time for s in done])
    if done and region is not None:
        start, stop = region
        width = np.mod(stop - start, 2.0 * np.pi)
        rel = np.mod(polar_angle(np.array([s.exit_point for s in done])) - start, 2.0 * np.pi)
        taus = taus[rel <= width]
    times = np.asarray(times, dtype=float)
    return np.array([np.count_nonzero(taus < t) for t in times], dtype=float) / len(samples)


def stopped_data_mean(
    samples: Sequence[ExitSample],
    data,
    initial=None,
) -> Tuple[float, float]:
    """Mean and standard error of g(X_τ) for exits and u₀(X_t) for trajectories alive at t.

    With samples censored at t this is the Feynman–Kac value u^ε(x0, t) of the
    linear evolution with boundary data g and initial data u₀ (g by default).
    """
    if not samples:
        raise StatisticsError("no samples for the stopped expectation")
    initial = data if initial is None else initial
    exited = [s.exit_point for s in samples if not s.censored]
    alive = [s.final_point for s in samples if s.censored]
    if any(p is None for p in alive):
        raise StatisticsError("censored samples carry no final position")
    values = np.concatenate([
        np.asarray(data(np.array(exited)), dtype=float) if exited else np.empty(0),
        np.asarray(initial(np.array(alive)), dtype=float) if alive else np.empty(0),
    ])
    stderr = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("inf")
    return float(values.mean()), stderr


def simulate_parabolic_value(problem, eps: float, x0, t: float, dt: float, n: int,
                             seed: int = 0) -> Tuple[float, float]:
    """Monte Carlo estimate of u^ε(x0, t) = E[g(X_{τ∧t})] with initial data g."""
    if t <= 0:
        raise PreconditionError(f"time horizon must be positive, got t={t}")
    steps = max(1, int(round(t / dt)))
    samples = simulate_exits(problem, eps, x0, dt, n, seed=seed, max_steps=steps, censor_level=logging.DEBUG)
    return stopped_data_mean(samples, problem.boundary_data)


# ---------------------------------------------------------------------------
# Exit-rate fit
# ---------------------------------------------------------------------------

class ExitRateFit:
    """Least-squares fit of log(mean τ) against 1/ε."""

    def __init__(self, slope: float, intercept: float, rvalue: float, stderr: float, table: List[Dict[str, Any]]):
        self.slope = slope
        self.intercept = intercept
        self.rvalue = rvalue
        self.stderr = stderr
        self.table = table

    @property
    def monotone(self) -> bool:
        """Mean exit time increases as ε decreases."""
        rows = sorted(self.table, key=lambda r: r["eps"], reverse=True)
        return all(a["mean_tau"] < b["mean_tau"] for a, b in zip(rows, rows[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m0_estimate": self.slope,
            "intercept": self.intercept,
            "rvalue": self.rvalue,
            "stderr": self.stderr,
            "monotone": self.monotone,
            "table": self.table,
        }


def _check_eps_list(eps_list: Sequence[float]) -> None:
    if len(set(float(e) for e in eps_list)) < 3:
        raise PreconditionError(f"the exit-rate fit needs at least 3 distinct noise levels, got {list(eps_list)}")


def fit_exit_rate(
    samples_by_eps: Mapping[float, Sequence[ExitSample]],
    max_censored: float = MAX_CENSORED_FRACTION,
) -> ExitRateFit:
    _check_eps_list(list(samples_by_eps))
    table = []
    for eps, samples in sorted(samples_by_eps.items(), reverse=True):
        n_censored = sum(s.censored for s in samples)
        done = [s.exit_time for s in samples if not s.censored]
        mean_tau = float(np.mean(done)) if done else float("nan")
        table.append({
            "eps": float(eps),
            "n": len(samples),
            "n_censored": n_censored,
            "censored_fraction": n_censored / len(samples) if samples else 1.0,
            "mean_tau": mean_tau,
            "eps_log_mean": float(eps) * float(np.log(mean_tau)) if done else float("nan"),
        })
    bad = [row for row in table if row["censored_fraction"] >= max_censored]
    if bad:
        detail = ", ".join(f"eps={row['eps']}: {row['censored_fraction']:.2%}" for row in bad)
        raise StatisticsError(f"censored fraction exceeds {max_censored:.0%} ({detail}); refusing the fit")

    inv_eps = np.array([1.0 / row["eps"] for row in table])
    log_tau = np.log(np.array([row["mean_tau"] for row in table]))
    fit = stats.linregress(inv_eps, log_tau)
    result = ExitRateFit(float(fit.slope), float(fit.intercept), float(fit.rvalue), float(fit.stderr), table)
    logger.info(f"Exit-rate fit over {len(table)} noise levels: slope {result.slope:.4f} (stderr {result.stderr:.2e})")
    return result


def estimate_m0(
    problem,
    eps_list: Sequence[float],
    n_traj: int,
    dt: float,
    seed: int = 0,
    x0=(0.0, 0.0),
    max_steps: int = DEFAULT_MAX_STEPS,
    max_censored: float = MAX_CENSORED_FRACTION,
) -> ExitRateFit:
    """Simulate n_traj exits per noise level and fit the exponential rate."""
    _check_eps_list(eps_list)
    samples = {float(eps): simulate_exits(problem, eps, x0, dt, n_traj, seed=seed, max_steps=max_steps)
               for eps in eps_list}
    return fit_exit_rate(samples, max_censored)
