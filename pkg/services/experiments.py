"""
Config-driven experiment drivers.

Each driver builds the problem from an ExperimentConfig, fans independent
per-ε runs out through the sweep worker, and reduces the results into a
RunReport whose checks are recomputable from the stored numbers. Failed
inequalities are report entries; only broken inputs raise.
"""

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services import certificates, montecarlo, parabolic, quasipotential
from services.cache import FieldCache, NullCache
from services.certificates import bound_check
from services.config import (
    ExperimentConfig,
    build_config_grid,
    build_problem,
    config_hash,
    parse_config,
    resolved_config,
)
from services.errors import (
    ConfigurationError,
    MetastabError,
    PreconditionError,
    StabilityError,
    StatisticsError,
)
from services.flow import transport_solution
from services.geometry import MaskedGrid, build_grid, normal_offset_gap, parse_domain, signed_distance
from services.model import BoundaryData, Problem, boundary_data_from_preset, semilinear_from_preset, validate_assumptions
from utils.versioning import LIBRARY_VERSION
from workers.workers import SweepJob, SweepWorker, collect

logger = logging.getLogger(__name__)

SIGMA_FAMILIES = ("inverse", "log")
TRANSPORT_EPS_MAX = 1e-2
PLOT_STRIDE = 10


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def skipped_check(name: str, reason: str) -> Dict[str, Any]:
    """A sub-test that did not run; `reason` is a machine-readable code."""
    return {"name": name, "skipped": True, "reason": reason, "passed": None}


class RunReport:
    """Results of one experiment run with its provenance."""

    def __init__(self, kind: str, cfg: ExperimentConfig):
        self.kind = kind
        self.config = resolved_config(cfg)
        self.config_hash = config_hash(cfg)
        self.results: Dict[str, Any] = {}
        self.checks: List[Dict[str, Any]] = []
        self.tables: Dict[str, Tuple[List[str], List[List[Any]]]] = {}
        self.plot: List[Tuple[str, float, float]] = []
        self.log: List[str] = []

    def add_check(self, check: Dict[str, Any]) -> Dict[str, Any]:
        self.checks.append(check)
        if check.get("skipped"):
            logger.warning(f"Skipped {check['name']}: {check['reason']}")
        elif not check["passed"]:
            logger.warning(f"Check {check['name']} failed: {check.get('value')} {check.get('sense')} {check.get('bound')}")
        return check

    def add_table(self, name: str, headers: List[str], rows: List[List[Any]]) -> None:
        self.tables[name] = (headers, rows)

    def add_series(self, series: str, xs: Sequence[float], ys: Sequence[float]) -> None:
        self.plot.extend((series, float(x), float(y)) for x, y in zip(xs, ys))

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks if not c.get("skipped"))

    def failures(self) -> List[str]:
        return [c["name"] for c in self.checks if not c.get("skipped") and not c["passed"]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "library_version": LIBRARY_VERSION,
            "config_hash": self.config_hash,
            "passed": self.passed,
            "checks": self.checks,
            "results": self.results,
            "config": self.config,
            "log": self.log,
        }


class RegimeReport(RunReport):
    """Probe values per (ε, λ) with the regime checks derived from them."""

    def __init__(self, kind: str, cfg: ExperimentConfig, m0: float, m0_provenance: str):
        super().__init__(kind, cfg)
        self.m0 = m0
        self.m0_provenance = m0_provenance
        self.entries: List[Dict[str, Any]] = []

    def recheck(self) -> List[bool]:
        """Re-derive every entry verdict from its stored probe values and tolerance."""
        verdicts = []
        for e in self.entries:
            if e.get("skipped"):
                continue
            err = max(abs(v - e["target"]) for values in e["values"].values() for v in values)
            verdicts.append(err <= e["tolerance"])
        return verdicts

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["results"] = {"m0": self.m0, "m0_provenance": self.m0_provenance,
                           "entries": self.entries, **self.results}
        return data


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def open_cache(cfg: ExperimentConfig) -> FieldCache:
    return FieldCache(cfg.cache_dir) if cfg.cache_dir else NullCache()


def _setup(cfg: ExperimentConfig, keep_semilinear: bool = True) -> Tuple[Problem, MaskedGrid]:
    problem = build_problem(cfg.problem)
    if not keep_semilinear:
        problem.semilinear = None
    return problem, build_config_grid(cfg, problem)


def check_probe_margin(cfg: ExperimentConfig, grid: MaskedGrid, points=None) -> np.ndarray:
    """Probes must keep a distance of 3h from the boundary."""
    points = np.asarray(cfg.probes if points is None else points, dtype=float)
    d = np.atleast_1d(signed_distance(grid.domain, points))
    bad = d > -3.0 * grid.h
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ConfigurationError(
            f"probe {points[k].tolist()} is {-d[k]:.4f} from the boundary; the compact set needs a margin of 3h={3 * grid.h:.4f}"
        )
    return points


def argmin_data(problem: Problem, field, tol: float) -> Dict[str, Any]:
    """Boundary data on the argmin set: its value g₀ and whether it is constant there.

    A uniform argmin is judged on all of its points. Otherwise each cluster is an
    arc of width O(√h) around one minimiser and is represented by its minimising
    point; the spread of g inside each arc is reported but not held to tol.
    """
    g = problem.boundary_data
    g_origin = float(g(np.zeros((1, 2)))[0])
    if field.uniform or not field.clusters:
        vals = np.asarray(g(field.argmin), dtype=float)
        arc_spreads: List[float] = []
    else:
        vals = np.asarray(g(np.array([cl["min_point"] for cl in field.clusters])), dtype=float)
        arc_spreads = [_arc_spread(g, field, cl) for cl in field.clusters]
    spread = float(vals.max() - vals.min())
    g0 = float(vals.mean())
    return {
        "g0": g0,
        "g_origin": g_origin,
        "spread": spread,
        "arc_spreads": arc_spreads,
        "constant_on_argmin": spread <= tol,
        "g0_equals_origin": abs(g0 - g_origin) <= tol,
        "clusters": field.clusters,
    }


def _arc_spread(g, field, cluster: Dict[str, Any]) -> float:
    centre = np.asarray(cluster["min_point"])
    near = np.linalg.norm(field.argmin - centre, axis=1) <= cluster.get("radius", 0.0) + 1e-12
    vals = np.asarray(g(field.argmin[near]), dtype=float)
    return float(vals.max() - vals.min())


def _nonincreasing(values: Sequence[float], slack: float = 1e-12) -> bool:
    return all(b <= a + slack for a, b in zip(values, values[1:]))


def _run_jobs(jobs: List[SweepJob], workers: int) -> List[Any]:
    return collect(SweepWorker(jobs, workers).run())


# ---------------------------------------------------------------------------
# Worker jobs (module level so they pickle)
# ---------------------------------------------------------------------------

def _job_problem(payload: Dict[str, Any]) -> Tuple[ExperimentConfig, Problem, MaskedGrid]:
    cfg = parse_config(payload["config"])
    problem, grid = _setup(cfg, keep_semilinear=payload.get("semilinear", False))
    if payload.get("zero_data"):
        problem.boundary_data = boundary_data_from_preset("constant", 0.0)
    return cfg, problem, grid


def parabolic_job(payload: Dict[str, Any]) -> Dict[str, Any]:
    cfg, problem, grid = _job_problem(payload)
    eps = payload["eps"]
    times = np.asarray(payload["times"], dtype=float)
    initial = (lambda x: np.ones(len(x))) if payload.get("initial_one") else None
    solution = parabolic.solve_parabolic(problem, eps, grid, times, initial=initial, store=payload.get("store"))
    data = np.concatenate([problem.boundary_data(grid.projections),
                           (initial or problem.boundary_data)(grid.coordinates[grid.interior_ids])])
    out = {
        "eps": eps,
        "times": solution.times.tolist(),
        "probe_values": solution.probe_series(payload["probes"]).tolist(),
        "sup_abs": np.abs(solution.values).max(axis=1).tolist(),
        "maximum_principle": solution.maximum_principle_holds(float(data.min()), float(data.max())),
        "metadata": solution.metadata,
    }
    radius = payload.get("transport_radius")
    if radius is not None:
        near = np.linalg.norm(grid.coordinates, axis=1) <= radius
        pts = grid.coordinates[near]
        errors = []
        for t in payload["transport_times"]:
            k = solution.index_of(t)
            exact = transport_solution(problem.coefficients, problem.boundary_data, pts, t)
            errors.append(float(np.max(np.abs(solution.values[k][near] - exact))))
        out["transport_errors"] = errors
    return out


def stationary_job(payload: Dict[str, Any]) -> Dict[str, Any]:
    cfg, problem, grid = _job_problem({**payload, "semilinear": True})
    v = parabolic.solve_stationary(problem, payload["eps"], grid)
    probes = np.asarray(payload["probes"], dtype=float)
    near = np.asarray(payload["near_argmin"], dtype=float).reshape(-1, 2)
    return {
        "eps": payload["eps"],
        "v0": float(v.values[grid.source_id()]),
        "probe_values": v.evaluate(probes).tolist(),
        "near_values": v.evaluate(near).tolist() if len(near) else [],
        "range": [float(v.values.min()), float(v.values.max())],
    }


def montecarlo_job(payload: Dict[str, Any]) -> List[montecarlo.ExitSample]:
    cfg = parse_config(payload["config"])
    problem = build_problem(cfg.problem)
    mc = cfg.montecarlo
    return montecarlo.simulate_exits(problem, payload["eps"], mc.x0, payload["dt"], payload["n"], seed=mc.seed,
                                     first_stream=payload["first_stream"], max_steps=mc.max_steps)


# ---------------------------------------------------------------------------
# Quasi-potential
# ---------------------------------------------------------------------------

def run_quasipotential_experiment(cfg: ExperimentConfig, cache: Optional[FieldCache] = None) -> RunReport:
    """V, U and u_γ with their analytic, path-optimiser and consistency checks."""
    cache = cache or open_cache(cfg)
    problem, grid = _setup(cfg, keep_semilinear=False)
    c = problem.coefficients
    tol = cfg.tolerances
    order = cfg.grid.stencil_order
    report = RunReport("quasipotential", cfg)

    V, key = cache.get_or_solve(problem, grid, "point", 0.0, order)
    report.results["field"] = V.summary()
    report.results["m0_provenance"] = key
    sub = quasipotential.check_subsolution(V, c, tol.subsolution)
    report.results["subsolution"] = sub.to_dict()
    report.add_check({"name": "subsolution_residual", "value": sub.max, "bound": tol.subsolution,
                      "sense": "<=", "passed": sub.passed})

    try:
        exact = quasipotential.linear_quasipotential(c)
    except StabilityError as e:
        exact = None
        report.add_check(skipped_check("analytic_quasipotential", "no_closed_form"))
        logger.warning(f"No closed form for {c.preset}: {e}")
    if exact is not None:
        inner = np.linalg.norm(grid.coordinates, axis=1) <= 0.9
        err = float(np.max(np.abs(V.values[inner] - exact(grid.coordinates[inner]))))
        _, y = problem.domain.boundary_samples()
        m0_exact = float(exact(y).min())
        report.results["analytic"] = {"max_error_inner": err, "m0_exact": m0_exact}
        report.add_check(bound_check("analytic_max_error", err, tol.quasipotential))
        report.add_check(bound_check("m0_error", abs(V.m0 - m0_exact), tol.quasipotential))
        report.add_check(_refinement_check(problem, cfg, exact, err, cache))

    rng = np.random.default_rng(cfg.montecarlo.seed)
    rows = []
    for _ in range(10):
        radius, angle = rng.uniform(0.2, 0.8), rng.uniform(0.0, 2.0 * np.pi)
        target = radius * np.array([np.cos(angle), np.sin(angle)])
        if problem.domain.rho(target[None, :])[0] >= 0:
            continue
        path = quasipotential.minimize_path_action(c, np.zeros(2), target, domain=problem.domain)
        rows.append([float(target[0]), float(target[1]), V.at(target), path.action, abs(V.at(target) - path.action)])
    report.add_table("oracle", ["x1", "x2", "V_grid", "path_action", "difference"], rows)
    if rows:
        report.add_check(bound_check("path_oracle_difference", max(r[-1] for r in rows), tol.quasipotential))

    U, _ = cache.get_or_solve(problem, grid, "boundary", 0.0, order)
    u_small, _ = cache.get_or_solve(problem, grid, "boundary", 0.01, order)
    u_large, _ = cache.get_or_solve(problem, grid, "boundary", 0.05, order)
    U0 = float(U.values[grid.source_id()])
    report.results["U_at_origin"] = U0
    report.add_check(bound_check("U_origin_vs_m0", abs(U0 - V.m0), tol.u_origin))
    report.add_check(bound_check("u_gamma_monotone", float(np.max(u_small.values - u_large.values)), 2.0 * grid.h))
    report.add_check(bound_check("u_gamma_to_U", u_small.max_abs_difference(U), tol.u_gamma))

    report.add_table("fields", ["x1", "x2", "V", "U"],
                     [[float(x[0]), float(x[1]), float(v), float(u)]
                      for x, v, u in zip(grid.coordinates, V.values, U.values)])
    angles = np.arctan2(grid.projections[:, 1], grid.projections[:, 0])
    order_idx = np.argsort(angles)
    report.add_series("V_on_boundary", angles[order_idx], V.boundary_point_values()[order_idx])
    return report


def _refinement_check(problem: Problem, cfg: ExperimentConfig, exact: Callable, err: float,
                      cache: FieldCache) -> Dict[str, Any]:
    """The inner-disc error on the grid of spacing 2h must not be smaller."""
    try:
        coarse = build_grid(problem.domain, 2.0 * cfg.grid.h, cfg.grid.min_nodes_across)
    except ConfigurationError:
        return skipped_check("refinement_decreases_error", "coarse_grid_too_small")
    Vc, _ = cache.get_or_solve(problem, coarse, "point", 0.0, cfg.grid.stencil_order)
    inner = np.linalg.norm(coarse.coordinates, axis=1) <= 0.9
    err_coarse = float(np.max(np.abs(Vc.values[inner] - exact(coarse.coordinates[inner]))))
    return bound_check("refinement_decreases_error", err, err_coarse)


# ---------------------------------------------------------------------------
# Parabolic (transport limit)
# ---------------------------------------------------------------------------

def run_parabolic_experiment(cfg: ExperimentConfig) -> RunReport:
    """Evolution runs per ε; small ε are compared with the transport solution g(X(t;x))."""
    problem, grid = _setup(cfg)
    probes = check_probe_margin(cfg, grid)
    tg = cfg.time_grid
    t_max = max(cfg.transport_times)
    times = parabolic.merge_times(parabolic.geometric_time_grid(tg.t_min, t_max, tg.n_steps), cfg.transport_times)
    report = RunReport("parabolic", cfg)

    jobs = []
    for eps in cfg.eps:
        payload = {"config": report.config, "eps": eps, "times": times.tolist(), "probes": probes.tolist(),
                   "semilinear": True}
        if eps <= TRANSPORT_EPS_MAX:
            payload.update(transport_radius=cfg.transport_radius, transport_times=cfg.transport_times)
        jobs.append(SweepJob(f"parabolic eps={eps:g}", parabolic_job, payload))
    runs = _run_jobs(jobs, cfg.workers)

    rows = []
    for run in runs:
        eps = run["eps"]
        report.add_check({"name": f"maximum_principle eps={eps:g}", "passed": bool(run["maximum_principle"])})
        if "transport_errors" in run:
            worst = max(run["transport_errors"])
            report.add_check(bound_check(f"transport eps={eps:g}", worst, cfg.tolerances.transport))
        for t, values in zip(run["times"], run["probe_values"]):
            rows.append([eps, t, *values])
        report.add_series(f"u(probe0) eps={eps:g}", run["times"], [v[0] for v in run["probe_values"]])
    report.results["runs"] = [{k: v for k, v in run.items() if k not in ("probe_values", "sup_abs", "times")}
                              for run in runs]
    report.add_table("probes", ["eps", "t"] + [f"u_probe{k}" for k in range(len(probes))], rows)
    return report


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------

def _regime_times(cfg: ExperimentConfig, eps: float) -> Tuple[np.ndarray, List[float], Dict[str, float], Dict[float, float]]:
    tg = cfg.time_grid
    sigmas = {family: parabolic.sigma_cutoff(eps, family) for family in SIGMA_FAMILIES}
    lam_times = {lam: math.exp(lam / eps) for lam in cfg.lambdas}
    horizon = max(lam_times.values()) * tg.horizon_factor
    base = parabolic.geometric_time_grid(tg.t_min, horizon, tg.n_steps)
    times = parabolic.merge_times(base, list(sigmas.values()) + list(lam_times.values()))
    special = [t for t in list(sigmas.values()) + list(lam_times.values()) if times[0] < t <= times[-1]]
    store = sorted(set(special) | set(times[::PLOT_STRIDE].tolist()) | {float(times[-1])})
    return times, store, sigmas, lam_times


def _value_at(run: Dict[str, Any], t: float) -> List[float]:
    times = np.asarray(run["times"])
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, t):
        raise PreconditionError(f"time {t:.6g} was not stored for ε={run['eps']:g}")
    return list(run["probe_values"][k])


def run_regime_experiment(cfg: ExperimentConfig, cache: Optional[FieldCache] = None,
                          semilinear: bool = False) -> RegimeReport:
    """Probe u^ε at σ(ε) and e^{λ/ε} for λ on both sides of m₀."""
    cache = cache or open_cache(cfg)
    problem, grid = _setup(cfg, keep_semilinear=semilinear)
    probes = check_probe_margin(cfg, grid)
    tol = cfg.tolerances
    V, key = cache.get_or_solve(problem, grid, "point", 0.0, cfg.grid.stencil_order)
    m0 = V.m0
    below = [lam for lam in cfg.lambdas if lam < m0]
    above = [lam for lam in cfg.lambdas if lam > m0]
    if not below or not above:
        raise PreconditionError(f"λ list {cfg.lambdas} must straddle m0={m0:.4f}")

    kind = "semilinear_regimes" if semilinear else "regimes"
    report = RegimeReport(kind, cfg, m0, key)
    info = argmin_data(problem, V, tol.boundary_constancy)
    report.results["argmin"] = info
    tol_i = tol.semilinear if semilinear else tol.regime_i
    tol_iii = tol.semilinear if semilinear else tol.regime_iii

    eps_list = sorted(cfg.eps, reverse=True)
    eps_min = eps_list[-1]
    schedules = {eps: _regime_times(cfg, eps) for eps in eps_list}
    jobs = [SweepJob(f"{kind} eps={eps:g}", parabolic_job,
                     {"config": report.config, "eps": eps, "times": schedules[eps][0].tolist(),
                      "store": schedules[eps][1], "probes": probes.tolist(), "semilinear": semilinear})
            for eps in eps_list]
    lam_above = min(above)
    decay_times = schedules[eps_min][0]
    jobs.append(SweepJob(f"decay eps={eps_min:g}", parabolic_job,
                         {"config": report.config, "eps": eps_min, "times": decay_times.tolist(),
                          "store": [math.exp(lam_above / eps_min)], "probes": probes.tolist(),
                          "semilinear": semilinear, "zero_data": True, "initial_one": True}))
    results = _run_jobs(jobs, cfg.workers)
    runs = dict(zip(eps_list, results[:-1]))
    decay = results[-1]

    for eps in eps_list:
        run = runs[eps]
        _, _, sigmas, lam_times = schedules[eps]
        report.add_check({"name": f"maximum_principle eps={eps:g}", "passed": bool(run["maximum_principle"])})
        report.add_series(f"u(probe0) eps={eps:g}", run["times"], [v[0] for v in run["probe_values"]])
        for lam in cfg.lambdas:
            report.entries.append(_regime_entry(run, eps, lam, m0, sigmas, lam_times[lam], info,
                                                tol_i, tol_iii, checked=eps == eps_min))

    for entry in report.entries:
        if entry.get("checked") and not entry.get("skipped"):
            report.add_check({"name": f"regime_{entry['regime']} eps={entry['eps']:g} lambda={entry['lambda']:g}",
                              "value": entry["error"], "bound": entry["tolerance"], "sense": "<=",
                              "passed": entry["passed"]})

    _trend_checks(report, eps_list, below, above, info)
    _regime_ii_check(report, runs[eps_min], eps_min, schedules[eps_min][2], info, tol.regime_ii)
    _resolution_check(report, runs[eps_min], eps_min, max(below), lam_above, info, tol.resolution_gap)

    t_decay = math.exp(lam_above / eps_min)
    sup = decay["sup_abs"][int(np.argmin(np.abs(np.asarray(decay["times"]) - t_decay)))]
    report.results["decay"] = {"eps": eps_min, "lambda": lam_above, "t": t_decay, "sup_abs": sup}
    report.add_check(bound_check(f"survival_decay eps={eps_min:g} lambda={lam_above:g}", sup, tol.decay))

    report.add_table("probes", ["eps", "lambda", "regime", "t", "error"] + [f"u_probe{k}" for k in range(len(probes))],
                     [[e["eps"], e["lambda"], e["regime"], e["t"], e.get("error"), *e["values"].get("t_lambda", [])]
                      for e in report.entries])
    return report


def _regime_entry(run, eps, lam, m0, sigmas, t_lam, info, tol_i, tol_iii, checked) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"eps": eps, "lambda": lam, "t": t_lam, "checked": checked, "values": {}}
    if lam < m0:
        entry.update(regime="i", target=info["g_origin"], tolerance=tol_i)
        entry["values"]["t_lambda"] = _value_at(run, t_lam)
        for family, sigma in sigmas.items():
            if sigma <= t_lam:
                entry["values"][f"sigma_{family}"] = _value_at(run, sigma)
    elif lam > m0:
        entry.update(regime="iii", target=info["g0"], tolerance=tol_iii)
        entry["values"]["t_lambda"] = _value_at(run, t_lam)
        if not info["constant_on_argmin"]:
            entry.update(skipped=True, reason="g_not_constant_on_argmin")
    else:
        entry.update(regime="boundary", target=None, tolerance=None, skipped=True, reason="lambda_equals_m0")
        return entry
    entry["error"] = max(abs(v - entry["target"]) for values in entry["values"].values() for v in values)
    entry["probe0_error"] = abs(entry["values"]["t_lambda"][0] - entry["target"])
    entry["passed"] = entry["error"] <= entry["tolerance"]
    return entry


def _trend_checks(report: RegimeReport, eps_list, below, above, info) -> None:
    if len(eps_list) < 2:
        report.add_check(skipped_check("trend", "single_eps"))
        return
    for regime, lam in (("i", max(below)), ("iii", min(above))):
        errors = [e["probe0_error"] for e in report.entries
                  if e["lambda"] == lam and e["regime"] == regime and "probe0_error" in e]
        if regime == "iii" and not info["constant_on_argmin"]:
            report.add_check(skipped_check("trend_iii", "g_not_constant_on_argmin"))
            continue
        report.results[f"trend_{regime}"] = errors
        report.add_check({"name": f"trend_{regime}", "passed": _nonincreasing(errors), "value": errors})


def _regime_ii_check(report: RegimeReport, run, eps, sigmas, info, tol) -> None:
    if not info["constant_on_argmin"]:
        report.add_check(skipped_check("regime_ii", "g_not_constant_on_argmin"))
        return
    if not info["g0_equals_origin"]:
        report.add_check(skipped_check("regime_ii", "g0_differs_from_origin"))
        return
    sigma = min(sigmas.values())
    values = [v for t, row in zip(run["times"], run["probe_values"]) if t >= sigma for v in row]
    err = max(abs(v - info["g0"]) for v in values)
    report.add_check(bound_check(f"regime_ii eps={eps:g}", err, tol))


def _resolution_check(report: RegimeReport, run, eps, lam_lo, lam_hi, info, fraction) -> None:
    gap_needed = fraction * abs(info["g0"] - info["g_origin"])
    if gap_needed == 0.0:
        report.add_check(skipped_check("trichotomy_resolution", "g0_equals_origin"))
        return
    if not info["constant_on_argmin"]:
        report.add_check(skipped_check("trichotomy_resolution", "g_not_constant_on_argmin"))
        return
    lo = _value_at(run, math.exp(lam_lo / eps))[0]
    hi = _value_at(run, math.exp(lam_hi / eps))[0]
    report.add_check(bound_check(f"trichotomy_resolution eps={eps:g}", abs(hi - lo), gap_needed, ">="))


def run_semilinear_regimes(cfg: ExperimentConfig, cache: Optional[FieldCache] = None) -> RegimeReport:
    """Regime run with the semilinear solver plus the sub-solution transfer check."""
    if cfg.problem.semilinear is None:
        raise PreconditionError("the semilinear regime run needs a semilinear block")
    problem, grid = _setup(cfg)
    validation = validate_assumptions(problem)
    a6 = [i for i in validation.issues if i.assumption == "A6" and i.severity == "error"]
    if a6:
        raise PreconditionError(f"semilinear term violates the growth/monotonicity assumptions: {a6[0].message}")

    report = run_regime_experiment(cfg, cache, semilinear=True)
    report.results["validation"] = validation.to_dict()
    report.add_check(_transfer_check(cfg, problem, grid))
    if cfg.problem.semilinear.preset == "zero":
        linear = run_regime_experiment(cfg, cache, semilinear=False)
        report.add_check(bound_check("linear_reduction", max_entry_difference(report, linear),
                                     cfg.tolerances.reduction))
    return report


def max_entry_difference(a: RegimeReport, b: RegimeReport) -> float:
    """Largest probe-value difference between two regime reports over matching entries."""
    worst = 0.0
    for ea, eb in zip(a.entries, b.entries):
        for key, values in ea["values"].items():
            worst = max(worst, float(np.max(np.abs(np.subtract(values, eb["values"][key])))))
    return worst


def _transfer_check(cfg: ExperimentConfig, problem: Problem, grid: MaskedGrid) -> Dict[str, Any]:
    """For ordered data g_u ≤ g_v, v − u stays below the 𝓛⁺ solution with data g_v − g_u."""
    eps = min(cfg.eps)
    plus = semilinear_from_preset("plus", cfg.problem.semilinear.M_scale)
    g = problem.boundary_data
    bump = lambda x: 0.25 + 0.25 * x[..., 0] ** 2
    shifted = BoundaryData("shifted", lambda x: g(x) + bump(x))
    gap = BoundaryData("difference", bump)

    def solve(data: BoundaryData) -> np.ndarray:
        p = Problem(problem.domain, problem.coefficients, data, plus)
        return parabolic.solve_stationary(p, eps, grid).values

    excess = float(np.max(solve(shifted) - solve(g) - solve(gap)))
    return bound_check(f"subsolution_transfer eps={eps:g}", excess, cfg.tolerances.transfer)


# ---------------------------------------------------------------------------
# Stationary
# ---------------------------------------------------------------------------

def run_stationary_experiment(cfg: ExperimentConfig, cache: Optional[FieldCache] = None) -> RunReport:
    """v^ε at the origin and near the argmin clusters against g₀."""
    cache = cache or open_cache(cfg)
    problem, grid = _setup(cfg)
    probes = check_probe_margin(cfg, grid)
    tol = cfg.tolerances
    report = RunReport("stationary", cfg)
    V, key = cache.get_or_solve(problem, grid, "point", 0.0, cfg.grid.stencil_order)
    info = argmin_data(problem, V, tol.boundary_constancy)
    report.results["m0"] = V.m0
    report.results["m0_provenance"] = key
    report.results["argmin"] = info
    near = np.array([0.9 * np.asarray(cl["center"]) for cl in V.clusters]) if not V.uniform else np.empty((0, 2))
    if len(near):
        check_probe_margin(cfg, grid, near)

    eps_list = sorted(cfg.eps, reverse=True)
    jobs = [SweepJob(f"stationary eps={eps:g}", stationary_job,
                     {"config": report.config, "eps": eps, "probes": probes.tolist(), "near_argmin": near.tolist()})
            for eps in eps_list]
    runs = _run_jobs(jobs, cfg.workers)
    report.results["runs"] = runs

    g_bd = problem.boundary_data(grid.projections)
    for run in runs:
        lo, hi = run["range"]
        report.add_check({"name": f"maximum_principle eps={run['eps']:g}",
                          "passed": bool(lo >= g_bd.min() and hi <= g_bd.max())})
    report.add_table("stationary", ["eps", "v0", "v0_minus_g0"] + [f"v_probe{k}" for k in range(len(probes))],
                     [[r["eps"], r["v0"], r["v0"] - info["g0"], *r["probe_values"]] for r in runs])
    report.add_series("v0", [r["eps"] for r in runs], [r["v0"] for r in runs])

    if not info["constant_on_argmin"]:
        report.add_check(skipped_check("stationary_limit", "g_not_constant_on_argmin"))
        return report
    errors = [abs(r["v0"] - info["g0"]) for r in runs]
    report.add_check(bound_check(f"stationary_limit eps={eps_list[-1]:g}", errors[-1], tol.stationary))
    if len(runs) > 1:
        report.add_check({"name": "stationary_trend", "passed": _nonincreasing(errors), "value": errors})
    if len(near):
        worst = max(abs(v - info["g0"]) for v in runs[-1]["near_values"])
        report.add_check(bound_check(f"near_argmin eps={eps_list[-1]:g}", worst, tol.stationary_near_argmin))
    else:
        report.add_check(skipped_check("near_argmin", "uniform_argmin"))
    return report


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

def run_certificate_suite(cfg: ExperimentConfig, cache: Optional[FieldCache] = None) -> RunReport:
    """Build and verify every certificate; construction failures become entries."""
    cache = cache or open_cache(cfg)
    problem, grid = _setup(cfg)
    cc = cfg.certificates
    order = cfg.grid.stencil_order
    report = RunReport("certify", cfg)
    entries: List[Dict[str, Any]] = []
    built: Dict[str, certificates.Certificate] = {}

    def attempt(kind: str, needs: Sequence[str], build: Callable[[], Any]) -> None:
        missing = [n for n in needs if n not in built]
        if missing:
            entries.append({"kind": kind, "verified": False, "skipped": True, "reason": f"depends_on_failed:{missing[0]}"})
            report.add_check(skipped_check(kind, f"depends_on_failed:{missing[0]}"))
            return
        try:
            result = build()
        except MetastabError as e:
            logger.warning(f"Certificate {kind} could not be built: {e}")
            entries.append({"kind": kind, "verified": False, "error": f"{type(e).__name__}: {e}"})
            report.add_check({"name": kind, "passed": False, "error": f"{type(e).__name__}: {e}"})
            return
        for cert in (result.values() if isinstance(result, dict) else [result]):
            built[cert.kind] = cert
            entries.append(cert.to_dict())
            report.add_check({"name": cert.kind, "passed": cert.verified})

    V, key = cache.get_or_solve(problem, grid, "point", 0.0, order)
    U, _ = cache.get_or_solve(problem, grid, "boundary", 0.0, order)
    report.results["m0"] = V.m0
    report.results["m0_provenance"] = key

    attempt("psi", [], lambda: certificates.build_psi(problem, grid, cc.R, cc.ramp_width))
    attempt("W_r", ["psi"], lambda: certificates.strict_subsolution_stages(
        problem, grid, cc.r, V=V, psi=built["psi"], R=cc.R, ramp_width=cc.ramp_width))
    attempt("exit_W", [], lambda: certificates.build_exit_supersolution(problem, grid, cc.lambda_exit, V=V, U=U,
                                                                        stencil_order=order))
    attempt("exp_barrier", ["W_r"], lambda: certificates.build_exponential_barrier(
        problem, built["W_r"], cc.mu, cc.eps_barrier))
    if "exp_barrier" not in built:
        report.add_check(skipped_check("barrier_domination", "depends_on_failed:exp_barrier"))
    elif not built["exp_barrier"].verified:
        report.add_check(skipped_check("barrier_domination", "barrier_not_verified"))
    else:
        report.add_check(_domination_check(cfg, problem, built["exp_barrier"]))
    ap = cc.appendix
    M_eps = problem.semilinear.M(ap.eps) if problem.semilinear is not None else 0.0
    attempt("appendix_barrier", [], lambda: certificates.build_appendix_barriers(
        problem, grid, ap.eps, M_eps, ap.n_lambda, ap.max_boundary_points, tuple(ap.gammas)))

    try:
        domain = parse_domain(cc.offset_domain)
        gap = normal_offset_gap(domain, cc.offset_lambda)
        ratio = gap / cc.offset_lambda
        report.results["offset_gap"] = {"domain": cc.offset_domain, "lambda": cc.offset_lambda, "delta": gap, "ratio": ratio}
        report.add_check(bound_check("offset_gap_ratio", ratio, cfg.tolerances.offset_ratio, ">="))
    except MetastabError as e:
        report.add_check({"name": "offset_gap_ratio", "passed": False, "error": f"{type(e).__name__}: {e}"})

    report.results["certificates"] = entries
    report.add_table("certificates", ["kind", "verified", "eta"],
                     [[e["kind"], e["verified"], e.get("eta")] for e in entries])
    return report


def _domination_check(cfg: ExperimentConfig, problem: Problem, barrier: certificates.Certificate) -> Dict[str, Any]:
    """Solve with data below v^ε (constant on ∂Ω, min(v^ε, ·) inside) and compare every slice with w^ε."""
    grid = barrier.grid
    v = barrier.values
    eps = barrier.params["eps"]
    cap = float(v.values[grid.boundary_ids].min())
    below = Problem(problem.domain, problem.coefficients, boundary_data_from_preset("constant", cap))
    t_max = max(math.exp(barrier.params["mu"] / eps), 2.0 * cfg.time_grid.t_min)
    times = parabolic.geometric_time_grid(cfg.time_grid.t_min, t_max, cfg.time_grid.n_steps)
    solution = parabolic.solve_parabolic(below, eps, grid, times, initial=lambda x: np.minimum(v.evaluate(x), cap))
    delta = 1e-12 * max(1.0, float(np.abs(v.values).max()))
    result = certificates.barrier_domination(barrier, solution, delta)
    return {"name": "barrier_domination", "value": result.max, "bound": 0.0, "sense": "<=", "passed": result.passed,
            "worst_point": result.worst_point}


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def _simulate(cfg: ExperimentConfig, config: Dict[str, Any], eps: float, dt: float) -> List[montecarlo.ExitSample]:
    mc = cfg.montecarlo
    jobs = []
    for start in range(0, mc.n_traj, mc.batch_size):
        n = min(mc.batch_size, mc.n_traj - start)
        jobs.append(SweepJob(f"exits eps={eps:g} streams {start}-{start + n - 1}", montecarlo_job,
                             {"config": config, "eps": eps, "dt": dt, "first_stream": start, "n": n}))
    return [s for batch in _run_jobs(jobs, cfg.workers) for s in batch]


def run_montecarlo_experiment(cfg: ExperimentConfig, cache: Optional[FieldCache] = None) -> RunReport:
    """Exit times and locations per ε, the exponential-rate fit and location concentration."""
    cache = cache or open_cache(cfg)
    problem, grid = _setup(cfg, keep_semilinear=False)
    mc = cfg.montecarlo
    tol = cfg.tolerances
    report = RunReport("montecarlo", cfg)
    V, key = cache.get_or_solve(problem, grid, "point", 0.0, cfg.grid.stencil_order)
    report.results["m0"] = V.m0
    report.results["m0_provenance"] = key

    eps_list = sorted(cfg.eps, reverse=True)
    samples = {eps: _simulate(cfg, report.config, eps, mc.dt) for eps in eps_list}
    stats: Dict[float, montecarlo.ExitStatistics] = {}
    sample_rows = []
    for eps in eps_list:
        for s in samples[eps]:
            x1, x2 = (float("nan"), float("nan")) if s.exit_point is None else s.exit_point
            sample_rows.append([eps, s.stream_id, s.exit_time, float(x1), float(x2), int(s.censored)])
        try:
            stats[eps] = montecarlo.exit_statistics(samples[eps], V.argmin, mc.delta)
        except StatisticsError as e:
            report.add_check({"name": f"exit_statistics eps={eps:g}", "passed": False, "error": str(e)})
            continue
        st = stats[eps]
        window = montecarlo.exit_window_mass(samples[eps], V.m0, mc.window_delta)
        report.results.setdefault("statistics", []).append({**st.to_dict(), "window_mass": window})
        t_grid = np.geomspace(max(st.exit_times.min(), 1e-3), st.exit_times.max(), 50)
        report.add_series(f"P(tau<t) eps={eps:g}", t_grid, montecarlo.exit_probability_curve(samples[eps], t_grid))
        if V.uniform:
            report.add_check(bound_check(f"exit_uniformity eps={eps:g}", st.uniformity_pvalue(),
                                         tol.uniformity_pvalue, ">="))
    report.add_table("samples", ["eps", "stream_id", "tau", "exit_x1", "exit_x2", "censored"], sample_rows)

    eps_min = eps_list[-1]
    if eps_min in stats and not V.uniform:
        report.add_check(bound_check(f"concentration_mass eps={eps_min:g} delta={mc.delta:g}",
                                     stats[eps_min].concentration_mass(mc.delta), tol.concentration, ">="))
    elif V.uniform:
        report.add_check(skipped_check("concentration_mass", "uniform_argmin"))

    if len(set(eps_list)) >= 3:
        try:
            fit = montecarlo.fit_exit_rate(samples)
            report.results["exit_rate"] = fit.to_dict()
            report.add_check(bound_check("m0_slope_relative_error", abs(fit.slope - V.m0) / V.m0, tol.slope_relative))
            report.add_check({"name": "mean_exit_time_monotone", "passed": fit.monotone})
        except StatisticsError as e:
            report.add_check({"name": "m0_slope_relative_error", "passed": False, "error": str(e)})
    else:
        report.add_check(skipped_check("m0_slope_relative_error", "fewer_than_3_eps"))

    if mc.check_dt_halving and eps_list[0] in stats:
        eps = eps_list[0]
        halved = montecarlo.exit_statistics(_simulate(cfg, report.config, eps, mc.dt / 2.0))
        shift = abs(halved.eps_log_mean - stats[eps].eps_log_mean)
        report.results["dt_halving"] = {"eps": eps, "eps_log_mean": stats[eps].eps_log_mean,
                                        "eps_log_mean_halved": halved.eps_log_mean}
        report.add_check(bound_check(f"dt_halving eps={eps:g}", shift, tol.dt_halving))
    return report


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, cache: Optional[FieldCache] = None) -> RunReport:
    kind = cfg.experiment
    logger.info(f"Running {kind} experiment (config {config_hash(cfg)[:12]})")
    if kind == "quasipotential":
        return run_quasipotential_experiment(cfg, cache)
    if kind == "parabolic":
        return run_parabolic_experiment(cfg)
    if kind == "stationary":
        return run_stationary_experiment(cfg, cache)
    if kind == "montecarlo":
        return run_montecarlo_experiment(cfg, cache)
    if kind == "certify":
        return run_certificate_suite(cfg, cache)
    if kind == "regimes":
        if cfg.problem.semilinear is not None:
            return run_semilinear_regimes(cfg, cache)
        return run_regime_experiment(cfg, cache)
    raise ConfigurationError(f"unknown experiment kind '{kind}'")
