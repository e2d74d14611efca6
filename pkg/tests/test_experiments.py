import pytest

from conftest import config_dict
from services.cache import NullCache
from services.config import build_config_grid, build_problem, parse_config, resolved_config
from services.errors import ConfigurationError, PreconditionError
from services.experiments import (
    RunReport,
    _simulate,
    _transfer_check,
    argmin_data,
    bound_check,
    run_certificate_suite,
    run_experiment,
    run_quasipotential_experiment,
    run_regime_experiment,
    run_semilinear_regimes,
    run_stationary_experiment,
    skipped_check,
)
from services.quasipotential import solve_from_point


def _names(report):
    return [c["name"] for c in report.checks]


def _check(report, prefix):
    return next(c for c in report.checks if c["name"].startswith(prefix))


# ---------------------------------------------------------------------------
# Report bookkeeping
# ---------------------------------------------------------------------------

def test_skipped_checks_do_not_fail_a_report():
    report = RunReport("stationary", parse_config(config_dict(experiment="stationary")))
    report.add_check(bound_check("small", 0.01, 0.1))
    report.add_check(skipped_check("near_argmin", "uniform_argmin"))
    assert report.passed
    report.add_check(bound_check("large", 1.0, 0.1))
    assert not report.passed
    assert report.failures() == ["large"]
    data = report.to_dict()
    assert set(data) == {"kind", "library_version", "config_hash", "passed", "checks", "results", "config", "log"}
    assert data["passed"] is False


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def test_quasipotential_run_records_every_check():
    cfg = parse_config(config_dict())
    report = run_quasipotential_experiment(cfg, NullCache())
    names = _names(report)
    for expected in ("subsolution_residual", "analytic_max_error", "m0_error", "refinement_decreases_error",
                     "path_oracle_difference", "U_origin_vs_m0", "u_gamma_monotone", "u_gamma_to_U"):
        assert expected in names
    assert {"oracle", "fields"} <= set(report.tables)
    assert _check(report, "U_origin_vs_m0")["value"] <= 0.05


@pytest.mark.parametrize("preset", ["isotropic_quadratic", "anisotropic_quadratic"])
def test_path_oracle_agrees_with_the_grid_potential(preset):
    cfg = parse_config(config_dict(problem={"coefficients": {"preset": preset}}))
    report = run_quasipotential_experiment(cfg, NullCache())
    oracle = _check(report, "path_oracle_difference")
    assert oracle["passed"]
    _, rows = report.tables["oracle"]
    assert len(rows) == 10


def test_regime_run_entries_and_skips():
    cfg = parse_config(config_dict(experiment="regimes", eps=[0.2, 0.15]))
    report = run_regime_experiment(cfg, NullCache())
    assert len(report.entries) == 4
    assert report.m0 == pytest.approx(0.5, abs=0.06)
    names = _names(report)
    assert "regime_i eps=0.15 lambda=0.3" in names
    assert any(n.startswith("survival_decay eps=0.15") for n in names)
    # x1² is not constant on the unit circle
    iii = [e for e in report.entries if e["regime"] == "iii"]
    assert all(e["reason"] == "g_not_constant_on_argmin" for e in iii)
    assert _check(report, "trend_iii")["reason"] == "g_not_constant_on_argmin"
    checked = [e for e in report.entries if e.get("checked") and not e.get("skipped")]
    assert report.recheck() == [e["passed"] for e in report.entries if not e.get("skipped")]
    assert len(checked) == 1
    assert report.to_dict()["results"]["m0_provenance"] == report.m0_provenance


def test_lambdas_must_straddle_m0():
    cfg = parse_config(config_dict(experiment="regimes", lambdas=[0.6, 0.7]))
    with pytest.raises(PreconditionError, match="straddle"):
        run_regime_experiment(cfg, NullCache())


def test_semilinear_regimes_need_a_semilinear_block():
    cfg = parse_config(config_dict(experiment="regimes"))
    with pytest.raises(PreconditionError):
        run_semilinear_regimes(cfg, NullCache())


def test_semilinear_regimes_reject_strong_reaction():
    cfg = parse_config(config_dict(experiment="regimes",
                                   problem={"semilinear": {"preset": "constant_M", "M_scale": 0.5}}))
    with pytest.raises(PreconditionError, match="assumptions"):
        run_experiment(cfg, NullCache())


def test_stationary_run_with_constant_data():
    cfg = parse_config(config_dict(experiment="stationary",
                                   problem={"boundary_data": {"preset": "constant", "value": 0.5}}))
    report = run_stationary_experiment(cfg, NullCache())
    limit = _check(report, "stationary_limit")
    assert limit["passed"]
    assert limit["value"] <= 1e-9
    assert _check(report, "near_argmin")["reason"] == "uniform_argmin"
    assert all(c["passed"] for c in report.checks if c["name"].startswith("maximum_principle"))
    assert "stationary" in report.tables


def test_certificate_failures_skip_their_dependents():
    cfg = parse_config(config_dict(experiment="certify", problem={"coefficients": {"preset": "outward"}}))
    report = run_certificate_suite(cfg, NullCache())
    psi = _check(report, "psi")
    assert psi["passed"] is False
    assert psi["error"].startswith("StabilityError")
    assert _check(report, "W_r")["reason"] == "depends_on_failed:psi"
    assert _check(report, "exp_barrier")["reason"] == "depends_on_failed:W_r"
    assert _check(report, "barrier_domination")["reason"] == "depends_on_failed:exp_barrier"
    assert not report.passed
    kinds = [e["kind"] for e in report.results["certificates"]]
    assert kinds[:2] == ["psi", "W_r"]
    gap = report.results["offset_gap"]
    assert gap["domain"] == "ellipse:1,0.6"
    assert gap["ratio"] == pytest.approx(gap["delta"] / gap["lambda"])


def test_dispatch_rejects_unknown_kinds():
    cfg = parse_config(config_dict())
    cfg = cfg.model_copy(update={"experiment": "optimise"})
    with pytest.raises(ConfigurationError):
        run_experiment(cfg, NullCache())


def test_subsolution_transfer_for_ordered_data():
    cfg = parse_config(config_dict(experiment="regimes", eps=[0.1],
                                   problem={"semilinear": {"preset": "tanh", "M_scale": 0.5}}))
    problem = build_problem(cfg.problem)
    check = _transfer_check(cfg, problem, build_config_grid(cfg, problem))
    assert check["name"] == "subsolution_transfer eps=0.1"
    assert check["passed"]
    assert check["value"] <= cfg.tolerances.transfer


# ---------------------------------------------------------------------------
# Argmin clusters
# ---------------------------------------------------------------------------

def _aniso(**overrides):
    return config_dict(problem={"coefficients": {"preset": "anisotropic_quadratic"}}, **overrides)


def test_argmin_constancy_is_judged_per_cluster(aniso_problem, coarse_grid):
    V = solve_from_point(aniso_problem, coarse_grid)
    info = argmin_data(aniso_problem, V, 0.02)
    assert len(info["clusters"]) == 2
    assert info["constant_on_argmin"]
    assert info["g0"] == pytest.approx(1.0, abs=0.02)
    assert not info["g0_equals_origin"]
    # each arc is wider than the constancy tolerance on its own
    assert max(info["arc_spreads"]) > 0.02


def test_uniform_argmin_is_judged_on_all_points(iso_problem, coarse_grid):
    V = solve_from_point(iso_problem, coarse_grid)
    info = argmin_data(iso_problem, V, 0.02)
    assert V.uniform
    assert not info["constant_on_argmin"]
    assert info["arc_spreads"] == []


def test_anisotropic_stationary_limit_is_checked():
    cfg = parse_config(_aniso(experiment="stationary", grid={"h": 1.0 / 32.0}, eps=[0.1, 0.07, 0.05]))
    report = run_stationary_experiment(cfg, NullCache())
    limit = _check(report, "stationary_limit")
    assert "reason" not in limit
    assert limit["name"] == "stationary_limit eps=0.05"
    assert limit["passed"]
    assert report.results["argmin"]["g0"] == pytest.approx(1.0, abs=0.02)


@pytest.mark.slow
def test_anisotropic_regimes_check_the_exit_regime():
    cfg = parse_config(_aniso(experiment="regimes", grid={"h": 1.0 / 64.0}, eps=[0.1, 0.07, 0.05],
                              time_grid={"t_min": 0.01, "n_steps": 400}))
    report = run_regime_experiment(cfg, NullCache())
    entry = next(e for e in report.entries if e["regime"] == "iii" and e["checked"])
    assert not entry.get("skipped")
    assert entry["passed"]
    assert abs(entry["values"]["t_lambda"][0] - 1.0) <= 0.1
    assert "value" in _check(report, "trend_iii")
    assert _check(report, "regime_ii")["reason"] == "g0_differs_from_origin"
    assert "trichotomy_resolution eps=0.05" in _names(report)


def test_exit_samples_do_not_depend_on_the_worker_split():
    base = parse_config(config_dict(experiment="montecarlo", montecarlo={"n_traj": 10, "dt": 1e-3, "seed": 11}))
    split = base.model_copy(update={"workers": 2, "montecarlo": base.montecarlo.model_copy(update={"batch_size": 4})})
    serial = _simulate(base, resolved_config(base), 0.3, 1e-3)
    pooled = _simulate(split, resolved_config(split), 0.3, 1e-3)
    assert [s.stream_id for s in pooled] == list(range(10))
    for a, b in zip(serial, pooled):
        assert a.exit_time == b.exit_time
        assert a.censored == b.censored
        assert a.exit_point == pytest.approx(b.exit_point)
