import logging

import numpy as np
import pytest

from services.errors import PreconditionError, StatisticsError
from services.geometry import build_grid
from services.montecarlo import (
    ExitSample,
    angular_distance,
    estimate_m0,
    exit_probability_curve,
    exit_statistics,
    exit_window_mass,
    export_samples_csv,
    fit_exit_rate,
    polar_angle,
    simulate_exit,
    simulate_exits,
    simulate_parabolic_value,
    stopped_data_mean,
)
from services.parabolic import geometric_time_grid, solve_parabolic


def _sample(tau, point=(1.0, 0.0), eps=0.1, stream=0, censored=False):
    return ExitSample(tau, None if censored else np.array(point), 0, stream, 0, eps, censored)


def test_zero_noise_never_exits(iso_problem):
    samples = simulate_exits(iso_problem, 0.0, (0.5, 0.0), 1e-2, 3, max_steps=100)
    assert all(s.censored for s in samples)
    assert all(s.exit_time == pytest.approx(1.0) for s in samples)
    assert all(s.exit_point is None for s in samples)


def test_streams_are_reproducible(iso_problem):
    batch = simulate_exits(iso_problem, 0.3, (0.0, 0.0), 1e-2, 6, seed=7, max_steps=200000)
    single = simulate_exit(iso_problem, 0.3, (0.0, 0.0), 1e-2, stream=4, seed=7, max_steps=200000)
    assert single.stream_id == 4
    assert single.exit_time == batch[4].exit_time
    assert np.array_equal(single.exit_point, batch[4].exit_point)
    again = simulate_exits(iso_problem, 0.3, (0.0, 0.0), 1e-2, 6, seed=7, max_steps=200000)
    assert [s.exit_time for s in again] == [s.exit_time for s in batch]


def test_exit_points_lie_on_the_boundary(iso_problem):
    samples = simulate_exits(iso_problem, 0.3, (0.0, 0.0), 1e-2, 20, seed=1, max_steps=200000)
    points = np.array([s.exit_point for s in samples if not s.censored])
    assert np.linalg.norm(points, axis=1) == pytest.approx(np.ones(len(points)), abs=1e-9)
    assert all(s.exit_time > 0 for s in samples)


@pytest.mark.parametrize("eps, x0, dt", [(-0.1, (0.0, 0.0), 1e-3), (0.1, (2.0, 0.0), 1e-3), (0.1, (0.0, 0.0), 0.1)])
def test_simulation_preconditions(iso_problem, eps, x0, dt):
    with pytest.raises(PreconditionError):
        simulate_exits(iso_problem, eps, x0, dt, 1)


def test_single_sample_statistics():
    stats = exit_statistics([_sample(5.0)])
    assert stats.n == 1
    assert stats.mean_tau == 5.0
    assert stats.median_tau == 5.0
    assert stats.underpowered
    assert stats.histogram.sum() == 1


def test_statistics_need_uncensored_samples():
    with pytest.raises(StatisticsError):
        exit_statistics([_sample(1.0, censored=True), _sample(1.0, censored=True)])
    with pytest.raises(StatisticsError):
        exit_statistics([])
    with pytest.raises(StatisticsError):
        exit_statistics([_sample(1.0, eps=0.1), _sample(1.0, eps=0.2)])


def test_concentration_and_censoring():
    samples = [_sample(1.0, (1.0, 0.0)), _sample(2.0, (-1.0, 0.0)), _sample(3.0, (0.0, 1.0)),
               _sample(4.0, censored=True)]
    stats = exit_statistics(samples, argmin=np.array([[1.0, 0.0], [-1.0, 0.0]]), delta=0.1)
    assert stats.concentration_mass(0.1) == pytest.approx(2.0 / 3.0)
    assert stats.censored_fraction == pytest.approx(0.25)
    assert stats.to_dict()["concentration_mass"] == pytest.approx(2.0 / 3.0)


def test_window_mass_and_probability_curve():
    eps = 0.1
    samples = [_sample(np.exp(0.5 / eps)), _sample(np.exp(0.9 / eps), (0.0, 1.0)), _sample(1.0, censored=True)]
    assert exit_window_mass(samples, 0.5, 0.1) == pytest.approx(1.0 / 3.0)
    curve = exit_probability_curve(samples, [1.0, 1e3, 1e5])
    assert curve.tolist() == pytest.approx([0.0, 1.0 / 3.0, 2.0 / 3.0])
    upper = exit_probability_curve(samples, [1e5], region=(np.pi / 4, 3 * np.pi / 4))
    assert upper.tolist() == pytest.approx([1.0 / 3.0])


def test_exit_rate_fit_recovers_the_exponent():
    samples = {eps: [_sample(np.exp(0.5 / eps), eps=eps)] for eps in (0.2, 0.15, 0.1, 0.07)}
    fit = fit_exit_rate(samples)
    assert fit.slope == pytest.approx(0.5, abs=1e-10)
    assert fit.intercept == pytest.approx(0.0, abs=1e-9)
    assert fit.monotone


def test_exit_rate_fit_needs_three_noise_levels():
    samples = {eps: [_sample(1.0, eps=eps)] for eps in (0.2, 0.1)}
    with pytest.raises(PreconditionError):
        fit_exit_rate(samples)


def test_exit_rate_fit_refuses_censored_batches():
    samples = {eps: [_sample(2.0, eps=eps), _sample(2.0, eps=eps, censored=True)] for eps in (0.2, 0.15, 0.1)}
    with pytest.raises(StatisticsError, match="censored"):
        fit_exit_rate(samples)


def test_angles():
    assert polar_angle(np.array([[0.0, -1.0]]))[0] == pytest.approx(1.5 * np.pi)
    assert angular_distance(0.1, 2.0 * np.pi - 0.1) == pytest.approx(0.2)


def test_samples_csv(tmp_path):
    path = tmp_path / "samples.csv"
    export_samples_csv([_sample(1.5, stream=3), _sample(2.0, censored=True)], path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "stream_id,tau,exit_x1,exit_x2,censored"
    assert lines[1].startswith("3,1.5,1.0,0.0,0")
    assert lines[2].endswith(",1")


def test_estimate_m0_needs_three_noise_levels(iso_problem):
    with pytest.raises(PreconditionError):
        estimate_m0(iso_problem, [0.2, 0.1], 10, 1e-2)


@pytest.mark.slow
def test_estimate_m0_on_the_isotropic_ball(iso_problem):
    fit = estimate_m0(iso_problem, [0.15, 0.11, 0.09], 1000, 1e-3, seed=0)
    assert 0.375 <= fit.slope <= 0.625
    assert fit.monotone


def test_streams_do_not_depend_on_batching(iso_problem):
    whole = simulate_exits(iso_problem, 0.3, (0.0, 0.0), 1e-2, 12, seed=3, max_steps=200000)
    split = (simulate_exits(iso_problem, 0.3, (0.0, 0.0), 1e-2, 5, seed=3, first_stream=0, max_steps=200000)
             + simulate_exits(iso_problem, 0.3, (0.0, 0.0), 1e-2, 7, seed=3, first_stream=5, max_steps=200000))
    assert [s.stream_id for s in split] == list(range(12))
    assert [s.exit_time for s in split] == [s.exit_time for s in whole]
    assert all(np.array_equal(a.exit_point, b.exit_point) for a, b in zip(split, whole))


def test_censored_samples_keep_their_position(iso_problem):
    samples = simulate_exits(iso_problem, 0.0, (0.5, 0.0), 1e-2, 2, max_steps=100)
    for s in samples:
        assert s.final_point == pytest.approx([0.5 * 0.99 ** 100, 0.0], abs=1e-12)


def test_underpowered_batch_is_summarised_with_a_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="services.montecarlo"):
        stats = exit_statistics([_sample(1.0), _sample(2.0)])
    assert stats.underpowered
    assert stats.to_dict()["underpowered"] is True
    assert "uncensored samples" in caplog.text


def test_stopped_data_mean_uses_exit_and_final_points():
    exited = _sample(1.0, (1.0, 0.0))
    alive = ExitSample(5.0, None, 500, 1, 0, 0.1, censored=True, final_point=np.array([0.5, 0.0]))
    data = lambda x: np.atleast_2d(x)[:, 0] ** 2
    mean, stderr = stopped_data_mean([exited, alive], data)
    assert mean == pytest.approx(0.625)
    assert stderr == pytest.approx(np.std([1.0, 0.25], ddof=1) / np.sqrt(2.0))
    assert stopped_data_mean([exited, alive], data, initial=lambda x: np.zeros(len(x)))[0] == pytest.approx(0.5)


def test_stopped_data_mean_needs_final_points():
    with pytest.raises(StatisticsError):
        stopped_data_mean([_sample(1.0, censored=True)], lambda x: np.zeros(len(x)))


def test_short_horizon_value_is_the_initial_data(aniso_problem):
    # without noise the trajectory stays inside and follows the flow
    mean, _ = simulate_parabolic_value(aniso_problem, 0.0, (0.5, 0.0), 0.5, 1e-2, 4)
    assert mean == pytest.approx((0.5 * 0.99 ** 50) ** 2, rel=1e-12)


@pytest.mark.slow
def test_dt_halving_shifts_the_exit_exponent_little(iso_problem):
    coarse = exit_statistics(simulate_exits(iso_problem, 0.15, (0.0, 0.0), 1e-3, 1000, seed=0))
    fine = exit_statistics(simulate_exits(iso_problem, 0.15, (0.0, 0.0), 5e-4, 1000, seed=0))
    assert abs(coarse.eps_log_mean - fine.eps_log_mean) <= 0.05


@pytest.mark.slow
def test_exit_exponent_forgets_the_start_point(iso_problem):
    centre = exit_statistics(simulate_exits(iso_problem, 0.11, (0.0, 0.0), 1e-3, 1000, seed=0))
    offset = exit_statistics(simulate_exits(iso_problem, 0.11, (0.3, 0.0), 1e-3, 1000, seed=0))
    assert abs(centre.eps_log_mean - offset.eps_log_mean) <= 0.05


@pytest.mark.slow
def test_mean_exit_time_grows_as_noise_shrinks(aniso_problem):
    means = [exit_statistics(simulate_exits(aniso_problem, eps, (0.0, 0.0), 1e-3, 1000, seed=1)).mean_tau
             for eps in (0.2, 0.15, 0.11)]
    assert means[0] < means[1] < means[2]


@pytest.mark.slow
def test_short_regime_value_agrees_with_the_stopped_process(aniso_problem, ball):
    # below m0 at ε = 0.05 a few percent of paths still exit before e^{0.3/ε}; the value sits near 0.13
    eps, t = 0.05, float(np.exp(0.3 / 0.05))
    times = geometric_time_grid(0.01, t, 200)
    pde = [solve_parabolic(aniso_problem, eps, build_grid(ball, h), times, store=[t]).probe_series([[0.0, 0.0]])[-1, 0]
           for h in (1.0 / 64.0, 1.0 / 128.0)]
    mean, stderr = simulate_parabolic_value(aniso_problem, eps, (0.0, 0.0), t, 5e-3, 2000, seed=3)
    # upwind diffusion shrinks under refinement and the grid value approaches the stopped mean from above
    assert pde[0] > pde[1]
    assert abs(pde[1] - mean) <= 0.08 + 3.0 * stderr
