import math

import numpy as np
import pytest

from avdrates.diagnostics import DiagnosticSeries, LyapunovParams, rate_bound_constant
from avdrates.dynamics import CrossingEvent, Forcing, integrate
from avdrates.ifb import run_ifb
from avdrates.problems import get_problem
from avdrates.rates import (
    RateReport,
    discrete_pass_decrement,
    envelope,
    find_looping_initial_condition,
    fit_power_law,
    gronwall_check,
    loop_decrement,
    perturbed_gronwall,
    strong_min_rates,
    verify_perturbed_rate,
    verify_speed_rate,
    verify_value_rate,
)

PLATEAU_GRID = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0]


def test_fit_recovers_power_law():
    t = np.geomspace(1.0, 1e3, 200)
    slope, halfwidth = fit_power_law(DiagnosticSeries("clean", t, 3.0 * t**-2.0), envelope_fit=False)
    assert slope == pytest.approx(-2.0, abs=1e-9)
    assert halfwidth < 1e-6


def test_envelope_fit_of_oscillating_series():
    t = np.geomspace(10.0, 1e3, 20000)
    values = t**-3.0 * np.cos(t) ** 2
    env = envelope(t, values)
    assert env is not None
    slope, _ = fit_power_law(DiagnosticSeries("osc", t, values))
    assert slope == pytest.approx(-3.0, abs=0.05)


def test_fit_rejects_bad_series():
    t = np.geomspace(1.0, 10.0, 50)
    with pytest.raises(ValueError, match="positive"):
        fit_power_law(DiagnosticSeries("zero", t, np.zeros(50)))
    with pytest.raises(ValueError, match="at least"):
        fit_power_law(DiagnosticSeries("short", t[:5], t[:5] ** -1.0), envelope_fit=False)


def test_report_json_round_trip():
    report = RateReport(
        quantity="value",
        alpha=3.0,
        fitted_exponent=-math.inf,
        halfwidth=0.0,
        theoretical_exponent=2.0,
        bound_constant=4.5,
        window=(10.0, 1000.0),
        little_o=False,
        note="minimum attained",
        details={"sup_scaled_gap": 1.25},
    )
    payload = report.to_dict()
    assert payload["fitted_exponent"] == "-inf"
    assert RateReport.from_dict(payload) == report


def test_bessel_envelope_exponent(bessel_trajectory):
    gaps = bessel_trajectory.phi_values()
    slope, _ = fit_power_law(DiagnosticSeries("value_gap", bessel_trajectory.times, gaps), window=(10.0, 1e3))
    assert slope == pytest.approx(-3.0, abs=0.2)
    assert slope < -2.0


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
def test_flat_bottom_value_bound(alpha):
    spec = get_problem("flat-bottom")
    traj = integrate(spec, alpha, [3.0], [0.0], t_end=1e3, tol=1e-9)
    report = verify_value_rate(traj)
    c = rate_bound_constant(spec, [3.0], [0.0], 1.0, alpha)
    assert report.bound_constant == pytest.approx(c)
    assert report.details["sup_scaled_gap"] <= 1.01 * c
    assert report.bound_satisfied


@pytest.mark.slow
def test_quadratic_exponents_follow_the_regime_table(quadratic_runs):
    fitted = {}
    for alpha in PLATEAU_GRID:
        report = verify_value_rate(quadratic_runs(alpha))
        assert report.bound_satisfied
        assert report.theoretical_exponent == pytest.approx(min(2 * alpha / 3, 2.0))
        assert report.fitted_exponent <= -report.theoretical_exponent + 0.15
        assert report.fitted_exponent == pytest.approx(-alpha, abs=0.25)
        fitted[alpha] = report.fitted_exponent
    up_to_three = [fitted[a] for a in PLATEAU_GRID if a <= 3]
    assert all(b <= a + 0.15 for a, b in zip(up_to_three, up_to_three[1:]))


def test_little_o_past_the_plateau(quadratic_runs):
    report = verify_value_rate(quadratic_runs(4.0))
    assert report.little_o is True
    assert report.bound_satisfied


def test_speed_rates(quadratic_runs):
    report = verify_speed_rate(quadratic_runs(3.0))
    assert report.theoretical_exponent == 1.0
    assert report.bound_satisfied
    low = verify_speed_rate(quadratic_runs(0.5))
    assert "no pointwise speed rate" in low.note


def test_loop_decrement_on_synthetic_events():
    events = [
        CrossingEvent(2.0, 1.0, "b", "enter", 20.0),
        CrossingEvent(2.1, 0.0, "a", "leave", 18.0),
        CrossingEvent(5.0, 0.0, "a", "enter", 12.0),
        CrossingEvent(5.2, 1.0, "b", "leave", 10.0),
    ]
    report = loop_decrement(events, 3.0, 0.0, 1.0)
    assert report.decrements == [10.0]
    assert report.required == pytest.approx(3.6)
    assert report.satisfied
    assert loop_decrement(events[:2], 3.0, 0.0, 1.0).note == "no loops detected"


@pytest.mark.slow
def test_engineered_loops_lose_speed():
    x0, v0, traj, report = find_looping_initial_condition(0.0, 1.0, 3.0, min_loops=2, t_end=200.0)
    assert len(report.decrements) >= 2
    assert report.satisfied
    assert min(report.decrements) >= 3.6
    assert traj.alpha == 3.0


@pytest.mark.slow
def test_discrete_passes_lose_speed():
    log = run_ifb(get_problem("flat-bottom"), 3.0, 1e-5, [21.0], 20000)
    report = discrete_pass_decrement(log, 0.0, 1.0)
    assert report.details["passes"] >= 2
    assert report.details["identity_gap"] <= 1e-9
    assert report.satisfied


def test_strong_minimum_rates():
    spec = get_problem("strong-quad")
    traj = integrate(spec, 3.0, spec.start(), t_end=200.0, tol=1e-10, num_samples=4000)
    value, distance, speed = strong_min_rates(traj)
    assert value.bound_satisfied
    assert distance.details["growth_inequality"]
    assert distance.bound_satisfied
    assert speed.theoretical_exponent == 1.0
    with pytest.raises(ValueError, match="strong-minimum"):
        strong_min_rates(integrate(get_problem("quartic"), 3.0, [1.0], t_end=10.0))


@pytest.mark.slow
def test_perturbed_continuous_rate(forced_trajectory):
    report = verify_perturbed_rate(forced_trajectory, 1.0)
    assert report.bound_satisfied
    tail = forced_trajectory.times >= 10.0
    scaled = forced_trajectory.times[tail] ** 2 * forced_trajectory.phi_values()[tail]
    assert np.max(scaled) <= 2.0 * 4.5


@pytest.mark.slow
def test_perturbed_discrete_rate(lasso):
    log = run_ifb(lasso, 2.0, 0.5, lasso.start(), 100000, perturbations=Forcing.power_decay(0.1, 2.7))
    report = verify_perturbed_rate(log, 1.2)
    assert report.quantity == "perturbed_discrete_value"
    assert report.bound_satisfied


def test_non_integrable_forcing_is_rejected(quadratic):
    traj = integrate(quadratic, 3.0, [1.0], t_end=10.0, forcing=Forcing.power_decay(0.1, 1.5))
    with pytest.raises(ValueError, match="not integrable"):
        verify_perturbed_rate(traj, 1.0)


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [1.5, 2.0, 2.5])
def test_discrete_value_rate(lasso, alpha):
    log = run_ifb(lasso, alpha, 0.5, lasso.start(), 100000)
    report = verify_value_rate(log, 2 * alpha / 3 - 0.1)
    assert report.bound_satisfied
    assert report.details["sup_scaled_gap"] <= report.bound_constant


def test_gronwall_equality_case():
    t = np.linspace(1.0, 10.0, 200)
    c = 2.0
    w = c + (t - 1.0)
    report = gronwall_check(t, w, np.ones_like(t), c)
    assert report.hypothesis_holds
    assert report.violations == []
    assert report.satisfied


def test_gronwall_without_hypothesis_is_vacuous():
    t = np.linspace(1.0, 10.0, 200)
    report = gronwall_check(t, 10.0 * t, np.zeros_like(t), 1.0)
    assert not report.hypothesis_holds
    assert report.violations
    assert report.satisfied
    with pytest.raises(ValueError, match="m >= 0"):
        gronwall_check(t, t, -np.ones_like(t), 1.0)


def test_perturbed_gronwall(forced_trajectory):
    report = perturbed_gronwall(forced_trajectory, [0.0], LyapunovParams.family_a(3.0))
    assert report.satisfied


def test_speed_rate_below_critical_damping(quadratic_runs):
    report = verify_speed_rate(quadratic_runs(2.0))
    assert report.theoretical_exponent == pytest.approx(0.45)
    assert report.bound_satisfied
    assert math.isfinite(report.details["sup_tail"])


def test_strong_minimum_rates_at_alpha_two(quadratic, quadratic_runs):
    traj = quadratic_runs(2.0)
    value, distance, speed = strong_min_rates(traj)
    c = rate_bound_constant(quadratic, [1.0], [0.0], 1.0, 2.0)
    assert value.theoretical_exponent == pytest.approx(4.0 / 3.0)
    assert value.bound_constant == pytest.approx(c)
    assert value.details["sup_scaled_gap"] <= c
    assert distance.bound_constant == pytest.approx(2.0 * c)
    assert distance.details["sup_scaled_dist2"] <= 2.0 * c
    assert distance.details["growth_inequality"]
    assert value.fitted_exponent == pytest.approx(-2.0, abs=0.25)
    assert speed.theoretical_exponent == pytest.approx(2.0 / 3.0)
