from dataclasses import replace

import numpy as np
import pytest

from avdrates.dynamics import Forcing
from avdrates.ifb import (
    critical_energy,
    critical_value_bound,
    discrete_lyapunov,
    discrete_rate_check,
    gs_operator,
    iterate_boundedness_check,
    iterate_passes,
    load_log,
    lyapunov_branch,
    lyapunov_d_sequence,
    run_ifb,
    save_energies,
    save_log,
    verify_anchor_inequality,
    verify_descent_rule,
    verify_energy_decay,
)
from avdrates.problems import PROBLEM_IDS, composite_value, get_problem, make_flat_bottom
from avdrates.utils import DiagnosticError, read_csv


def test_first_steps(quadratic):
    log = run_ifb(quadratic, 3.0, 0.5, [1.0], 10)
    assert log.K == 10
    assert log.xs.shape == (11, 1)
    assert log.xs[1, 0] == log.xs[0, 0] == 1.0
    # y_1 = x_1, so x_2 is a plain gradient step
    assert log.xs[2, 0] == pytest.approx(0.5)
    # alpha_3 = 0 for alpha = 3
    assert log.ys[3, 0] == log.xs[3, 0]


def test_step_above_inverse_lipschitz_is_rejected():
    quartic = get_problem("quartic")
    with pytest.raises(ValueError, match="step s must lie"):
        run_ifb(quartic, 3.0, 2.0 / quartic.lipschitz, [1.0], 100)


def test_perturbations_are_recorded(lasso):
    log = run_ifb(lasso, 2.0, 0.5, [-2.0], 50, perturbations=Forcing.power_decay(0.1, 2.7))
    assert log.perturbations[4, 0] == pytest.approx(0.1 * 4.0**-2.7)
    assert log.perturbations[0, 0] == 0.0


def test_descent_rule(lasso, rng):
    for y, x in rng.uniform(-4.0, 4.0, size=(200, 2, 1)):
        assert verify_descent_rule(lasso, 1.0, y, x) <= 1e-12


def test_gs_operator_is_monotone(lasso, rng):
    points = rng.uniform(-5.0, 5.0, size=(1000, 2, 1))
    for x, y in points:
        gap = float((gs_operator(lasso, 1.0, x) - gs_operator(lasso, 1.0, y)) @ (x - y))
        assert gap >= -1e-12


@pytest.mark.parametrize("s", [1.0, 0.5, 0.3])
def test_gs_operator_vanishes_at_minimizer(lasso, s):
    assert np.max(np.abs(gs_operator(lasso, s, [1.0]))) <= 1e-12
    assert np.max(np.abs(gs_operator(lasso, s, [1.5]))) > 0.1


@pytest.mark.slow
@pytest.mark.parametrize("problem_id", PROBLEM_IDS)
@pytest.mark.parametrize("step_scale", [1.0, 0.5])
@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0, 4.0])
def test_per_step_inequalities(problem_id, step_scale, alpha):
    spec = get_problem(problem_id)
    log = run_ifb(spec, alpha, step_scale / spec.lipschitz, spec.start(), 10000)
    z = spec.argmin_set.project(log.xs[0])
    assert verify_energy_decay(log) == []
    assert verify_anchor_inequality(log, z) == []


def test_anchor_needs_argmin_point(lasso):
    log = run_ifb(lasso, 3.0, 0.5, [-2.0], 100)
    with pytest.raises(ValueError, match="argmin"):
        verify_anchor_inequality(log, [0.0])


def test_branches():
    assert lyapunov_branch(3.0, 0.7) == "primary"
    assert lyapunov_branch(1.0, 0.3) == "alternative"
    with pytest.raises(ValueError, match="not admissible"):
        lyapunov_branch(1.0, 0.5)


@pytest.mark.parametrize("alpha, p", [(3.0, 0.6), (4.0, 0.9), (2.0, 0.55)])
def test_d_sequence_asymptotics(alpha, p):
    k = 1e5
    d = lyapunov_d_sequence(alpha, p, [k])[0]
    assert d * k ** (2 - 2 * p) == pytest.approx(alpha - 4 * p + 1, rel=1e-3)
    # independent of the step
    assert lyapunov_d_sequence(alpha, p, [k], s=0.25)[0] == pytest.approx(d, rel=1e-9)


def test_discrete_energies_bound_the_scaled_gap(lasso):
    log = run_ifb(lasso, 4.0, 0.5, [-2.0], 20000)
    energies = discrete_lyapunov(log, [1.0], 0.9)
    assert energies.branch == "primary"
    assert np.all(np.isnan(energies.E[:2]))
    assert energies.k_xi is not None
    k = energies.k_xi
    slack = 1e-9 * (1.0 + np.abs(energies.E[k:]))
    assert np.all(energies.E_tilde[k:] >= energies.scaled_gap[k:] - slack)
    assert discrete_rate_check(energies) == []


def test_alternative_branch_starts_at_three(lasso):
    log = run_ifb(lasso, 1.0, 0.5, [-2.0], 2000)
    energies = discrete_lyapunov(log, [1.0], 0.25)
    assert energies.branch == "alternative"
    assert energies.k_start == 3
    assert np.all(np.isnan(energies.E[:3]))
    assert np.all(np.isfinite(energies.E[3:]))


@pytest.mark.slow
def test_critical_energy_and_bound(critical_log):
    crit = critical_energy(critical_log, [1.0])
    assert crit.monotone_violations == []
    # E(1) = 0.5 * 4 * 8.5 + 2 * 9 from x_0 = x_1 = -2
    assert crit.values[0] == pytest.approx(35.0)
    sup_scaled, bound = critical_value_bound(critical_log, crit)
    assert bound == pytest.approx(35.0 / 0.5)
    assert sup_scaled <= bound


def test_critical_energy_rises_only_while_extrapolation_is_negative(lasso):
    log = run_ifb(lasso, 3.0, 0.5, [-2.0], 500)
    violations = critical_energy(log, [1.0], check_from=1).monotone_violations
    assert [k for k, _ in violations] == [2]
    assert violations[0][1] == pytest.approx(3.75)


@pytest.mark.slow
def test_critical_energy_never_increases_at_small_step(lasso):
    log = run_ifb(lasso, 3.0, 0.25, [-2.0], 100000)
    crit = critical_energy(log, [1.0], check_from=1)
    assert crit.monotone_violations == []
    sup_scaled, bound = critical_value_bound(log, crit, check_from=1)
    assert bound == pytest.approx(crit.values[0] / 0.25)
    assert sup_scaled <= bound


def test_index_shifted_critical_energy(critical_log):
    shifted = critical_energy(critical_log, [1.0], offset=2, check_from=1)
    assert shifted.monotone_violations == []
    assert shifted.values[0] == pytest.approx(18.0)


def test_critical_energy_vanishes_at_fixed_point(lasso):
    log = run_ifb(lasso, 3.0, 0.5, [1.0], 100)
    crit = critical_energy(log, [1.0], check_from=1)
    np.testing.assert_allclose(crit.values, 0.0, atol=1e-12)
    assert crit.monotone_violations == []


@pytest.mark.slow
def test_critical_scaled_differences_are_stable(critical_log):
    _, sup_full = iterate_boundedness_check(critical_log)
    half = critical_log.K // 2
    k = np.arange(half + 1)
    sup_half = float(np.max(k * np.linalg.norm(critical_log.differences()[: half + 1], axis=1)))
    assert sup_full <= 1.1 * sup_half


def test_critical_energy_needs_alpha_three(lasso):
    log = run_ifb(lasso, 2.0, 0.5, [-2.0], 100)
    with pytest.raises(ValueError, match="alpha = 3"):
        critical_energy(log, [1.0])


@pytest.mark.slow
def test_passes_through_flat_bottom():
    log = run_ifb(make_flat_bottom(0.0, 1.0), 3.0, 1e-5, [21.0], 20000)
    passes = iterate_passes(log, 0.0, 1.0)
    assert len(passes) >= 2
    for p in passes:
        assert p.decrement == pytest.approx(2.0 * abs(p.travel), rel=1e-9, abs=1e-9)
        assert p.decrement == pytest.approx(2.0, rel=0.15)


def test_log_round_trip(lasso, tmp_path):
    log = run_ifb(lasso, 3.0, 0.5, [-2.0], 500, perturbations=Forcing.power_decay(0.1, 2.7))
    path = save_log(log, str(tmp_path / "log.csv"))
    loaded = load_log(path)
    assert loaded.problem_name == "lasso-small"
    assert loaded.forcing == log.forcing
    np.testing.assert_array_equal(loaded.xs, log.xs)
    np.testing.assert_allclose(loaded.ys, log.ys, rtol=0, atol=1e-15)
    np.testing.assert_allclose(loaded.perturbations, log.perturbations)


def test_save_energies(critical_log, tmp_path):
    energies = discrete_lyapunov(critical_log, [1.0], 0.9)
    crit = critical_energy(critical_log, [1.0])
    path = save_energies(energies, str(tmp_path / "energies.csv"), crit=crit)
    metadata, columns, data = read_csv(path)
    assert columns == ["k", "W", "h", "E", "E_tilde", "E_crit"]
    assert metadata["branch"] == "primary"
    assert data.shape == (critical_log.K + 1, 6)


@pytest.mark.parametrize("problem_id", PROBLEM_IDS)
def test_run_started_in_argmin_stays_there(problem_id):
    spec = get_problem(problem_id)
    x_star = spec.argmin_set.project(spec.start())
    log = run_ifb(spec, 3.0, 0.5 / spec.lipschitz, x_star, 200)
    np.testing.assert_array_equal(log.xs, np.tile(x_star, (201, 1)))
    np.testing.assert_array_equal(log.ys, log.xs)


def test_gs_operator_is_gradient_without_nonsmooth_part(rng):
    spec = get_problem("strong-quad")
    for y in rng.uniform(-3.0, 3.0, size=(20, 2)):
        np.testing.assert_allclose(gs_operator(spec, 0.5, y), spec.smooth.gradient(y), rtol=1e-12, atol=1e-12)


def test_gs_operator_on_lasso(lasso):
    assert gs_operator(lasso, 0.5, [2.0])[0] == pytest.approx(1.0)


@pytest.mark.parametrize("problem_id", PROBLEM_IDS)
def test_descent_rule_on_catalog(problem_id, rng):
    spec = get_problem(problem_id)
    s = 1.0 / spec.lipschitz
    for y, x in rng.uniform(-1.5, 1.5, size=(200, 2, spec.dimension)):
        assert verify_descent_rule(spec, s, y, x) <= 1e-12 * (1.0 + composite_value(spec, x))


def test_critical_discrete_exponent(lasso):
    with pytest.raises(ValueError, match="not admissible"):
        lyapunov_branch(3.0, 1.0)
    log = run_ifb(lasso, 3.0, 0.5, [-2.0], 20000)
    energies = discrete_lyapunov(log, [1.0], 0.95)
    assert energies.branch == "primary"
    assert energies.k_star is not None
    assert discrete_rate_check(energies) == []


def test_discrete_energies_vanish_at_fixed_point(lasso):
    log = run_ifb(lasso, 3.0, 0.5, [1.0], 200)
    energies = discrete_lyapunov(log, [1.0], 0.9)
    np.testing.assert_allclose(energies.E[energies.k_start :], 0.0, atol=1e-12)


def test_rate_check_without_tail_index_raises(lasso):
    log = run_ifb(lasso, 4.0, 0.5, [-2.0], 2000)
    energies = replace(discrete_lyapunov(log, [1.0], 0.9), k_star=None)
    with pytest.raises(DiagnosticError, match="no index"):
        discrete_rate_check(energies)
