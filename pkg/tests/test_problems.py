import math

import numpy as np
import pytest
from scipy.special import jv

from avdrates.problems import (
    PROBLEM_IDS,
    SMOOTH_PROBLEM_IDS,
    ArgminSet,
    bessel_series,
    bessel_solution,
    bessel_velocity,
    check_gradient,
    composite_value,
    get_problem,
    make_indicator,
    make_l1,
    make_quadratic,
    prox_l1,
    prox_residual,
    validate_problem,
)
from avdrates.utils import SeriesError

GRID = np.linspace(-5.0, 5.0, 1_000_001)


@pytest.mark.parametrize("problem_id", PROBLEM_IDS)
def test_catalog_problems_satisfy_declared_properties(problem_id):
    assert validate_problem(get_problem(problem_id), samples=200) == []


def test_unknown_problem_is_rejected():
    with pytest.raises(ValueError, match="unknown problem"):
        get_problem("rosenbrock")


def test_catalog_ground_truth():
    lasso = get_problem("lasso-small")
    assert lasso.min_value == pytest.approx(1.5)
    assert lasso.argmin_set.point == (1.0,)
    assert not lasso.is_smooth
    assert get_problem("quartic").lipschitz == pytest.approx(12.0)
    assert get_problem("flat-bottom").start().tolist() == [3.0]
    assert "lasso-small" not in SMOOTH_PROBLEM_IDS


def test_singular_quadratic_has_affine_argmin():
    spec = get_problem("aniso-quadratic")
    assert spec.argmin_set.kind == "affine"
    assert spec.argmin_set.contains([0.0, 0.0, 7.0])
    assert spec.argmin_set.distance([3.0, 4.0, -2.0]) == pytest.approx(5.0)
    assert spec.strong_min_modulus == pytest.approx(0.1)


def test_quadratic_rejects_indefinite_matrix():
    with pytest.raises(ValueError, match="positive semidefinite"):
        make_quadratic([[1.0, 0.0], [0.0, -1.0]])


def test_interval_argmin_projection(rng):
    interval = ArgminSet.interval(0.0, 1.0)
    assert interval.project([3.0]).tolist() == [1.0]
    assert interval.distance([-0.5]) == pytest.approx(0.5)
    samples = interval.sample(rng, 50)
    assert all(interval.contains(z) for z in samples)


@pytest.mark.parametrize("x", [-3.2, -0.4, 0.0, 0.7, 2.5])
@pytest.mark.parametrize("step", [0.3, 1.0, 2.0])
def test_l1_prox_matches_grid_oracle(x, step):
    objective = np.abs(GRID) + (GRID - x) ** 2 / (2.0 * step)
    expected = GRID[np.argmin(objective)]
    assert prox_l1(step, 1.0, np.array([x]))[0] == pytest.approx(expected, abs=1e-4)
    assert prox_residual(make_l1(1.0), step, [x], GRID[::1000, None]) <= 1e-12


@pytest.mark.parametrize("x", [-3.0, 0.5, 1.7])
def test_indicator_prox_matches_grid_oracle(x):
    box = make_indicator(0.0, 1.0)
    inside = GRID[(GRID >= 0.0) & (GRID <= 1.0)]
    expected = inside[np.argmin((inside - x) ** 2)]
    assert box.prox(0.5, np.array([x]))[0] == pytest.approx(expected, abs=1e-4)
    assert box.value(np.array([2.0])) == math.inf


@pytest.mark.parametrize(
    "problem_id, point",
    [
        ("quadratic", [0.7]),
        ("aniso-quadratic", [0.3, -1.2, 2.0]),
        ("flat-bottom", [-2.5]),
        ("flat-bottom", [0.5]),
        ("flat-bottom", [3.0]),
        ("quartic", [1.3]),
        ("strong-quad", [0.4, -0.9]),
        ("lasso-small", [-1.0]),
    ],
)
def test_gradient_matches_finite_differences(problem_id, point):
    assert check_gradient(get_problem(problem_id), point) <= 1e-6


def test_composite_value_adds_nonsmooth_part():
    lasso = get_problem("lasso-small")
    assert composite_value(lasso, [-1.0]) == pytest.approx(0.5 * 9.0 + 1.0)


def test_series_matches_elementary_closed_forms():
    for t in (0.5, 3.0, 30.0, 100.0):
        assert bessel_series(0.5, t) == pytest.approx(math.sin(t) / t, abs=1e-12)
        assert bessel_series(-0.5, t) == pytest.approx(math.cos(t), abs=1e-12)
    assert bessel_series(1.0, 0.0) == 1.0


@pytest.mark.parametrize("t", [1.0, 5.0, 12.5])
def test_series_matches_scipy_bessel(t):
    assert bessel_series(1.0, t) == pytest.approx(2.0 * jv(1.0, t) / t, abs=1e-12)


def test_series_term_budget():
    with pytest.raises(SeriesError):
        bessel_series(1.0, 100.0, max_terms=10)


def test_closed_form_solution_and_velocity():
    t = np.array([1.0, 4.0, 20.0])
    x = bessel_solution(2.0, [2.0], t)
    v = bessel_velocity(2.0, [2.0], t)
    assert x.shape == (3, 1)
    np.testing.assert_allclose(x[:, 0], 2.0 * np.sin(t) / t, atol=1e-12)
    np.testing.assert_allclose(v[:, 0], 2.0 * (np.cos(t) / t - np.sin(t) / t**2), atol=1e-12)
    assert bessel_solution(3.0, [1.0, -1.0], 0.0).tolist() == [1.0, -1.0]


def test_closed_form_solves_the_ode():
    t = np.linspace(1.0, 50.0, 60)
    h = 1e-5
    x = bessel_solution(3.0, [1.0], t)[:, 0]
    v = bessel_velocity(3.0, [1.0], t)[:, 0]
    acc = (bessel_velocity(3.0, [1.0], t + h)[:, 0] - bessel_velocity(3.0, [1.0], t - h)[:, 0]) / (2.0 * h)
    assert np.max(np.abs(acc + 3.0 / t * v + x)) <= 1e-8


def test_alpha_one_vanishes_at_first_zero_of_j0():
    first_zero = 2.404825557695773
    assert bessel_solution(1.0, [1.0], first_zero)[0] == pytest.approx(0.0, abs=1e-12)
