import numpy as np
import pytest

from avdrates.dynamics import Forcing, closed_form_start, integrate
from avdrates.ifb import run_ifb
from avdrates.problems import get_problem


@pytest.fixture(scope="session")
def quadratic():
    return get_problem("quadratic")


@pytest.fixture(scope="session")
def lasso():
    return get_problem("lasso-small")


@pytest.fixture(scope="session")
def bessel_trajectory(quadratic):
    """½x², alpha = 3, started at t0 = 1 on the closed form released from x = 1 at t = 0."""
    x, v = closed_form_start(3.0, [1.0])
    return integrate(quadratic, 3.0, x, v, t_end=1e3, tol=1e-10, num_samples=20000)


@pytest.fixture(scope="session")
def quadratic_runs(quadratic):
    """½x² from x0 = 1 at rest, one long run per alpha."""
    runs = {}

    def get(alpha: float):
        if alpha not in runs:
            runs[alpha] = integrate(quadratic, alpha, [1.0], [0.0], t_end=1e3, tol=1e-10, num_samples=20000)
        return runs[alpha]

    return get


@pytest.fixture(scope="session")
def short_trajectory(quadratic):
    return integrate(quadratic, 3.0, [1.0], [0.0], t_end=50.0, tol=1e-10, num_samples=2000)


@pytest.fixture(scope="session")
def forced_trajectory(quadratic):
    return integrate(
        quadratic, 3.0, [1.0], [0.0], t_end=1e3, tol=1e-10, forcing=Forcing.power_decay(0.1, 2.5), num_samples=4000
    )


@pytest.fixture(scope="session")
def critical_log(lasso):
    return run_ifb(lasso, 3.0, 0.5, lasso.start(), 100000)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
