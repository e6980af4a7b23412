import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import DOP853, solve_ivp
from scipy.integrate._ivp.rk import MAX_FACTOR, MIN_FACTOR, SAFETY, rk_step
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import bisect

from .problems import PROBLEM_IDS, ProblemSpec, bessel_solution, bessel_velocity, get_problem, make_quadratic
from .utils import (
    DivergenceError,
    IntegrationError,
    as_point,
    freeze,
    read_csv,
    write_csv,
)

logger = logging.getLogger(__name__)

DEFAULT_T0 = 1.0
BLOWUP_CAP = 1e8
EVENT_XTOL = 1e-8
PI_BETA = 0.04
# lower bound on the remembered error norm of the PI controller
ERROR_FLOOR = 1e-4


class PIDOP853(DOP853):
    """
    DOP853 with a proportional-integral step-size controller and an optional fixed-step mode.

    The controller uses factor = SAFETY * err^(-(1/8 - 0.2 beta)) * err_old^beta, clipped to
    [MIN_FACTOR, MAX_FACTOR]; after a rejection the factor is capped at 1. With `fixed_step` every
    step has that length (except the last, clipped to t_bound) and the error estimate is ignored.
    """

    def __init__(self, fun, t0, y0, t_bound, pi_beta=PI_BETA, fixed_step=None, **extraneous):
        if fixed_step is not None:
            if not fixed_step > 0:
                raise ValueError(f"fixed_step must be positive, got {fixed_step}")
            extraneous["first_step"] = fixed_step
            extraneous["max_step"] = fixed_step
        super().__init__(fun, t0, y0, t_bound, **extraneous)
        if not 0 <= pi_beta < 0.125 / 0.2:
            raise ValueError(f"pi_beta out of range, got {pi_beta}")
        self.pi_beta = pi_beta
        self.fixed_step = fixed_step
        self.error_old = 1.0

    def _pi_factor(self, error_norm):
        if error_norm == 0:
            return MAX_FACTOR
        factor = SAFETY * error_norm ** (self.error_exponent + 0.2 * self.pi_beta) * self.error_old**self.pi_beta
        return min(MAX_FACTOR, max(MIN_FACTOR, factor))

    def _step_impl(self):
        t = self.t
        y = self.y

        min_step = 10 * np.abs(np.nextafter(t, self.direction * np.inf) - t)
        if self.h_abs > self.max_step:
            h_abs = self.max_step
        elif self.h_abs < min_step:
            h_abs = min_step
        else:
            h_abs = self.h_abs

        step_rejected = False
        while True:
            if h_abs < min_step:
                return False, self.TOO_SMALL_STEP
            h = h_abs * self.direction
            t_new = t + h
            if self.direction * (t_new - self.t_bound) > 0:
                t_new = self.t_bound
            h = t_new - t
            h_abs = np.abs(h)

            y_new, f_new = rk_step(self.fun, t, y, self.f, h, self.A, self.B, self.C, self.K)

            if self.fixed_step is not None:
                h_abs = self.fixed_step
                break

            scale = self.atol + np.maximum(np.abs(y), np.abs(y_new)) * self.rtol
            error_norm = self._estimate_error_norm(self.K, h, scale)
            if error_norm < 1:
                factor = self._pi_factor(error_norm)
                if step_rejected:
                    factor = min(1.0, factor)
                h_abs *= factor
                self.error_old = max(error_norm, ERROR_FLOOR)
                break

            h_abs *= max(MIN_FACTOR, SAFETY * error_norm**self.error_exponent)
            step_rejected = True

        self.h_previous = h
        self.y_old = y
        self.t = t_new
        self.y = y_new
        self.h_abs = h_abs
        self.f = f_new
        return True, None


@dataclass(frozen=True)
class Forcing:
    """
    External forcing g(t). `zero`; `power_decay` g(t) = c t^(-q) e_1; `tabulated` linear
    interpolation of (times, values) rows, zero outside the table.
    """

    kind: str = "zero"
    c: float = 0.0
    q: float = 0.0
    times: Tuple[float, ...] = ()
    values: Tuple[Tuple[float, ...], ...] = ()
    source: str = ""

    def __post_init__(self):
        if self.kind not in ("zero", "power_decay", "tabulated"):
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if self.kind == "tabulated":
            if len(self.times) < 2 or len(self.times) != len(self.values):
                raise ValueError("tabulated forcing needs at least two (time, value) rows")
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("tabulated forcing times must be strictly increasing")

    @classmethod
    def zero(cls) -> "Forcing":
        return cls()

    @classmethod
    def power_decay(cls, c: float, q: float) -> "Forcing":
        return cls(kind="power_decay", c=float(c), q=float(q))

    @classmethod
    def tabulated(cls, times, values, source: str = "") -> "Forcing":
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[0] != len(times):
            values = values.T
        return cls(
            kind="tabulated",
            times=tuple(float(t) for t in times),
            values=tuple(tuple(float(v) for v in row) for row in values),
            source=source,
        )

    @classmethod
    def parse(cls, descriptor: Optional[str]) -> "Forcing":
        """Build from `zero`, `power:c:q` or `table:path.csv` (columns t, g_1..g_n)."""
        if descriptor is None or descriptor in ("", "zero", "none"):
            return cls.zero()
        head, _, rest = descriptor.partition(":")
        if head == "power":
            try:
                c, q = (float(v) for v in rest.split(":"))
            except ValueError:
                raise ValueError(f"bad power forcing descriptor {descriptor!r}, expected power:c:q") from None
            return cls.power_decay(c, q)
        if head == "table":
            _, _, data = read_csv(rest)
            return cls.tabulated(data[:, 0], data[:, 1:], source=rest)
        raise ValueError(f"unknown forcing descriptor {descriptor!r}")

    def describe(self) -> str:
        if self.kind == "power_decay":
            return f"power:{self.c!r}:{self.q!r}"
        if self.kind == "tabulated":
            return f"table:{self.source}"
        return "zero"

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "power_decay" and self.c == 0.0)

    def is_integrable(self, p: float) -> bool:
        """Whether ∫ t^p ‖g(t)‖ dt is finite on [t0, ∞), decided on the kind."""
        if self.kind == "power_decay":
            return self.c == 0.0 or self.q > p + 1.0
        return True

    def __call__(self, t: float, dimension: int) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(dimension)
        if self.kind == "power_decay":
            g = np.zeros(dimension)
            g[0] = self.c * t ** (-self.q)
            return g
        table = np.asarray(self.values)
        if table.shape[1] != dimension:
            raise ValueError(f"tabulated forcing has dimension {table.shape[1]}, expected {dimension}")
        return np.array([np.interp(t, self.times, table[:, i], left=0.0, right=0.0) for i in range(dimension)])

    def sample(self, times: np.ndarray, dimension: int) -> np.ndarray:
        return np.array([self(t, dimension) for t in np.atleast_1d(times)])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Sampled solution of the damped system on a log-uniform grid.

    `dense` is the solver's dense output (absent for trajectories loaded from disk); `problem` is
    absent when the trajectory was saved for a problem outside the catalog.
    """

    alpha: float
    t0: float
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    integrator_tolerance: float
    problem: Optional[ProblemSpec] = None
    forcing: Forcing = field(default_factory=Forcing)
    dense: Optional[Callable] = None
    step_times: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("trajectory needs at least two samples")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if self.positions.shape != self.velocities.shape or self.positions.shape[0] != self.times.size:
            raise ValueError("positions and velocities must have one row per sample")

    @property
    def dimension(self) -> int:
        return self.positions.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def problem_name(self) -> str:
        return self.problem.name if self.problem is not None else "unknown"

    def require_problem(self) -> ProblemSpec:
        if self.problem is None:
            raise ValueError("trajectory carries no problem; load it with a catalog problem name")
        return self.problem

    def acceleration(self, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        problem = self.require_problem()
        return -(self.alpha / t) * v - problem.smooth.gradient(x) + self.forcing(t, self.dimension)

    def state_at(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        if not self.t0 <= t <= self.t_end * (1 + 1e-12):
            raise ValueError(f"t={t} outside [{self.t0}, {self.t_end}]")
        if self.dense is not None:
            y = self.dense(t)
            return y[: self.dimension], y[self.dimension :]
        x_spline, v_spline = self._splines()
        return x_spline(t), v_spline(t)

    def _splines(self):
        cached = self.__dict__.get("_spline_cache")
        if cached is None:
            x_spline = CubicHermiteSpline(self.times, self.positions, self.velocities)
            if self.problem is not None:
                acc = np.array([self.acceleration(t, x, v) for t, x, v in zip(self.times, self.positions, self.velocities)])
                v_spline = CubicHermiteSpline(self.times, self.velocities, acc)
            else:
                v_spline = x_spline.derivative()
            cached = (x_spline, v_spline)
            object.__setattr__(self, "_spline_cache", cached)
        return cached

    def event_grid(self) -> np.ndarray:
        if self.step_times is None:
            return self.times
        grid = np.union1d(self.times, self.step_times)
        return grid[(grid >= self.t0) & (grid <= self.t_end)]

    def phi_values(self) -> np.ndarray:
        phi = self.require_problem().smooth.value
        return np.array([phi(x) for x in self.positions])

    def forcing_values(self) -> np.ndarray:
        return self.forcing.sample(self.times, self.dimension)


def integrate(
    spec: ProblemSpec,
    alpha: float,
    x0,
    v0=None,
    t0: float = DEFAULT_T0,
    t_end: float = 1e3,
    tol: float = 1e-9,
    forcing: Optional[Forcing] = None,
    num_samples: int = 2000,
    blowup_cap: float = BLOWUP_CAP,
    fixed_step: Optional[float] = None,
    pi_beta: float = PI_BETA,
) -> Trajectory:
    """
    Integrate x'' + (alpha/t) x' + grad Phi(x) = g(t) from (x0, v0) at t0 up to t_end.

    Returns the dense solution resampled on `num_samples` log-uniform times. Raises
    `DivergenceError` when ‖x‖ reaches `blowup_cap` and `IntegrationError` when the solver fails.
    """
    if not spec.is_smooth:
        raise ValueError(
            f"problem {spec.name!r} has a nonsmooth part; the continuous inclusion is not integrated, "
            "use avdrates.ifb.run_ifb instead"
        )
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not t0 > 0:
        raise ValueError(f"t0 must be positive (damping alpha/t is singular at 0), got {t0}")
    if not t_end > t0:
        raise ValueError(f"t_end must exceed t0={t0}, got {t_end}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if num_samples < 2:
        raise ValueError(f"num_samples must be at least 2, got {num_samples}")
    n = spec.dimension
    x0 = as_point(x0, n, "x0")
    v0 = np.zeros(n) if v0 is None else as_point(v0, n, "v0")
    forcing = forcing or Forcing.zero()
    gradient = spec.smooth.gradient

    def rhs(t, y):
        x, v = y[:n], y[n:]
        acc = -(alpha / t) * v - gradient(x)
        if not forcing.is_zero:
            acc = acc + forcing(t, n)
        return np.concatenate([v, acc])

    def blowup(t, y):
        return blowup_cap - np.linalg.norm(y[:n])

    blowup.terminal = True
    blowup.direction = -1

    options = {"pi_beta": pi_beta}
    if fixed_step is not None:
        options["fixed_step"] = fixed_step
    sol = solve_ivp(
        rhs,
        (t0, t_end),
        np.concatenate([x0, v0]),
        method=PIDOP853,
        rtol=tol,
        atol=tol,
        dense_output=True,
        events=[blowup],
        **options,
    )
    if sol.status == -1:
        raise IntegrationError(f"integration of {spec.name!r} failed: {sol.message}")
    if sol.status == 1:
        t_blow = float(sol.t_events[0][0])
        raise DivergenceError(f"‖x‖ reached {blowup_cap:g} at t={t_blow:.6g} on {spec.name!r}, alpha={alpha}")

    times = np.geomspace(t0, t_end, num_samples)
    times[0], times[-1] = t0, t_end
    states = sol.sol(times)
    logger.info(
        f"integrated {spec.name} alpha={alpha} on [{t0:g}, {t_end:g}]: "
        f"{len(sol.t) - 1} steps, nfev={sol.nfev}"
    )
    return Trajectory(
        alpha=float(alpha),
        t0=float(t0),
        times=freeze(times),
        positions=freeze(states[:n].T),
        velocities=freeze(states[n:].T),
        integrator_tolerance=float(tol),
        problem=spec,
        forcing=forcing,
        dense=sol.sol,
        step_times=freeze(sol.t),
    )


@dataclass(frozen=True)
class CrossingEvent:
    time: float
    boundary: float
    side: str
    direction: str
    scaled_speed: float


def crossing_events(traj: Trajectory, a: float, b: float, xtol: float = EVENT_XTOL) -> List[CrossingEvent]:
    """
    Times where a 1-D trajectory crosses a or b, located by bisection on the interpolant between
    consecutive sample/step times. Direction is `enter`/`leave` relative to [a, b]; `scaled_speed`
    is |t x'(t)| at the event.
    """
    if traj.dimension != 1:
        raise ValueError(f"crossing events need a 1-D trajectory, got dimension {traj.dimension}")
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    grid = traj.event_grid()

    def position(t):
        return float(traj.state_at(t)[0][0])

    xs = np.array([position(t) for t in grid])
    events = []
    for side, boundary in (("a", a), ("b", b)):
        f = xs - boundary
        for i in range(len(grid) - 1):
            if f[i] == 0.0 or f[i] * f[i + 1] > 0:
                continue
            if f[i + 1] == 0.0:
                t_event = float(grid[i + 1])
            else:
                t_event = bisect(lambda t: position(t) - boundary, grid[i], grid[i + 1], xtol=xtol)
            rising = f[i + 1] > f[i]
            if side == "a":
                direction = "enter" if rising else "leave"
            else:
                direction = "leave" if rising else "enter"
            v = traj.state_at(t_event)[1][0]
            events.append(CrossingEvent(t_event, float(boundary), side, direction, abs(t_event * v)))
    events.sort(key=lambda e: e.time)
    return events


def ode_residual(traj: Trajectory, points: Optional[Sequence[float]] = None, h: float = 1e-3) -> float:
    """
    Max residual of x' = v and v' + (alpha/t) v + grad Phi(x) - g(t) at `points` (default: interior
    samples), with derivatives of the interpolant by fourth-order central differences.
    """
    problem = traj.require_problem()
    if points is None:
        lo, hi = traj.t0 + 2 * h, traj.t_end - 2 * h
        points = traj.times[(traj.times > lo) & (traj.times < hi)]
    worst = 0.0
    for t in points:
        stencil = [traj.state_at(t + k * h) for k in (-2, -1, 1, 2)]
        xs = [s[0] for s in stencil]
        vs = [s[1] for s in stencil]
        x, v = traj.state_at(t)
        dx = (xs[0] - 8 * xs[1] + 8 * xs[2] - xs[3]) / (12 * h)
        dv = (vs[0] - 8 * vs[1] + 8 * vs[2] - vs[3]) / (12 * h)
        r1 = np.max(np.abs(dx - v))
        r2 = np.max(np.abs(dv + (traj.alpha / t) * v + problem.smooth.gradient(x) - traj.forcing(t, traj.dimension)))
        worst = max(worst, float(r1), float(r2))
    return worst


def bessel_discrepancy(traj: Trajectory, x0, t_max: Optional[float] = None) -> float:
    """Sup over samples in [t0, t_max] of ‖x(t) - closed form‖ for ½‖x‖² released at rest from t = 0."""
    t_max = traj.t_end if t_max is None else t_max
    mask = traj.times <= t_max
    exact = bessel_solution(traj.alpha, x0, traj.times[mask])
    return float(np.max(np.linalg.norm(traj.positions[mask] - exact, axis=1)))


def closed_form_start(alpha: float, x0, t0: float = DEFAULT_T0) -> Tuple[np.ndarray, np.ndarray]:
    return bessel_solution(alpha, x0, t0), bessel_velocity(alpha, x0, t0)


def order_check(
    alpha: float = 3.0,
    steps: Sequence[float] = (0.5, 0.25),
    t_end: float = 20.0,
    x0=(1.0,),
) -> List[float]:
    """
    Closed-form discrepancy of fixed-step runs on ½‖x‖² started at t0 = 1 on the closed form, one
    entry per step size.
    """
    x0 = as_point(x0, name="x0")
    spec = make_quadratic(np.eye(x0.size), name="quadratic")
    start_x, start_v = closed_form_start(alpha, x0)
    errors = []
    for h in steps:
        traj = integrate(spec, alpha, start_x, start_v, t_end=t_end, tol=1e-3, fixed_step=h, num_samples=200)
        errors.append(bessel_discrepancy(traj, x0))
        logger.info(f"order check alpha={alpha} h={h}: discrepancy {errors[-1]:.3e}")
    return errors


def save_trajectory(traj: Trajectory, path: str) -> str:
    n = traj.dimension
    columns = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)]
    metadata = {
        "problem": traj.problem_name,
        "alpha": traj.alpha,
        "tol": traj.integrator_tolerance,
        "t0": traj.t0,
        "forcing": traj.forcing.describe(),
    }
    data = np.column_stack([traj.times, traj.positions, traj.velocities])
    return write_csv(path, metadata, columns, data)


def load_trajectory(path: str) -> Trajectory:
    metadata, columns, data = read_csv(path)
    if not columns or columns[0] != "t" or (len(columns) - 1) % 2:
        raise ValueError(f"{path} is not a trajectory file (columns {columns})")
    n = (len(columns) - 1) // 2
    name = metadata.get("problem", "unknown")
    problem = get_problem(name) if name in PROBLEM_IDS else None
    return Trajectory(
        alpha=float(metadata["alpha"]),
        t0=float(metadata.get("t0", data[0, 0])),
        times=freeze(data[:, 0]),
        positions=freeze(data[:, 1 : 1 + n]),
        velocities=freeze(data[:, 1 + n :]),
        integrator_tolerance=float(metadata.get("tol", "nan")),
        problem=problem,
        forcing=Forcing.parse(metadata.get("forcing", "zero")),
    )
