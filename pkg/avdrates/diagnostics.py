import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

from .dynamics import Trajectory
from .problems import ProblemSpec, composite_value
from .utils import as_point, monotone_violations, write_csv

logger = logging.getLogger(__name__)

# energies may grow by at most ENERGY_SLACK * tol * (1 + |E|) between samples
ENERGY_SLACK = 100.0
W_SLACK = 10.0


@dataclass(frozen=True)
class LyapunovParams:
    """
    Parameters of the energy t^{2p}(Φ − min) + ½‖λ(t)(x − z) + t^p ẋ‖² + ½ξ(t)‖x − z‖².

    Every family uses λ(t) = μ t^{p−1} and ξ(t) = μ(α + 1 − 2p − μ) t^{2p−2}; the families differ
    in μ: A has μ = 2p, B has μ = α − p, S (speed) has μ = (α + 1)/2.
    """

    alpha: float
    p: float
    family: str
    mu: float

    def __post_init__(self):
        if self.family not in ("A", "B", "S"):
            raise ValueError(f"unknown Lyapunov family {self.family!r}")
        if not self.p > 0:
            raise ValueError(f"p must be positive, got {self.p}")

    @classmethod
    def family_a(cls, alpha: float, p: Optional[float] = None) -> "LyapunovParams":
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        p = min(1.0, alpha / 3.0) if p is None else float(p)
        if not 0 < p <= 1.0 or alpha < 4 * p - 1 - 1e-12:
            raise ValueError(f"family A needs 0 < p <= 1 and alpha >= 4p - 1, got p={p}, alpha={alpha}")
        return cls(alpha=float(alpha), p=p, family="A", mu=2.0 * p)

    @classmethod
    def family_b(cls, alpha: float, p: float) -> "LyapunovParams":
        if not (0 < p <= 1.0 and p < alpha / 3.0):
            raise ValueError(f"family B needs 0 < p <= 1 and p < alpha/3, got p={p}, alpha={alpha}")
        return cls(alpha=float(alpha), p=float(p), family="B", mu=float(alpha) - p)

    @classmethod
    def speed(cls, alpha: float, q: float) -> "LyapunovParams":
        if not speed_admissible(alpha, q):
            raise ValueError(
                f"speed family needs 0 < q <= min(1, (alpha+1)/4) and q < (alpha-1)/2, got q={q}, alpha={alpha}"
            )
        return cls(alpha=float(alpha), p=float(q), family="S", mu=(alpha + 1.0) / 2.0)

    @property
    def xi_coefficient(self) -> float:
        return self.mu * (self.alpha + 1.0 - 2.0 * self.p - self.mu)

    def lam(self, t):
        return self.mu * np.power(t, self.p - 1.0)

    def xi(self, t):
        return self.xi_coefficient * np.power(t, 2.0 * self.p - 2.0)


def speed_admissible(alpha: float, q: float) -> bool:
    return 0 < q <= min(1.0, (alpha + 1.0) / 4.0) and q < (alpha - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class DiagnosticSeries:
    name: str
    times: np.ndarray
    values: np.ndarray
    monotone_violations: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def is_monotone(self) -> bool:
        return not self.monotone_violations

    def tail_sup(self, window: Tuple[float, float]) -> float:
        lo, hi = window
        mask = (self.times >= lo) & (self.times <= hi)
        return float(np.max(self.values[mask]))


def _require_argmin_point(problem: ProblemSpec, z) -> np.ndarray:
    z = as_point(z, problem.dimension, "z")
    if not problem.require_argmin().contains(z):
        raise ValueError(f"z={z.tolist()} is not in the argmin set of {problem.name!r}")
    return z


def _check_alpha(traj: Trajectory, params: LyapunovParams):
    if not np.isclose(traj.alpha, params.alpha):
        raise ValueError(f"parameters built for alpha={params.alpha}, trajectory has alpha={traj.alpha}")


def energy_values(traj: Trajectory, z, params: LyapunovParams) -> np.ndarray:
    problem = traj.require_problem()
    t = traj.times
    gap = traj.phi_values() - problem.require_min_value()
    diff = traj.positions - z[None, :]
    tp = t**params.p
    anchor = params.lam(t)[:, None] * diff + tp[:, None] * traj.velocities
    values = t ** (2 * params.p) * gap + 0.5 * np.sum(anchor**2, axis=1)
    if params.xi_coefficient != 0.0:
        values = values + 0.5 * params.xi(t) * np.sum(diff**2, axis=1)
    return values


def energy_E(traj: Trajectory, z, params: LyapunovParams) -> DiagnosticSeries:
    z = _require_argmin_point(traj.require_problem(), z)
    _check_alpha(traj, params)
    values = energy_values(traj, z, params)
    violations = monotone_violations(values, ENERGY_SLACK * traj.integrator_tolerance)
    if violations:
        logger.warning(f"energy {params.family}(p={params.p}) increases at {len(violations)} samples")
    return DiagnosticSeries(f"E_{params.family}", traj.times, values, violations)


def global_energy_W(traj: Trajectory) -> DiagnosticSeries:
    m = traj.require_problem().require_min_value()
    values = traj.phi_values() - m + 0.5 * np.sum(traj.velocities**2, axis=1)
    violations = monotone_violations(values, 0.0, W_SLACK * traj.integrator_tolerance)
    return DiagnosticSeries("W", traj.times, values, violations)


def scaled_energy_Gamma(traj: Trajectory, p: float) -> DiagnosticSeries:
    w = global_energy_W(traj)
    values = traj.times ** (2 * p) * w.values
    return DiagnosticSeries(f"Gamma_p{p:g}", traj.times, values, monotone_violations(values, ENERGY_SLACK * traj.integrator_tolerance))


@dataclass(frozen=True)
class IntegralEstimate:
    kind: str
    p: float
    value: float
    bound: Optional[float] = None

    @property
    def satisfied(self) -> Optional[bool]:
        if self.bound is None:
            return None
        return self.value <= self.bound + 1e-9 * (1.0 + abs(self.bound))


def integral_estimate(traj: Trajectory, p: float, kind: str = "values", z=None) -> IntegralEstimate:
    """
    Trapezoid quadrature over the sampled horizon of ∫ t^{2p−1}(Φ − min) (values) or
    ∫ t^p ‖ẋ‖² (speed), with the energy bound when one applies. `z` defaults to the projection of
    the start point on the argmin set.
    """
    problem = traj.require_problem()
    t = traj.times
    if z is None:
        z = problem.require_argmin().project(traj.positions[0])
    if kind == "values":
        params = LyapunovParams.family_b(traj.alpha, p)
        integrand = t ** (2 * p - 1) * (traj.phi_values() - problem.require_min_value())
        value = float(trapezoid(integrand, t))
        e0 = float(energy_values(traj, _require_argmin_point(problem, z), params)[0])
        return IntegralEstimate(kind, p, value, e0 / (traj.alpha - 3 * p))
    if kind == "speed":
        integrand = t**p * np.sum(traj.velocities**2, axis=1)
        value = float(trapezoid(integrand, t))
        q = (p + 1.0) / 2.0
        if not speed_admissible(traj.alpha, q):
            return IntegralEstimate(kind, p, value)
        params = LyapunovParams.speed(traj.alpha, q)
        e0 = float(energy_values(traj, _require_argmin_point(problem, z), params)[0])
        return IntegralEstimate(kind, p, value, e0 / ((traj.alpha - 1.0) / 2.0 - q))
    raise ValueError(f"unknown integral kind {kind!r}, expected 'values' or 'speed'")


def rate_bound_constant(spec: ProblemSpec, x0, v0, t0: float, alpha: float) -> float:
    """C with sup_t t^{2α/3}(Φ(x(t)) − min Φ) ≤ C for 0 < α ≤ 3 and t0 ≥ 1."""
    if not 0 < alpha <= 3:
        raise ValueError(f"the constant applies for 0 < alpha <= 3, got {alpha}; use the energy at t0 for alpha > 3")
    x0 = as_point(x0, spec.dimension, "x0")
    v0 = as_point(v0, spec.dimension, "v0")
    gap = composite_value(spec, x0) - spec.require_min_value()
    dist = spec.require_argmin().distance(x0)
    return float(t0 ** (2 * alpha / 3) * (gap + v0 @ v0) + alpha * (alpha + 1) / 3 * dist**2)


def value_bound_check(traj: Trajectory, params: LyapunovParams, z=None) -> List[Tuple[int, float]]:
    """Samples where t^{2p}(Φ − min) exceeds E(t0); returns (index, excess)."""
    problem = traj.require_problem()
    z = problem.require_argmin().project(traj.positions[0]) if z is None else z
    z = _require_argmin_point(problem, z)
    e0 = float(energy_values(traj, z, params)[0])
    scaled = traj.times ** (2 * params.p) * (traj.phi_values() - problem.require_min_value())
    slack = ENERGY_SLACK * traj.integrator_tolerance * (1.0 + abs(e0))
    bad = np.nonzero(scaled > e0 + slack)[0]
    return [(int(i), float(scaled[i] - e0)) for i in bad]


def series_derivative(series: DiagnosticSeries) -> np.ndarray:
    return np.gradient(series.values, series.times)


def energy_dissipation_residual(traj: Trajectory) -> float:
    """Max deviation of the numerical dW/dt from −(α/t)‖ẋ‖² + ⟨g, ẋ⟩."""
    w = global_energy_W(traj)
    speed2 = np.sum(traj.velocities**2, axis=1)
    expected = -(traj.alpha / traj.times) * speed2
    if not traj.forcing.is_zero:
        expected = expected + np.sum(traj.forcing_values() * traj.velocities, axis=1)
    return float(np.max(np.abs(series_derivative(w) - expected)))


def perturbed_energy(traj: Trajectory, z, params: LyapunovParams) -> DiagnosticSeries:
    """
    E(t) + ∫_t^T ⟨λ(s)(x − z) + s^p ẋ, s^p g(s)⟩ ds, nonincreasing along forced trajectories.
    The trailing integral uses Simpson's rule on each sample interval with the interpolant at the
    midpoint.
    """
    problem = traj.require_problem()
    z = _require_argmin_point(problem, z)
    _check_alpha(traj, params)
    n = traj.dimension

    def integrand(t, x, v):
        u = params.lam(t) * (x - z) + t**params.p * v
        return float(u @ (t**params.p * traj.forcing(t, n)))

    t = traj.times
    ends = np.array([integrand(ti, xi, vi) for ti, xi, vi in zip(t, traj.positions, traj.velocities)])
    mids = np.array([integrand(tm, *traj.state_at(tm)) for tm in 0.5 * (t[:-1] + t[1:])])
    pieces = np.diff(t) / 6.0 * (ends[:-1] + 4.0 * mids + ends[1:])
    trailing = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
    values = energy_values(traj, z, params) + trailing
    violations = monotone_violations(values, ENERGY_SLACK * traj.integrator_tolerance)
    return DiagnosticSeries(f"E_{params.family}_perturbed", t, values, violations)


def save_series(series: DiagnosticSeries, path: str, **metadata) -> str:
    meta = {"series": series.name, **metadata}
    return write_csv(path, meta, ["t", "value"], np.column_stack([series.times, series.values]))
