import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .diagnostics import (
    ENERGY_SLACK,
    DiagnosticSeries,
    LyapunovParams,
    energy_values,
    rate_bound_constant,
)
from .dynamics import CrossingEvent, Forcing, Trajectory, crossing_events, integrate
from .ifb import IterateLog, iterate_passes
from .problems import make_flat_bottom
from .utils import DiagnosticError, jsonable, tail_window, unjson_float, window_mask

logger = logging.getLogger(__name__)

MIN_FIT_SAMPLES = 20
RATE_FLOOR = 1e-12
TAIL_GROWTH = 1.1
LOOP_TOLERANCE = 0.10
PASS_TOLERANCE = 0.15


@dataclass
class RateReport:
    """
    Outcome of one rate verification.

    `fitted_exponent` is the log-log slope (negative for decay, −inf when the minimum is attained);
    `theoretical_exponent` is the guaranteed decay rate (positive); `window` is the time or index
    range used for the fit.
    """

    quantity: str
    alpha: float
    fitted_exponent: float = math.nan
    halfwidth: float = math.nan
    theoretical_exponent: float = math.nan
    bound_constant: Optional[float] = None
    bound_satisfied: bool = True
    window: Tuple[float, float] = (math.nan, math.nan)
    little_o: Optional[bool] = None
    note: str = ""
    details: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return jsonable(asdict(self))

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "RateReport":
        bound = payload.get("bound_constant")
        return cls(
            quantity=payload["quantity"],
            alpha=unjson_float(payload["alpha"]),
            fitted_exponent=unjson_float(payload["fitted_exponent"]),
            halfwidth=unjson_float(payload["halfwidth"]),
            theoretical_exponent=unjson_float(payload["theoretical_exponent"]),
            bound_constant=None if bound is None else unjson_float(bound),
            bound_satisfied=bool(payload["bound_satisfied"]),
            window=tuple(unjson_float(v) for v in payload["window"]),
            little_o=payload.get("little_o"),
            note=payload.get("note", ""),
            details=dict(payload.get("details", {})),
        )


def _slope(times: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    if times.size < MIN_FIT_SAMPLES:
        raise ValueError(f"power-law fit needs at least {MIN_FIT_SAMPLES} samples, got {times.size}")
    coeffs, cov = np.polyfit(np.log(times), np.log(values), 1, cov=True)
    return float(coeffs[0]), float(1.96 * math.sqrt(max(cov[0, 0], 0.0)))


def _local_maxima(values: np.ndarray) -> np.ndarray:
    inner = (values[1:-1] > values[:-2]) & (values[1:-1] >= values[2:])
    return np.nonzero(inner)[0] + 1


def envelope(times: np.ndarray, values: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Block maxima over consecutive blocks of one period, the period being the median spacing of the
    local maxima. None when the series has fewer than two local maxima.
    """
    peaks = _local_maxima(values)
    if peaks.size < 2:
        return None
    period = float(np.median(np.diff(times[peaks])))
    block = np.floor((times - times[0]) / period).astype(int)
    env_t, env_v = [], []
    for b in np.unique(block):
        idx = np.nonzero(block == b)[0]
        j = idx[np.argmax(values[idx])]
        env_t.append(times[j])
        env_v.append(values[j])
    return np.array(env_t), np.array(env_v)


def fit_power_law(
    series: DiagnosticSeries,
    window: Optional[Tuple[float, float]] = None,
    envelope_fit: Optional[bool] = None,
) -> Tuple[float, float]:
    """
    Least-squares slope of log(value) against log(t) on `window`, with a 95% halfwidth.

    `envelope_fit=True` fits block maxima (oscillatory series), `None` does so when the window
    holds at least three local maxima.
    """
    times, values = np.asarray(series.times), np.asarray(series.values)
    if window is not None:
        mask = window_mask(times, window)
        times, values = times[mask], values[mask]
    if np.any(values <= 0):
        raise ValueError(f"power-law fit of {series.name} needs positive values")
    if envelope_fit is None:
        envelope_fit = _local_maxima(values).size >= 3
    if envelope_fit:
        env = envelope(times, values)
        if env is None:
            logger.warning(f"{series.name}: no oscillation detected, fitting the plain series")
        else:
            times, values = env
    return _slope(times, values)


def _fit_or_note(series: DiagnosticSeries, window) -> Tuple[float, float, str]:
    mask = window_mask(series.times, window)
    if mask.any() and np.all(series.values[mask] <= 0):
        return -math.inf, 0.0, "minimum attained"
    try:
        slope, half = fit_power_law(series, window)
        return slope, half, ""
    except ValueError as err:
        return math.nan, math.nan, f"fit skipped: {err}"


def _decade_bounded(times: np.ndarray, scaled: np.ndarray, floor: float = RATE_FLOOR) -> Tuple[bool, float, float]:
    """sup over the last decade against TAIL_GROWTH times the sup over the decade before."""
    hi = times[-1]
    tail = times >= hi / 10.0
    prev = (times >= hi / 100.0) & ~tail
    if not prev.any():
        prev = ~tail
    sup_tail = float(np.max(scaled[tail]))
    sup_prev = float(np.max(scaled[prev])) if prev.any() else sup_tail
    return sup_tail <= TAIL_GROWTH * sup_prev + floor, sup_tail, sup_prev


def _prefix_bounded(scaled: np.ndarray, floor: float = RATE_FLOOR) -> Tuple[bool, float, float]:
    """
    sup over k in [K/10, K] against TAIL_GROWTH times the same sup for the first half of the log,
    which is the run with K/2 iterations.
    """
    K = scaled.size - 1
    sup_all = float(np.max(scaled[max(1, K // 10) :]))
    sup_half = float(np.max(scaled[max(1, K // 20) : K // 2 + 1]))
    return sup_all <= TAIL_GROWTH * sup_half + floor, sup_all, sup_half


def _continuous_value_rate(traj: Trajectory) -> RateReport:
    problem = traj.require_problem()
    alpha = traj.alpha
    gaps = traj.phi_values() - problem.require_min_value()
    window = tail_window(traj.t0, traj.t_end, decades=2.0)
    slope, half, note = _fit_or_note(DiagnosticSeries("value_gap", traj.times, gaps), window)
    rate = 2.0 * min(1.0, alpha / 3.0)
    if alpha <= 3:
        bound = rate_bound_constant(problem, traj.positions[0], traj.velocities[0], traj.t0, alpha)
    else:
        z = problem.require_argmin().project(traj.positions[0])
        bound = float(energy_values(traj, z, LyapunovParams.family_a(alpha))[0])
    scaled = traj.times**rate * gaps
    slack = ENERGY_SLACK * traj.integrator_tolerance * (1.0 + bound)
    satisfied = bool(np.max(scaled) <= bound + slack)
    little_o = None
    if alpha > 3:
        _, sup_tail, sup_prev = _decade_bounded(traj.times, scaled)
        little_o = sup_tail < sup_prev
    return RateReport(
        quantity="value",
        alpha=alpha,
        fitted_exponent=slope,
        halfwidth=half,
        theoretical_exponent=rate,
        bound_constant=bound,
        bound_satisfied=satisfied,
        window=window,
        little_o=little_o,
        note=note,
        details={
            "sup_scaled_gap": float(np.max(scaled)),
            "exponent_consistent": bool(not slope > -rate + 0.1),
        },
    )


def _discrete_value_rate(log: IterateLog, p: Optional[float]) -> RateReport:
    alpha = log.alpha
    p = min(2.0 * alpha / 3.0, 2.0) - 0.1 if p is None else p
    if not (0 < p < 2.0 * alpha / 3.0 and p <= 2.0):
        raise ValueError(f"discrete value rate needs 0 < p < 2 alpha/3 and p <= 2, got p={p}, alpha={alpha}")
    ks = np.arange(log.K + 1, dtype=float)
    gaps = np.maximum(log.gaps(), 0.0)
    window = (max(1.0, log.K / 100.0), float(log.K))
    slope, half, note = _fit_or_note(DiagnosticSeries("value_gap", ks[1:], gaps[1:]), window)
    ok, sup_all, sup_half = _prefix_bounded(ks**p * gaps)
    return RateReport(
        quantity="discrete_value",
        alpha=alpha,
        fitted_exponent=slope,
        halfwidth=half,
        theoretical_exponent=p,
        bound_constant=TAIL_GROWTH * sup_half + RATE_FLOOR,
        bound_satisfied=ok,
        window=window,
        note=note,
        details={"sup_scaled_gap": sup_all, "sup_scaled_gap_first_half": sup_half},
    )


def verify_value_rate(run: Union[Trajectory, IterateLog], p: Optional[float] = None) -> RateReport:
    """
    Continuous runs: sup_t t^{2 min(1, α/3)}(Φ − min) against C (α ≤ 3) or the energy at t0 (α > 3),
    plus the fitted tail exponent. Iterate logs: k^p(Θ(x_k) − min) stays bounded (its sup over the
    log is within TAIL_GROWTH of the sup over the first half).
    """
    if isinstance(run, IterateLog):
        return _discrete_value_rate(run, p)
    return _continuous_value_rate(run)


def speed_exponent(alpha: float) -> float:
    return 1.0 if alpha >= 3 else (alpha - 1.0) / 2.0 - 0.05


def verify_speed_rate(traj: Trajectory) -> RateReport:
    alpha = traj.alpha
    speed = np.linalg.norm(traj.velocities, axis=1)
    window = tail_window(traj.t0, traj.t_end)
    slope, half, note = _fit_or_note(DiagnosticSeries("speed", traj.times, speed), window)
    if alpha < 1:
        return RateReport(
            quantity="speed",
            alpha=alpha,
            fitted_exponent=slope,
            halfwidth=half,
            window=window,
            note="no pointwise speed rate below alpha = 1; reported only",
        )
    q = speed_exponent(alpha)
    scaled = traj.times**q * speed
    ok, sup_tail, sup_prev = _decade_bounded(traj.times, scaled)
    return RateReport(
        quantity="speed",
        alpha=alpha,
        fitted_exponent=slope,
        halfwidth=half,
        theoretical_exponent=q,
        bound_constant=TAIL_GROWTH * sup_prev + RATE_FLOOR,
        bound_satisfied=ok,
        window=window,
        little_o=(sup_tail < sup_prev) if alpha > 3 else None,
        note=note,
        details={"sup_tail": sup_tail, "sup_previous_decade": sup_prev},
    )


@dataclass
class LoopReport:
    decrements: List[float]
    required: float
    satisfied: bool
    note: str = ""
    details: Dict[str, object] = field(default_factory=dict)


def _passes(events: List[CrossingEvent]) -> List[Tuple[CrossingEvent, CrossingEvent]]:
    passes = []
    for first, second in zip(events, events[1:]):
        if first.direction == "enter" and second.direction == "leave" and first.side != second.side:
            passes.append((first, second))
    return passes


def loop_decrement(events: List[CrossingEvent], alpha: float, a: float, b: float) -> LoopReport:
    """
    Decrease of |t ẋ| over each pair of consecutive passes through [a, b] (a loop), required to be
    at least (1 − LOOP_TOLERANCE)·2(α − 1)(b − a).
    """
    required = (1.0 - LOOP_TOLERANCE) * 2.0 * (alpha - 1.0) * (b - a)
    passes = _passes(events)
    decrements = [
        first[0].scaled_speed - second[1].scaled_speed for first, second in zip(passes, passes[1:])
    ]
    if not decrements:
        return LoopReport([], required, True, note="no loops detected")
    return LoopReport(
        decrements,
        required,
        all(d >= required for d in decrements),
        details={"passes": len(passes)},
    )


def discrete_pass_decrement(log: IterateLog, a: float, b: float) -> LoopReport:
    """
    Per pass through [a, b], the decrease of |k(x_{k+1} − x_k)|, which equals (α − 1) times the
    distance travelled; each must be within PASS_TOLERANCE of (α − 1)(b − a).
    """
    target = (log.alpha - 1.0) * (b - a)
    passes = iterate_passes(log, a, b)
    if not passes:
        return LoopReport([], target, True, note="no passes detected")
    decrements = [p.decrement for p in passes]
    identity_gap = max(abs(p.decrement - (log.alpha - 1.0) * abs(p.travel)) for p in passes)
    within = all(abs(d - target) <= PASS_TOLERANCE * target for d in decrements)
    return LoopReport(decrements, target, within, details={"passes": len(passes), "identity_gap": identity_gap})


def find_looping_initial_condition(
    a: float,
    b: float,
    alpha: float,
    min_loops: int = 2,
    t_end: float = 200.0,
    tol: float = 1e-9,
) -> Tuple[float, float, Trajectory, LoopReport]:
    """
    Scan x0 = b + 1, ..., b + 10 released at rest, then the interval midpoint with v0 = 5, ..., 50,
    on the flat-bottom problem; the first start with at least `min_loops` loops wins.
    """
    spec = make_flat_bottom(a, b)
    candidates = [(b + j, 0.0) for j in range(1, 11)]
    candidates += [(0.5 * (a + b), 5.0 * j) for j in range(1, 11)]
    for x0, v0 in candidates:
        traj = integrate(spec, alpha, [x0], [v0], t_end=t_end, tol=tol, num_samples=4000)
        report = loop_decrement(crossing_events(traj, a, b), alpha, a, b)
        logger.debug(f"loop search x0={x0} v0={v0}: {len(report.decrements)} loops")
        if len(report.decrements) >= min_loops:
            report.details.update({"x0": x0, "v0": v0})
            return x0, v0, traj, report
    raise DiagnosticError(f"no start with {min_loops} loops found for alpha={alpha} on [{a}, {b}]")


def strong_min_rates(traj: Trajectory) -> Tuple[RateReport, RateReport, RateReport]:
    """
    Value, squared distance and speed rates under a strong minimum: t^{r}(Φ − min) ≤ C,
    t^{r}dist² ≤ (2/μ)C and t^{r/2}‖ẋ‖ bounded on the tail, r = 2 min(1, α/3).
    """
    problem = traj.require_problem()
    if problem.strong_min_modulus is None:
        raise ValueError(f"problem {problem.name!r} declares no strong-minimum modulus")
    mu = problem.strong_min_modulus
    value = _continuous_value_rate(traj)
    rate = value.theoretical_exponent
    argmin = problem.require_argmin()
    dist2 = np.array([argmin.distance(x) ** 2 for x in traj.positions])
    gaps = traj.phi_values() - problem.require_min_value()
    growth_slack = 1e-9 * (1.0 + np.abs(gaps))
    growth_ok = bool(np.all(dist2 <= (2.0 / mu) * gaps + growth_slack))
    scaled = traj.times**rate * dist2
    dist_bound = 2.0 / mu * value.bound_constant
    window = value.window
    slope, half, note = _fit_or_note(DiagnosticSeries("dist2", traj.times, dist2), window)
    distance = RateReport(
        quantity="distance",
        alpha=traj.alpha,
        fitted_exponent=slope,
        halfwidth=half,
        theoretical_exponent=rate,
        bound_constant=dist_bound,
        bound_satisfied=bool(np.max(scaled) <= dist_bound * (1.0 + 1e-9) + RATE_FLOOR) and growth_ok,
        window=window,
        note=note,
        details={"growth_inequality": growth_ok, "sup_scaled_dist2": float(np.max(scaled))},
    )
    speed_norm = np.linalg.norm(traj.velocities, axis=1)
    ok, sup_tail, sup_prev = _decade_bounded(traj.times, traj.times ** (rate / 2.0) * speed_norm)
    slope, half, note = _fit_or_note(DiagnosticSeries("speed", traj.times, speed_norm), window)
    speed = RateReport(
        quantity="strong_speed",
        alpha=traj.alpha,
        fitted_exponent=slope,
        halfwidth=half,
        theoretical_exponent=rate / 2.0,
        bound_constant=TAIL_GROWTH * sup_prev + RATE_FLOOR,
        bound_satisfied=ok,
        window=window,
        note=note,
        details={"sup_tail": sup_tail, "sup_previous_decade": sup_prev},
    )
    return value, distance, speed


def verify_perturbed_rate(run: Union[Trajectory, IterateLog], p: float) -> RateReport:
    """
    Under ∫ t^p ‖g‖ < ∞ (or Σ k^p ‖g_k‖ < ∞): t^{2p}(Φ − min) stays bounded on the tail for
    trajectories, k^p(Θ(x_k) − min) for iterate logs.
    """
    forcing: Forcing = run.forcing
    if not forcing.is_integrable(p):
        raise ValueError(f"forcing {forcing.describe()} is not integrable against t^{p}")
    if isinstance(run, IterateLog):
        report = _discrete_value_rate(run, p)
        report.quantity = "perturbed_discrete_value"
        report.details["forcing"] = forcing.describe()
        return report
    problem = run.require_problem()
    gaps = run.phi_values() - problem.require_min_value()
    scaled = run.times ** (2.0 * p) * gaps
    ok, sup_tail, sup_prev = _decade_bounded(run.times, scaled)
    window = tail_window(run.t0, run.t_end, decades=2.0)
    slope, half, note = _fit_or_note(DiagnosticSeries("value_gap", run.times, gaps), window)
    return RateReport(
        quantity="perturbed_value",
        alpha=run.alpha,
        fitted_exponent=slope,
        halfwidth=half,
        theoretical_exponent=2.0 * p,
        bound_constant=TAIL_GROWTH * sup_prev + RATE_FLOOR,
        bound_satisfied=ok,
        window=window,
        note=note,
        details={"forcing": forcing.describe(), "sup_tail": sup_tail, "sup_previous_decade": sup_prev},
    )


@dataclass
class GronwallReport:
    hypothesis_holds: bool
    violations: List[Tuple[int, float]]

    @property
    def satisfied(self) -> bool:
        return not self.hypothesis_holds or not self.violations


def gronwall_check(times, w, m, c: float, rtol: float = 1e-9) -> GronwallReport:
    """
    If ½w(t)² ≤ ½c² + ∫_{t0}^t m w at every sample, then |w(t)| ≤ c + ∫_{t0}^t m; returns the
    samples where the conclusion fails, with excess.
    """
    times = np.asarray(times, dtype=float)
    w = np.asarray(w, dtype=float)
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ValueError("gronwall_check needs m >= 0")
    mw = cumulative_trapezoid(m * w, times, initial=0.0)
    mi = cumulative_trapezoid(m, times, initial=0.0)
    hypothesis = 0.5 * w**2 <= 0.5 * c**2 + mw + rtol * (1.0 + 0.5 * w**2)
    bound = c + mi
    excess = np.abs(w) - bound
    bad = np.nonzero(excess > rtol * (1.0 + bound))[0]
    return GronwallReport(bool(np.all(hypothesis)), [(int(i), float(excess[i])) for i in bad])


def perturbed_gronwall(traj: Trajectory, z, params: LyapunovParams) -> GronwallReport:
    """Gronwall check on w = ‖λ(x − z) + t^p ẋ‖, m = ‖t^p g‖, c = √(2E(t0))."""
    t = traj.times
    u = params.lam(t)[:, None] * (traj.positions - np.asarray(z)[None, :]) + (t**params.p)[:, None] * traj.velocities
    g = traj.forcing_values()
    e0 = float(energy_values(traj, np.asarray(z, dtype=float), params)[0])
    return gronwall_check(t, np.linalg.norm(u, axis=1), np.linalg.norm((t**params.p)[:, None] * g, axis=1), math.sqrt(2 * e0))
