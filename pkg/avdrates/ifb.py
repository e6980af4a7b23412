import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .diagnostics import DiagnosticSeries
from .dynamics import Forcing
from .problems import PROBLEM_IDS, ProblemSpec, composite_value, get_problem
from .utils import DiagnosticError, as_point, freeze, read_csv, write_csv

logger = logging.getLogger(__name__)

DISCRETE_SLACK = 1e-12
K0_RUN = 100
RATE_FLOOR = 1e-12
CRITICAL_CHECK_FROM = 3


def _slack(*terms) -> float:
    return DISCRETE_SLACK * (1.0 + sum(np.abs(t) for t in terms))


@dataclass(frozen=True, eq=False)
class IterateLog:
    """
    Iterates of the inertial forward-backward scheme. Row k of `xs` is x_k for k = 0..K (x_1 = x_0);
    row k of `ys` is the extrapolated point y_k for k >= 1 (row 0 repeats x_0); `values` holds Θ(x_k).
    """

    alpha: float
    s: float
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    problem: Optional[ProblemSpec] = None
    forcing: Forcing = field(default_factory=Forcing)
    perturbations: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return self.xs.shape[0] - 1

    @property
    def dimension(self) -> int:
        return self.xs.shape[1]

    @property
    def problem_name(self) -> str:
        return self.problem.name if self.problem is not None else "unknown"

    def require_problem(self) -> ProblemSpec:
        if self.problem is None:
            raise ValueError("iterate log carries no problem")
        return self.problem

    def gaps(self) -> np.ndarray:
        return self.values - self.require_problem().require_min_value()

    def differences(self) -> np.ndarray:
        d = np.zeros_like(self.xs)
        d[1:] = np.diff(self.xs, axis=0)
        return d

    def extrapolation(self, k) -> np.ndarray:
        return 1.0 - self.alpha / np.asarray(k, dtype=float)


def _extrapolate(alpha: float, xs: np.ndarray) -> np.ndarray:
    ys = xs.copy()
    k = np.arange(1, xs.shape[0])[:, None]
    ys[1:] = xs[1:] + (1.0 - alpha / k) * (xs[1:] - xs[:-1])
    return ys


def run_ifb(
    spec: ProblemSpec,
    alpha: float,
    s: float,
    x0,
    K: int,
    perturbations: Optional[Forcing] = None,
) -> IterateLog:
    """
    y_k = x_k + (1 − α/k)(x_k − x_{k−1}),  x_{k+1} = prox_{sΨ}(y_k − s∇Φ(y_k) − s g_k)

    for k = 1..K−1 starting from x_1 = x_0. `perturbations` supplies g_k as a forcing evaluated
    at t = k.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    lip = spec.lipschitz
    if not 0 < s <= (1.0 + 1e-12) / lip:
        raise ValueError(f"step s must lie in (0, 1/L] = (0, {1.0 / lip:.6g}], got {s}")
    K = int(K)
    if K < 2:
        raise ValueError(f"K must be at least 2, got {K}")
    n = spec.dimension
    x0 = as_point(x0, n, "x0")
    forcing = perturbations or Forcing.zero()
    gradient = spec.smooth.gradient

    xs = np.empty((K + 1, n))
    ys = np.empty((K + 1, n))
    gs = np.zeros((K + 1, n)) if not forcing.is_zero else None
    xs[0] = xs[1] = ys[0] = x0
    warned = False
    for k in range(1, K + 1):
        y = xs[k] + (1.0 - alpha / k) * (xs[k] - xs[k - 1])
        ys[k] = y
        if k == K:
            break
        if not warned and not spec.smooth.in_region(y):
            logger.warning(
                f"{spec.name}: extrapolated point left the region |x| <= {spec.smooth.region_radius} "
                f"where L={lip} holds (k={k})"
            )
            warned = True
        step = y - s * gradient(y)
        if gs is not None:
            gs[k] = forcing(float(k), n)
            step = step - s * gs[k]
        xs[k + 1] = spec.prox(s, step)
    values = np.array([composite_value(spec, x) for x in xs])
    logger.info(f"ran {K} inertial forward-backward iterations on {spec.name}, alpha={alpha}, s={s:g}")
    return IterateLog(
        alpha=float(alpha),
        s=float(s),
        xs=freeze(xs),
        ys=freeze(ys),
        values=freeze(values),
        problem=spec,
        forcing=forcing,
        perturbations=None if gs is None else freeze(gs),
    )


def gs_operator(spec: ProblemSpec, s: float, y) -> np.ndarray:
    if not 0 < s <= (1.0 + 1e-12) / spec.lipschitz:
        raise ValueError(f"step s must lie in (0, 1/L], got {s}")
    y = as_point(y, spec.dimension, "y")
    return (y - spec.prox(s, y - s * spec.smooth.gradient(y))) / s


def verify_descent_rule(spec: ProblemSpec, s: float, y, x) -> float:
    """Θ(y − sG_s(y)) − [Θ(x) + ⟨G_s(y), y − x⟩ − (s/2)‖G_s(y)‖²]; nonpositive up to roundoff."""
    y = as_point(y, spec.dimension, "y")
    x = as_point(x, spec.dimension, "x")
    g = gs_operator(spec, s, y)
    lhs = composite_value(spec, y - s * g)
    rhs = composite_value(spec, x) + float(g @ (y - x)) - 0.5 * s * float(g @ g)
    return lhs - rhs


def verify_energy_decay(log: IterateLog) -> List[Tuple[int, float]]:
    """k with W_{k+1} − W_k > −(1 − α_k²)‖x_k − x_{k−1}‖²/(2s) beyond slack; returns (k, excess)."""
    w = discrete_W(log)
    d2 = np.sum(log.differences() ** 2, axis=1)
    violations = []
    for k in range(1, log.K):
        ak = 1.0 - log.alpha / k
        rhs = -(1.0 - ak * ak) * d2[k] / (2.0 * log.s)
        excess = (w[k + 1] - w[k]) - rhs
        if excess > _slack(w[k], w[k + 1], rhs):
            violations.append((k, float(excess)))
    return violations


def verify_anchor_inequality(log: IterateLog, z) -> List[Tuple[int, float]]:
    """
    k with h_{k+1} − h_k − α_k(h_k − h_{k−1}) > ½(α_k² + α_k)‖x_k − x_{k−1}‖² − s(Θ(x_{k+1}) − min)
    beyond slack; returns (k, excess).
    """
    problem = log.require_problem()
    z = as_point(z, problem.dimension, "z")
    if not problem.require_argmin().contains(z):
        raise ValueError(f"z={z.tolist()} is not in the argmin set of {problem.name!r}")
    h = anchor_h(log, z)
    gaps = log.gaps()
    d2 = np.sum(log.differences() ** 2, axis=1)
    violations = []
    for k in range(1, log.K):
        ak = 1.0 - log.alpha / k
        lhs = h[k + 1] - h[k] - ak * (h[k] - h[k - 1])
        rhs = 0.5 * (ak * ak + ak) * d2[k] - log.s * gaps[k + 1]
        if lhs - rhs > _slack(h[k + 1], h[k], h[k - 1], rhs):
            violations.append((k, float(lhs - rhs)))
    return violations


def discrete_W(log: IterateLog) -> np.ndarray:
    return log.gaps() + np.sum(log.differences() ** 2, axis=1) / (2.0 * log.s)


def anchor_h(log: IterateLog, z) -> np.ndarray:
    return 0.5 * np.sum((log.xs - np.asarray(z)[None, :]) ** 2, axis=1)


def lyapunov_branch(alpha: float, p: float) -> str:
    """`primary` for ½ ≤ p < min(1, α/3, (α+1)/4), `alternative` for 0 < p < ½ with p < α/3."""
    upper = min(1.0, alpha / 3.0, (alpha + 1.0) / 4.0)
    if 0.5 <= p < upper:
        return "primary"
    if 0 < p < 0.5 and p < alpha / 3.0:
        return "alternative"
    raise ValueError(f"p={p} is not admissible for alpha={alpha} (need 0 < p < min(1, alpha/3, (alpha+1)/4))")


def lyapunov_lambda(alpha: float, p: float, s: float, ks) -> np.ndarray:
    ks = np.asarray(ks, dtype=float)
    scale = 2.0 * p * s ** (-(1.0 - p) / 2.0)
    if lyapunov_branch(alpha, p) == "primary":
        return scale * ks ** (p - 1.0)
    with np.errstate(divide="ignore"):
        lam = scale * (ks - 1.0) ** (2.0 * p - 1.0) / ks**p
    return np.where(ks >= 2, lam, np.nan)


def lyapunov_xi(alpha: float, p: float, s: float, ks) -> np.ndarray:
    """ξ_{k+1} = −λ_{k+1}² − s^{(p−1)/2}(α_k λ_{k+1}(k+1)^p − λ_k k^p), returned at index k."""
    ks = np.asarray(ks, dtype=float)
    lam_k = lyapunov_lambda(alpha, p, s, ks)
    lam_next = lyapunov_lambda(alpha, p, s, ks + 1.0)
    ak = 1.0 - alpha / ks
    return -(lam_next**2) - s ** ((p - 1.0) / 2.0) * (ak * lam_next * (ks + 1.0) ** p - lam_k * ks**p)


def lyapunov_d_sequence(alpha: float, p: float, ks, s: float = 1.0) -> np.ndarray:
    """D_k = ξ_{k+1} s^{1−p}/(2p), asymptotic to (α − 4p + 1) k^{2p−2}; independent of s."""
    return lyapunov_xi(alpha, p, s, ks) * s ** (1.0 - p) / (2.0 * p)


@dataclass(frozen=True, eq=False)
class DiscreteEnergies:
    """Sequences indexed by k = 0..K; entries before `k_start` are NaN."""

    alpha: float
    s: float
    p: float
    branch: str
    k_start: int
    W: np.ndarray
    h: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    E: np.ndarray
    E_tilde: np.ndarray
    scaled_gap: np.ndarray
    k0: Optional[int]
    k_xi: Optional[int]
    k_star: Optional[int]

    @property
    def ks(self) -> np.ndarray:
        return np.arange(self.W.size)


def _first_run_start(ok: np.ndarray, run: int) -> Optional[int]:
    """First index i with ok[i:i+run] all true."""
    count = 0
    for i, flag in enumerate(ok):
        count = count + 1 if flag else 0
        if count >= run:
            return i - run + 1
    return None


def _tail_start(ok: np.ndarray) -> Optional[int]:
    """First index from which ok stays true to the end."""
    bad = np.nonzero(~ok)[0]
    if bad.size == 0:
        return 0
    return None if bad[-1] == ok.size - 1 else int(bad[-1] + 1)


def discrete_lyapunov(log: IterateLog, z, p: float) -> DiscreteEnergies:
    """
    E_k = s^p k^{2p} W_k + s^{(p−1)/2} λ_k k^p (h_k − h_{k−1}) + (λ_k² + ξ_k) h_{k−1} and
    Ẽ_k = E_k − (p/s^{1−p}) k^{2p−1}‖x_k − x_{k−1}‖², with K₀ (first run of K0_RUN nonincreasing
    steps of Ẽ), the index from which ξ_k ≥ 0, and K* from which both hold to the end of the log.
    """
    problem = log.require_problem()
    z = as_point(z, problem.dimension, "z")
    if not problem.require_argmin().contains(z):
        raise ValueError(f"z={z.tolist()} is not in the argmin set of {problem.name!r}")
    alpha, s = log.alpha, log.s
    branch = lyapunov_branch(alpha, p)
    k_start = 2 if branch == "primary" else 3
    K = log.K
    ks = np.arange(K + 1, dtype=float)

    W = discrete_W(log)
    h = anchor_h(log, z)
    d2 = np.sum(log.differences() ** 2, axis=1)
    lam = np.full(K + 1, np.nan)
    xi = np.full(K + 1, np.nan)
    lam[1:] = lyapunov_lambda(alpha, p, s, ks[1:])
    xi[2:] = lyapunov_xi(alpha, p, s, ks[1:-1])

    E = np.full(K + 1, np.nan)
    E_tilde = np.full(K + 1, np.nan)
    k = ks[k_start:]
    E[k_start:] = (
        s**p * k ** (2 * p) * W[k_start:]
        + s ** ((p - 1.0) / 2.0) * lam[k_start:] * k**p * (h[k_start:] - h[k_start - 1 : -1])
        + (lam[k_start:] ** 2 + xi[k_start:]) * h[k_start - 1 : -1]
    )
    E_tilde[k_start:] = E[k_start:] - p / s ** (1.0 - p) * k ** (2 * p - 1) * d2[k_start:]
    scaled_gap = s**p * ks ** (2 * p) * log.gaps()

    tail = E_tilde[k_start:]
    steps_ok = np.diff(tail) <= _slack(tail[:-1])
    run = _first_run_start(steps_ok, K0_RUN)
    k0 = None if run is None else k_start + run
    xi_tail = _tail_start(xi[k_start:] >= 0)
    k_xi = None if xi_tail is None else k_start + xi_tail
    mono_tail = _tail_start(np.append(steps_ok, True))
    k_star = None
    if k_xi is not None and mono_tail is not None:
        k_star = max(k_xi, k_start + mono_tail)
        if k_star >= K:
            k_star = None
    if k0 is None:
        logger.warning(f"no run of {K0_RUN} nonincreasing steps of the corrected energy (alpha={alpha}, p={p})")
    return DiscreteEnergies(
        alpha=alpha,
        s=s,
        p=float(p),
        branch=branch,
        k_start=k_start,
        W=W,
        h=h,
        lam=lam,
        xi=xi,
        E=E,
        E_tilde=E_tilde,
        scaled_gap=scaled_gap,
        k0=k0,
        k_xi=k_xi,
        k_star=k_star,
    )


def discrete_rate_check(energies: DiscreteEnergies, floor: float = RATE_FLOOR) -> List[Tuple[int, float]]:
    """
    k ≥ K* where s^p k^{2p}(Θ(x_k) − min) exceeds max(Ẽ_{K*}, floor); returns (k, excess).
    Raises `DiagnosticError` when the log has no K*, so the bound was never checked.
    """
    if energies.k_star is None:
        raise DiagnosticError(
            f"no index after which the corrected energy is nonincreasing with xi_k >= 0 "
            f"(alpha={energies.alpha}, p={energies.p}, K={energies.ks[-1]:g})"
        )
    k_star = energies.k_star
    bound = max(float(energies.E_tilde[k_star]), floor)
    tail = energies.scaled_gap[k_star:]
    bad = np.nonzero(tail > bound + _slack(bound))[0]
    return [(int(k_star + i), float(tail[i] - bound)) for i in bad]


def critical_energy(
    log: IterateLog, x_star, offset: int = 0, check_from: int = CRITICAL_CHECK_FROM
) -> DiagnosticSeries:
    """
    s(k + 1 − offset)²(Θ(x_k) − min) + 2‖x_k − x* + ((k − 1 − offset)/2)(x_k − x_{k−1})‖² for k ≥ 1.
    Monotonicity is checked on steps k → k + 1 with k ≥ `check_from`; α_k = 1 − 3/k is negative
    before k = 3. offset = 2 gives the index-shifted sequence, nonincreasing from k = 1.
    """
    if not math.isclose(log.alpha, 3.0):
        raise ValueError(f"the critical energy needs alpha = 3, got {log.alpha}")
    if check_from < 1:
        raise ValueError(f"check_from must be at least 1, got {check_from}")
    problem = log.require_problem()
    x_star = as_point(x_star, problem.dimension, "x_star")
    if not problem.require_argmin().contains(x_star):
        raise ValueError(f"x_star={x_star.tolist()} is not in the argmin set of {problem.name!r}")
    k = np.arange(1, log.K + 1, dtype=float)
    gaps = log.gaps()[1:]
    d = log.differences()[1:]
    anchor = log.xs[1:] - x_star[None, :] + ((k - 1.0 - offset) / 2.0)[:, None] * d
    values = log.s * (k + 1.0 - offset) ** 2 * gaps + 2.0 * np.sum(anchor**2, axis=1)
    violations = [
        (int(i + 1), float(values[i + 1] - values[i]))
        for i in range(check_from - 1, values.size - 1)
        if values[i + 1] - values[i] > _slack(values[i])
    ]
    return DiagnosticSeries(f"E_crit_offset{offset}", k, values, violations)


def critical_value_bound(
    log: IterateLog, series: DiagnosticSeries, check_from: int = CRITICAL_CHECK_FROM
) -> Tuple[float, float]:
    """
    (sup_k k²(Θ(x_k) − min), max_{k ≤ check_from} E(k)/s) for the offset-0 critical energy; the bound
    is E(1)/s whenever the energy does not rise before `check_from`.
    """
    k = np.arange(log.K + 1, dtype=float)
    scaled = k[1:] ** 2 * log.gaps()[1:]
    return float(np.max(scaled)), float(np.max(series.values[:check_from]) / log.s)


def iterate_boundedness_check(log: IterateLog) -> Tuple[float, float]:
    norms = np.linalg.norm(log.xs, axis=1)
    k = np.arange(log.K + 1, dtype=float)
    scaled = k * np.linalg.norm(log.differences(), axis=1)
    return float(np.max(norms)), float(np.max(scaled))


@dataclass(frozen=True)
class IteratePass:
    k_enter: int
    k_exit: int
    from_side: str
    entry_value: float
    exit_value: float
    travel: float

    @property
    def decrement(self) -> float:
        return self.entry_value - self.exit_value


def iterate_passes(log: IterateLog, a: float, b: float) -> List[IteratePass]:
    """
    Maximal runs k_e..k_x of extrapolated points y_k in [a, b] entered from one side and left on
    the other. Entry value |(k_e − 1)(x_{k_e} − x_{k_e−1})|, exit value |k_x(x_{k_x+1} − x_{k_x})|.
    """
    if log.dimension != 1:
        raise ValueError(f"passes need 1-D iterates, got dimension {log.dimension}")
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    y = log.ys[:, 0]
    x = log.xs[:, 0]
    last = log.K - 1
    inside = (y >= a) & (y <= b)
    passes = []
    k = 2
    while k <= last:
        if not inside[k] or inside[k - 1]:
            k += 1
            continue
        k_e = k
        while k <= last and inside[k]:
            k += 1
        if k > last:
            break
        k_x = k - 1
        before, after = y[k_e - 1], y[k_x + 1]
        if (before < a and after > b) or (before > b and after < a):
            passes.append(
                IteratePass(
                    k_enter=k_e,
                    k_exit=k_x,
                    from_side="a" if before < a else "b",
                    entry_value=abs((k_e - 1) * (x[k_e] - x[k_e - 1])),
                    exit_value=abs(k_x * (x[k_x + 1] - x[k_x])),
                    travel=float(x[k_x] - x[k_e - 1]),
                )
            )
    return passes


def save_log(log: IterateLog, path: str) -> str:
    n = log.dimension
    columns = ["k"] + [f"x_{i + 1}" for i in range(n)] + ["theta", "dx_norm"]
    metadata = {"problem": log.problem_name, "alpha": log.alpha, "s": log.s, "forcing": log.forcing.describe()}
    data = np.column_stack(
        [np.arange(log.K + 1), log.xs, log.values, np.linalg.norm(log.differences(), axis=1)]
    )
    return write_csv(path, metadata, columns, data)


def load_log(path: str) -> IterateLog:
    metadata, columns, data = read_csv(path)
    if not columns or columns[0] != "k" or columns[-2:] != ["theta", "dx_norm"]:
        raise ValueError(f"{path} is not an iterate log (columns {columns})")
    alpha = float(metadata["alpha"])
    xs = data[:, 1:-2]
    name = metadata.get("problem", "unknown")
    forcing = Forcing.parse(metadata.get("forcing", "zero"))
    perturbations = None
    if not forcing.is_zero:
        # g_k enters steps k = 1..K-1 only
        n, last = xs.shape[1], xs.shape[0] - 1
        perturbations = freeze([forcing(float(k), n) if 1 <= k < last else np.zeros(n) for k in range(last + 1)])
    return IterateLog(
        alpha=alpha,
        s=float(metadata["s"]),
        xs=freeze(xs),
        ys=freeze(_extrapolate(alpha, xs)),
        values=freeze(data[:, -2]),
        problem=get_problem(name) if name in PROBLEM_IDS else None,
        forcing=forcing,
        perturbations=perturbations,
    )


def save_energies(energies: DiscreteEnergies, path: str, crit: Optional[DiagnosticSeries] = None) -> str:
    columns = ["k", "W", "h", "E", "E_tilde"]
    data = [energies.ks, energies.W, energies.h, energies.E, energies.E_tilde]
    if crit is not None:
        columns.append("E_crit")
        data.append(np.concatenate([[np.nan], crit.values]))
    metadata = {"alpha": energies.alpha, "s": energies.s, "p": energies.p, "branch": energies.branch}
    return write_csv(path, metadata, columns, np.column_stack(data))
