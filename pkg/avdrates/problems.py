import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import mpmath
import numpy as np

from .utils import DiagnosticError, SeriesError, as_point

logger = logging.getLogger(__name__)

SERIES_TOL = 1e-16
SERIES_MAX_TERMS = 2000


@dataclass(frozen=True)
class SmoothObjective:
    """
    Differentiable convex part Φ of the objective.

    Args:
        dimension (`int`): Dimension of the ambient space R^n.
        value (`Callable`): Φ, point -> float.
        gradient (`Callable`): ∇Φ, point -> vector.
        lipschitz_bound (`float`): Lipschitz constant L of ∇Φ, valid on the sup-norm ball of radius
            `region_radius` around the origin.
        region_radius (`float`): Radius of that ball. `inf` when L is global.
    """

    dimension: int
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    lipschitz_bound: float
    region_radius: float = math.inf

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(f"dimension must be positive, got {self.dimension}")
        if not self.lipschitz_bound > 0:
            raise ValueError(f"lipschitz_bound must be positive, got {self.lipschitz_bound}")
        if not self.region_radius > 0:
            raise ValueError(f"region_radius must be positive, got {self.region_radius}")

    def in_region(self, x: np.ndarray) -> bool:
        return bool(np.max(np.abs(x)) <= self.region_radius)


@dataclass(frozen=True)
class NonsmoothObjective:
    """
    Proper lower-semicontinuous convex part Ψ, given through its value (possibly +inf)
    and its proximal map `prox(step, x)`.
    """

    dimension: int
    value: Callable[[np.ndarray], float]
    prox: Callable[[float, np.ndarray], np.ndarray]
    name: str = "nonsmooth"


@dataclass(frozen=True)
class ArgminSet:
    """
    Descriptor of S = argmin Θ: a single point, an interval [lower, upper] in 1-D, or the affine
    set point + span(directions) with orthonormal directions.
    """

    kind: str
    point: Tuple[float, ...]
    lower: float = math.nan
    upper: float = math.nan
    directions: Tuple[Tuple[float, ...], ...] = ()

    def __post_init__(self):
        if self.kind not in ("point", "interval", "affine"):
            raise ValueError(f"unknown argmin kind {self.kind!r}")
        if self.kind == "interval" and not self.lower < self.upper:
            raise ValueError(f"interval argmin needs lower < upper, got [{self.lower}, {self.upper}]")

    @classmethod
    def single(cls, point: Sequence[float]) -> "ArgminSet":
        return cls(kind="point", point=tuple(float(v) for v in point))

    @classmethod
    def interval(cls, lower: float, upper: float) -> "ArgminSet":
        return cls(kind="interval", point=(float(lower),), lower=float(lower), upper=float(upper))

    @classmethod
    def affine(cls, point: Sequence[float], directions: np.ndarray) -> "ArgminSet":
        basis, _ = np.linalg.qr(np.atleast_2d(np.asarray(directions, dtype=float)).T)
        return cls(
            kind="affine",
            point=tuple(float(v) for v in point),
            directions=tuple(tuple(float(v) for v in col) for col in basis.T),
        )

    def project(self, x) -> np.ndarray:
        x = as_point(x, len(self.point))
        if self.kind == "point":
            return np.array(self.point)
        if self.kind == "interval":
            return np.clip(x, self.lower, self.upper)
        p = np.array(self.point)
        basis = np.array(self.directions).T
        return p + basis @ (basis.T @ (x - p))

    def distance(self, x) -> float:
        x = as_point(x, len(self.point))
        return float(np.linalg.norm(x - self.project(x)))

    def contains(self, z, tol: float = 1e-9) -> bool:
        return self.distance(z) <= tol

    def sample(self, rng: np.random.Generator, count: int, spread: float = 1.0) -> np.ndarray:
        if self.kind == "point":
            return np.tile(np.array(self.point), (count, 1))
        if self.kind == "interval":
            return rng.uniform(self.lower, self.upper, size=(count, 1))
        basis = np.array(self.directions).T
        coeffs = rng.normal(scale=spread, size=(count, basis.shape[1]))
        return np.array(self.point)[None, :] + coeffs @ basis.T


@dataclass(frozen=True)
class ProblemSpec:
    """
    Composite objective Θ = Φ + Ψ with optional analytic ground truth.

    Args:
        name (`str`): Catalog id or a free label.
        smooth (`SmoothObjective`): Φ.
        nonsmooth (`NonsmoothObjective`, *optional*): Ψ. `None` means Ψ = 0 with identity prox.
        min_value (`float`, *optional*): min Θ.
        argmin_set (`ArgminSet`, *optional*): S = argmin Θ.
        strong_min_modulus (`float`, *optional*): μ with Θ(x) ≥ min Θ + μ/2 dist(x, S)².
        default_start (`tuple`, *optional*): start point used when none is configured.
    """

    name: str
    smooth: SmoothObjective
    nonsmooth: Optional[NonsmoothObjective] = None
    min_value: Optional[float] = None
    argmin_set: Optional[ArgminSet] = None
    strong_min_modulus: Optional[float] = None
    default_start: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.nonsmooth is not None and self.nonsmooth.dimension != self.smooth.dimension:
            raise ValueError("smooth and nonsmooth parts have different dimensions")
        if self.strong_min_modulus is not None and not self.strong_min_modulus > 0:
            raise ValueError(f"strong_min_modulus must be positive, got {self.strong_min_modulus}")

    @property
    def dimension(self) -> int:
        return self.smooth.dimension

    @property
    def lipschitz(self) -> float:
        return self.smooth.lipschitz_bound

    @property
    def is_smooth(self) -> bool:
        return self.nonsmooth is None

    def prox(self, step: float, x: np.ndarray) -> np.ndarray:
        if self.nonsmooth is None:
            return x
        return self.nonsmooth.prox(step, x)

    def require_min_value(self) -> float:
        if self.min_value is None:
            raise ValueError(f"problem {self.name!r} declares no min_value")
        return self.min_value

    def require_argmin(self) -> ArgminSet:
        if self.argmin_set is None:
            raise ValueError(f"problem {self.name!r} declares no argmin_set")
        return self.argmin_set

    def start(self) -> np.ndarray:
        if self.default_start is None:
            return np.zeros(self.dimension)
        return np.array(self.default_start, dtype=float)


def composite_value(spec: ProblemSpec, x) -> float:
    x = as_point(x, spec.dimension)
    value = float(spec.smooth.value(x))
    if spec.nonsmooth is not None:
        value += float(spec.nonsmooth.value(x))
    return value


def check_gradient(spec: ProblemSpec, x, h: float = 1e-5) -> float:
    """Worst componentwise relative error of ∇Φ(x) against central differences of Φ."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = as_point(x, spec.dimension)
    grad = np.asarray(spec.smooth.gradient(x), dtype=float)
    fd = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (spec.smooth.value(x + e) - spec.smooth.value(x - e)) / (2.0 * h)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(fd))):
        raise DiagnosticError(f"nonfinite gradient check at x={x.tolist()}: grad={grad}, fd={fd}")
    return float(np.max(np.abs(fd - grad) / np.maximum(1.0, np.abs(grad))))


def prox_l1(step: float, weight: float, x) -> np.ndarray:
    if not step > 0:
        raise ValueError(f"prox step must be positive, got {step}")
    if weight < 0:
        raise ValueError(f"l1 weight must be nonnegative, got {weight}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - step * weight, 0.0)


def project_box(x, lower: float, upper: float) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=float), lower, upper)


def _l1_value(weight, x):
    return weight * float(np.sum(np.abs(x)))


def _l1_prox(weight, step, x):
    return prox_l1(step, weight, x)


def _indicator_value(lower, upper, x):
    x = np.asarray(x)
    return 0.0 if np.all((x >= lower) & (x <= upper)) else math.inf


def _indicator_prox(lower, upper, step, x):
    if not step > 0:
        raise ValueError(f"prox step must be positive, got {step}")
    return project_box(x, lower, upper)


def make_l1(weight: float = 1.0, dimension: int = 1) -> NonsmoothObjective:
    if weight < 0:
        raise ValueError(f"l1 weight must be nonnegative, got {weight}")
    return NonsmoothObjective(
        dimension=dimension,
        value=partial(_l1_value, weight),
        prox=partial(_l1_prox, weight),
        name=f"l1[{weight}]",
    )


def make_indicator(lower: float, upper: float = math.inf, dimension: int = 1) -> NonsmoothObjective:
    if not lower <= upper:
        raise ValueError(f"empty box [{lower}, {upper}]")
    return NonsmoothObjective(
        dimension=dimension,
        value=partial(_indicator_value, lower, upper),
        prox=partial(_indicator_prox, lower, upper),
        name=f"indicator[{lower},{upper}]",
    )


def _quadratic_value(matrix, center, x):
    d = x - center
    return 0.5 * float(d @ (matrix @ d))


def _quadratic_gradient(matrix, center, x):
    return matrix @ (x - center)


def make_quadratic(
    matrix,
    center=None,
    name: str = "quadratic",
    nonsmooth: Optional[NonsmoothObjective] = None,
    default_start: Optional[Sequence[float]] = None,
) -> ProblemSpec:
    """
    Φ(x) = ½ (x − c)ᵀ A (x − c) with A symmetric positive semidefinite. L and μ come from the
    spectrum of A; the null space of A spans the argmin when A is singular. Ground truth is only
    attached when Ψ is absent.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1] or not np.allclose(matrix, matrix.T):
        raise ValueError("quadratic matrix must be square and symmetric")
    n = matrix.shape[0]
    center = np.zeros(n) if center is None else as_point(center, n, "center")
    eigvals, eigvecs = np.linalg.eigh(matrix)
    if eigvals[0] < -1e-12 * max(1.0, eigvals[-1]):
        raise ValueError(f"quadratic matrix is not positive semidefinite (min eigenvalue {eigvals[0]})")
    lipschitz = float(eigvals[-1])
    null = eigvals <= 1e-12 * lipschitz
    smooth = SmoothObjective(
        dimension=n,
        value=partial(_quadratic_value, matrix, center),
        gradient=partial(_quadratic_gradient, matrix, center),
        lipschitz_bound=lipschitz,
    )
    if nonsmooth is not None:
        return ProblemSpec(name=name, smooth=smooth, nonsmooth=nonsmooth, default_start=_tuple(default_start))
    if np.any(null):
        argmin = ArgminSet.affine(center, eigvecs[:, null].T)
    else:
        argmin = ArgminSet.single(center)
    return ProblemSpec(
        name=name,
        smooth=smooth,
        min_value=0.0,
        argmin_set=argmin,
        strong_min_modulus=float(np.min(eigvals[~null])),
        default_start=_tuple(default_start),
    )


def _flat_value(a, b, x):
    d = max(0.0, a - x[0], x[0] - b)
    return 0.5 * d * d


def _flat_gradient(a, b, x):
    if x[0] > b:
        return np.array([x[0] - b])
    if x[0] < a:
        return np.array([x[0] - a])
    return np.zeros(1)


def make_flat_bottom(a: float = 0.0, b: float = 1.0) -> ProblemSpec:
    """Φ(x) = ½ dist(x, [a, b])², the C¹ convex function with argmin [a, b]."""
    if not a < b:
        raise ValueError(f"flat-bottom needs a < b, got a={a}, b={b}")
    smooth = SmoothObjective(
        dimension=1,
        value=partial(_flat_value, float(a), float(b)),
        gradient=partial(_flat_gradient, float(a), float(b)),
        lipschitz_bound=1.0,
    )
    return ProblemSpec(
        name="flat-bottom",
        smooth=smooth,
        min_value=0.0,
        argmin_set=ArgminSet.interval(a, b),
        default_start=(b + 2.0 * (b - a),),
    )


def _quartic_value(x):
    return 0.25 * float(np.sum(x**4))


def _quartic_gradient(x):
    return x**3


def make_quartic(radius: float = 2.0) -> ProblemSpec:
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    smooth = SmoothObjective(
        dimension=1,
        value=_quartic_value,
        gradient=_quartic_gradient,
        lipschitz_bound=3.0 * radius**2,
        region_radius=radius,
    )
    return ProblemSpec(
        name="quartic",
        smooth=smooth,
        min_value=0.0,
        argmin_set=ArgminSet.single([0.0]),
        default_start=(1.0,),
    )


def make_lasso(center: float = 2.0, weight: float = 1.0) -> ProblemSpec:
    """1-D LASSO ½(x − c)² + w|x|; the minimiser is the soft threshold of c."""
    spec = make_quadratic([[1.0]], [center], name="lasso-small", nonsmooth=make_l1(weight, 1))
    x_star = float(prox_l1(1.0, weight, np.array([center]))[0])
    min_value = 0.5 * (x_star - center) ** 2 + weight * abs(x_star)
    return ProblemSpec(
        name="lasso-small",
        smooth=spec.smooth,
        nonsmooth=spec.nonsmooth,
        min_value=min_value,
        argmin_set=ArgminSet.single([x_star]),
        strong_min_modulus=1.0,
        default_start=(-2.0,),
    )


def _tuple(values) -> Optional[Tuple[float, ...]]:
    return None if values is None else tuple(float(v) for v in values)


CATALOG: Dict[str, Callable[[], ProblemSpec]] = {
    "quadratic": lambda: make_quadratic([[1.0]], name="quadratic", default_start=[1.0]),
    "aniso-quadratic": lambda: make_quadratic(
        np.diag([1.0, 0.1, 0.0]), name="aniso-quadratic", default_start=[1.0, 1.0, 1.0]
    ),
    "flat-bottom": lambda: make_flat_bottom(0.0, 1.0),
    "lasso-small": make_lasso,
    "quartic": make_quartic,
    "strong-quad": lambda: make_quadratic(
        [[1.0, 0.4], [0.4, 0.5]], name="strong-quad", default_start=[1.0, -1.0]
    ),
}

PROBLEM_IDS = tuple(CATALOG)
SMOOTH_PROBLEM_IDS = tuple(k for k in CATALOG if k != "lasso-small")


def get_problem(problem_id: str) -> ProblemSpec:
    try:
        return CATALOG[problem_id]()
    except KeyError:
        raise ValueError(f"unknown problem {problem_id!r}; choose one of {', '.join(PROBLEM_IDS)}") from None


def bessel_series(nu: float, t: float, max_terms: int = SERIES_MAX_TERMS) -> float:
    """
    S_ν(t) = 2^ν Γ(ν+1) J_ν(t) / t^ν = Σ_m (−t²/4)^m Γ(ν+1) / (m! Γ(m+ν+1)), with S_ν(0) = 1.

    Summed in mpmath with enough working digits to absorb the cancellation between terms (the
    largest term is about e^t). Summation stops once terms decrease and drop below SERIES_TOL; the
    tail is then alternating with decreasing magnitude, so the truncation error is below SERIES_TOL.
    """
    if not nu > -1:
        raise ValueError(f"series order must exceed -1, got {nu}")
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if t == 0:
        return 1.0
    digits = 30 + int(t / math.log(10))
    with mpmath.workdps(digits):
        q = -(mpmath.mpf(t) ** 2) / 4
        nu_mp = mpmath.mpf(nu)
        term = mpmath.mpf(1)
        total = mpmath.mpf(1)
        for m in range(max_terms):
            term *= q / ((m + 1) * (m + 1 + nu_mp))
            total += term
            if abs(term) < SERIES_TOL and (m + 2) * (m + 2 + nu) > t * t / 4:
                return float(total)
    raise SeriesError(f"series for order {nu} at t={t} did not converge within {max_terms} terms")


def _bessel_scaled(values, t, x0):
    x0 = as_point(x0, name="x0")
    out = np.asarray(values, dtype=float)[:, None] * x0[None, :]
    return out[0] if np.ndim(t) == 0 else out


def bessel_solution(alpha: float, x0, t) -> np.ndarray:
    """Closed-form solution for Φ = ½‖x‖², x(0) = x0, ẋ(0) = 0. Scalar t -> point, array t -> rows."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    nu = (alpha - 1.0) / 2.0
    return _bessel_scaled([bessel_series(nu, ti) for ti in ts], t, x0)


def bessel_velocity(alpha: float, x0, t) -> np.ndarray:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    nu = (alpha - 1.0) / 2.0
    values = [-ti / (alpha + 1.0) * bessel_series(nu + 1.0, ti) for ti in ts]
    return _bessel_scaled(values, t, x0)


def prox_residual(nonsmooth: NonsmoothObjective, step: float, x, candidates) -> float:
    """Largest amount by which prox(step, x) fails to beat a candidate on Ψ(ξ) + ‖ξ − x‖²/(2 step)."""
    x = as_point(x, nonsmooth.dimension)
    p = nonsmooth.prox(step, x)

    def objective(xi):
        return nonsmooth.value(xi) + float(np.sum((xi - x) ** 2)) / (2.0 * step)

    best = objective(p)
    gaps = [best - objective(xi) for xi in np.atleast_2d(candidates)]
    return float(max(gaps)) if gaps else -math.inf


def validate_problem(spec: ProblemSpec, samples: int = 100, seed: int = 0, tol: float = 1e-8) -> List[str]:
    """
    Sample the declared properties of `spec` (convexity, gradient Lipschitz bound, prox optimality
    and nonexpansiveness, argmin value, strong-minimum growth). Returns failure messages.
    """
    rng = np.random.default_rng(seed)
    n = spec.dimension
    radius = min(spec.smooth.region_radius, 5.0)
    xs = rng.uniform(-radius, radius, size=(samples, n))
    ys = rng.uniform(-radius, radius, size=(samples, n))
    phi, grad, lip = spec.smooth.value, spec.smooth.gradient, spec.smooth.lipschitz_bound
    failures = []
    for x, y in zip(xs, ys):
        fx, fy = phi(x), phi(y)
        gx, gy = grad(x), grad(y)
        if fy < fx + float(gx @ (y - x)) - tol * (1.0 + abs(fx) + abs(fy)):
            failures.append(f"{spec.name}: convexity fails at x={x.tolist()}, y={y.tolist()}")
        if np.linalg.norm(gx - gy) > lip * np.linalg.norm(x - y) + tol * (1.0 + np.linalg.norm(gx)):
            failures.append(f"{spec.name}: gradient Lipschitz bound {lip} fails at x={x.tolist()}")
    if spec.nonsmooth is not None:
        for x, y in zip(xs, ys):
            for step in (0.5 / lip, 1.0 / lip):
                px, py = spec.prox(step, x), spec.prox(step, y)
                if np.linalg.norm(px - py) > np.linalg.norm(x - y) + tol:
                    failures.append(f"{spec.name}: prox is expansive at x={x.tolist()}")
                candidates = np.vstack([x, px + rng.normal(scale=0.5, size=(20, n))])
                if prox_residual(spec.nonsmooth, step, x, candidates) > tol:
                    failures.append(f"{spec.name}: prox optimality fails at x={x.tolist()}, step={step}")
    if spec.min_value is not None and spec.argmin_set is not None:
        for z in spec.argmin_set.sample(rng, 10):
            theta = composite_value(spec, z)
            if abs(theta - spec.min_value) > tol * (1.0 + abs(spec.min_value)):
                failures.append(f"{spec.name}: value {theta} at argmin point {z.tolist()}")
    if spec.strong_min_modulus is not None:
        m, mu = spec.require_min_value(), spec.strong_min_modulus
        for x in xs:
            theta = composite_value(spec, x)
            dist = spec.argmin_set.distance(x)
            if theta < m + 0.5 * mu * dist**2 - tol * (1.0 + abs(theta)):
                failures.append(f"{spec.name}: strong-minimum growth fails at x={x.tolist()}")
    if failures:
        logger.warning(f"{spec.name}: {len(failures)} property failures")
    return failures
