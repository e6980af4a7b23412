import logging
import math
import os
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ExperimentConfig
from .diagnostics import (
    LyapunovParams,
    energy_E,
    global_energy_W,
    integral_estimate,
    perturbed_energy,
    value_bound_check,
)
from .dynamics import Trajectory, integrate, load_trajectory
from .ifb import (
    IterateLog,
    critical_energy,
    critical_value_bound,
    discrete_lyapunov,
    discrete_rate_check,
    iterate_boundedness_check,
    load_log,
    run_ifb,
    verify_anchor_inequality,
    verify_energy_decay,
)
from .problems import validate_problem
from .rates import find_looping_initial_condition, verify_perturbed_rate, verify_speed_rate, verify_value_rate
from .utils import DiagnosticError, read_csv, write_csv, write_json

logger = logging.getLogger(__name__)

REGIME_COLUMNS = [
    "alpha",
    "value_rate_theory",
    "value_rate_fitted",
    "value_bound_ok",
    "I_p_weight",
    "I_p_finite",
    "speed_rate_theory",
    "J_p_weight",
    "J_p_finite",
    "little_o",
]


@dataclass
class Table:
    metadata: Dict[str, object]
    columns: List[str]
    data: np.ndarray


@dataclass
class AlphaResult:
    """Everything one sweep entry produced; written to disk by the parent process."""

    alpha: float
    tables: Dict[str, Table] = field(default_factory=dict)
    reports: Dict[str, Dict[str, object]] = field(default_factory=dict)
    violations: List[str] = field(default_factory=list)
    regime_row: Optional[Dict[str, float]] = None


def _record(result: AlphaResult, label: str, violations) -> None:
    if violations:
        worst = max(excess for _, excess in violations)
        result.violations.append(f"alpha={result.alpha:g} {label}: {len(violations)} violations (max {worst:.3e})")


def _series_table(series, metadata) -> Table:
    return Table({"series": series.name, **metadata}, ["t", "value"], np.column_stack([series.times, series.values]))


def _tail_share(times: np.ndarray, integrand: np.ndarray) -> float:
    """Share of the truncated integral collected over the last decade."""
    pieces = 0.5 * np.diff(times) * (integrand[1:] + integrand[:-1])
    total = float(np.sum(pieces))
    if total <= 0:
        return 0.0
    return float(np.sum(pieces[times[1:] > times[-1] / 10.0])) / total


def integral_columns(traj: Trajectory) -> Dict[str, float]:
    """I_p and J_p finiteness: the energy bound when it applies, otherwise a small last-decade share."""
    alpha = traj.alpha
    p_values = 0.95 * min(1.0, alpha / 3.0)
    values = integral_estimate(traj, p_values, kind="values")
    w_speed = min(alpha - 2.0, 1.0) - 0.1
    speed = integral_estimate(traj, w_speed, kind="speed")
    if speed.bound is not None:
        speed_finite = bool(speed.satisfied)
    else:
        integrand = traj.times**w_speed * np.sum(traj.velocities**2, axis=1)
        speed_finite = _tail_share(traj.times, integrand) < 0.5
    return {
        "I_p_weight": 2 * p_values - 1,
        "I_p_finite": bool(values.satisfied),
        "I_p_value": values.value,
        "I_p_bound": values.bound,
        "J_p_weight": w_speed,
        "J_p_finite": speed_finite,
        "J_p_value": speed.value,
    }


def _continuous(config: ExperimentConfig, alpha: float, result: AlphaResult) -> None:
    spec = config.problem_spec()
    forcing = config.forcing_spec()
    traj = integrate(
        spec,
        alpha,
        config.x0,
        config.v0,
        t0=config.t0,
        t_end=config.t_end,
        tol=config.tol,
        forcing=forcing,
        num_samples=config.num_samples,
    )
    n = traj.dimension
    meta = {"problem": spec.name, "alpha": alpha, "tol": config.tol, "t0": config.t0, "forcing": forcing.describe()}
    result.tables["trajectory"] = Table(
        meta,
        ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)],
        np.column_stack([traj.times, traj.positions, traj.velocities]),
    )
    z = spec.require_argmin().project(traj.positions[0])
    params = LyapunovParams.family_a(alpha)
    if forcing.is_zero:
        energy = energy_E(traj, z, params)
        w = global_energy_W(traj)
        _record(result, "continuous energy E", energy.monotone_violations)
        _record(result, "continuous energy W", w.monotone_violations)
        _record(result, "value bound t^{2p}(Phi-min) <= E(t0)", value_bound_check(traj, params, z))
        value = verify_value_rate(traj)
        speed = verify_speed_rate(traj)
        result.reports["speed"] = speed.to_dict()
        result.tables["W"] = _series_table(w, meta)
        if spec.name == "flat-bottom" and math.isclose(alpha, 3.0):
            _loop_search(spec, alpha, result)
    else:
        energy = perturbed_energy(traj, z, params)
        _record(result, "perturbed energy", energy.monotone_violations)
        value = verify_perturbed_rate(traj, config.p if config.p is not None else params.p)
        speed = None
    result.tables["E"] = _series_table(energy, {**meta, "p": params.p})
    result.reports["value"] = value.to_dict()
    if not value.bound_satisfied:
        result.violations.append(f"alpha={alpha:g} {value.quantity} bound {value.bound_constant:.6g} exceeded")
    row = {
        "alpha": alpha,
        "value_rate_theory": min(2.0 * alpha / 3.0, 2.0),
        "value_rate_fitted": value.fitted_exponent,
        "value_bound_ok": value.bound_satisfied,
        "speed_rate_theory": speed.theoretical_exponent if speed is not None else math.nan,
        "little_o": alpha > 3,
    }
    if forcing.is_zero:
        integrals = integral_columns(traj)
        result.reports["integrals"] = integrals
        row.update({k: integrals[k] for k in ("I_p_weight", "I_p_finite", "J_p_weight", "J_p_finite")})
    result.regime_row = row


def _loop_search(spec, alpha: float, result: AlphaResult) -> None:
    a, b = spec.argmin_set.lower, spec.argmin_set.upper
    try:
        x0, v0, _, loops = find_looping_initial_condition(a, b, alpha)
    except DiagnosticError as err:
        result.reports["loops"] = {"note": str(err)}
        return
    result.reports["loops"] = {"x0": x0, "v0": v0, "decrements": loops.decrements, "required": loops.required}
    if not loops.satisfied:
        result.violations.append(f"alpha={alpha:g} loop decrement below {loops.required:.6g}")


def discrete_exponent(alpha: float) -> Optional[float]:
    """An exponent of the discrete energy branch admissible for alpha, or None."""
    upper = min(1.0, alpha / 3.0, (alpha + 1.0) / 4.0)
    if upper > 0.5:
        return 0.5 + 0.9 * (upper - 0.5)
    p = 0.9 * min(alpha / 3.0, 0.5)
    return p if p > 0 else None


def _discrete(config: ExperimentConfig, alpha: float, result: AlphaResult) -> None:
    spec = config.problem_spec()
    forcing = config.forcing_spec()
    log = run_ifb(spec, alpha, config.step, config.x0, config.iters, perturbations=forcing)
    n = log.dimension
    meta = {"problem": spec.name, "alpha": alpha, "s": config.step, "forcing": forcing.describe()}
    result.tables["iterates"] = Table(
        meta,
        ["k"] + [f"x_{i + 1}" for i in range(n)] + ["theta", "dx_norm"],
        np.column_stack([np.arange(log.K + 1), log.xs, log.values, np.linalg.norm(log.differences(), axis=1)]),
    )
    if not forcing.is_zero:
        p = config.p if config.p is not None else min(2.0 * alpha / 3.0, 2.0) - 0.1
        report = verify_perturbed_rate(log, p)
        result.reports["discrete_value"] = report.to_dict()
        if not report.bound_satisfied:
            result.violations.append(f"alpha={alpha:g} perturbed discrete rate not bounded")
        return
    z = spec.require_argmin().project(log.xs[0])
    _record(result, "discrete energy decay", verify_energy_decay(log))
    _record(result, "anchor inequality", verify_anchor_inequality(log, z))
    p = discrete_exponent(alpha)
    if p is not None:
        energies = discrete_lyapunov(log, z, p)
        try:
            _record(result, "discrete rate", discrete_rate_check(energies))
        except DiagnosticError as err:
            result.violations.append(f"alpha={alpha:g} discrete rate skipped: {err}")
        result.reports["discrete_energy"] = {
            "p": p,
            "branch": energies.branch,
            "k0": energies.k0,
            "k_xi": energies.k_xi,
            "k_star": energies.k_star,
        }
        columns = ["k", "W", "h", "E", "E_tilde"]
        data = [energies.ks, energies.W, energies.h, energies.E, energies.E_tilde]
        if math.isclose(alpha, 3.0):
            crit = critical_energy(log, z)
            _record(result, "critical energy", crit.monotone_violations)
            sup_scaled, bound = critical_value_bound(log, crit)
            if sup_scaled > bound * (1.0 + 1e-12) + 1e-12:
                result.violations.append(f"alpha=3 critical bound {bound:.6g} exceeded by {sup_scaled:.6g}")
            sup_x, sup_kdx = iterate_boundedness_check(log)
            result.reports["critical"] = {"sup_scaled_gap": sup_scaled, "bound": bound, "sup_x": sup_x, "sup_k_dx": sup_kdx}
            columns.append("E_crit")
            data.append(np.concatenate([[np.nan], crit.values]))
        result.tables["energies"] = Table({**meta, "p": p}, columns, np.column_stack(data))
    report = verify_value_rate(log, config.p)
    result.reports["discrete_value"] = report.to_dict()
    if not report.bound_satisfied:
        result.violations.append(f"alpha={alpha:g} discrete rate k^p gap not bounded")


def run_alpha(config: ExperimentConfig, alpha: float) -> AlphaResult:
    """One sweep entry; pure, returns every table and report in memory."""
    result = AlphaResult(alpha=float(alpha))
    if config.mode in ("continuous", "both"):
        _continuous(config, alpha, result)
    if config.mode in ("discrete", "both"):
        _discrete(config, alpha, result)
    return result


def _run_alpha_worker(args: Tuple[Dict[str, object], float]) -> AlphaResult:
    payload, alpha = args
    return run_alpha(ExperimentConfig.from_dict(payload), alpha)


def report_regime_table(rows: List[Dict[str, object]]) -> Tuple[List[str], np.ndarray]:
    """One row per alpha; booleans as 0/1, missing entries as NaN."""
    if not rows:
        raise ValueError("regime table needs at least one alpha")
    data = []
    for row in sorted(rows, key=lambda r: r["alpha"]):
        data.append([float(row.get(c, math.nan)) if row.get(c) is not None else math.nan for c in REGIME_COLUMNS])
    return REGIME_COLUMNS, np.array(data)


@dataclass
class ExperimentOutcome:
    status: int
    violations: List[str]
    files: List[str]


def run_experiment(config: ExperimentConfig) -> ExperimentOutcome:
    failures = validate_problem(config.problem_spec(), seed=config.seed)
    tasks = [(config.to_dict(), alpha) for alpha in config.alpha_grid]
    if config.workers > 1 and len(tasks) > 1:
        with Pool(min(config.workers, len(tasks))) as pool:
            results = pool.map(_run_alpha_worker, tasks)
    else:
        results = [_run_alpha_worker(task) for task in tasks]

    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    files = []
    violations = []
    for result in results:
        stem = os.path.join(out, f"{config.problem}_alpha{result.alpha:g}")
        for name, table in result.tables.items():
            files.append(write_csv(f"{stem}_{name}.csv", table.metadata, table.columns, table.data))
        files.append(write_json(f"{stem}_reports.json", {"alpha": result.alpha, "reports": result.reports, "violations": result.violations}))
        violations.extend(result.violations)
    violations.extend(failures)
    rows = [r.regime_row for r in results if r.regime_row is not None]
    if rows:
        columns, data = report_regime_table(rows)
        meta = {"problem": config.problem, "t_end": config.t_end, "tol": config.tol}
        files.append(write_csv(os.path.join(out, f"{config.problem}_regime_table.csv"), meta, columns, data))
    config.to_json_file(os.path.join(out, "config.json"))
    status = 1 if violations else 0
    logger.info(f"sweep over {len(results)} alpha values wrote {len(files)} files, {len(violations)} failed checks")
    return ExperimentOutcome(status, violations, files)


def diagnose(path: str) -> Dict[str, object]:
    """Recompute energies and violations for a saved trajectory or iterate CSV."""
    _, columns, _ = read_csv(path)
    if columns and columns[0] == "k":
        return _diagnose_log(load_log(path))
    return _diagnose_trajectory(load_trajectory(path))


def _diagnose_trajectory(traj: Trajectory) -> Dict[str, object]:
    problem = traj.require_problem()
    z = problem.require_argmin().project(traj.positions[0])
    params = LyapunovParams.family_a(traj.alpha)
    energy = energy_E(traj, z, params)
    w = global_energy_W(traj)
    return {
        "kind": "trajectory",
        "problem": problem.name,
        "alpha": traj.alpha,
        "energy_violations": energy.monotone_violations,
        "W_violations": w.monotone_violations,
        "value_bound_violations": value_bound_check(traj, params, z),
        "value": verify_value_rate(traj).to_dict(),
    }


def _diagnose_log(log: IterateLog) -> Dict[str, object]:
    problem = log.require_problem()
    z = problem.require_argmin().project(log.xs[0])
    report = {
        "kind": "iterates",
        "problem": problem.name,
        "alpha": log.alpha,
        "energy_decay_violations": verify_energy_decay(log),
        "anchor_violations": verify_anchor_inequality(log, z),
    }
    if math.isclose(log.alpha, 3.0):
        report["critical_violations"] = critical_energy(log, z).monotone_violations
    return report


def failed_checks(report: Dict[str, object]) -> int:
    return sum(len(v) for k, v in report.items() if k.endswith("violations"))
