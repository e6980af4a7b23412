import json
import logging
import os
import sys
from typing import List, Optional

import fire

from avdrates.config import load_config
from avdrates.dynamics import Forcing, integrate, save_trajectory
from avdrates.experiment import diagnose as diagnose_file
from avdrates.experiment import failed_checks, report_regime_table, run_experiment
from avdrates.ifb import run_ifb, save_log
from avdrates.problems import get_problem
from avdrates.utils import ConfigError, NumericalError, jsonable, read_csv, write_csv

logger = logging.getLogger("avdrates")


def _setup_logging(log_level: str):
    logging.basicConfig(
        level=getattr(logging, str(log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _config(config, **overrides):
    try:
        return load_config(config, **overrides)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        sys.exit(2)


def simulate(
    problem: str = "quadratic",
    alpha: float = 3.0,
    t_end: float = 1e3,
    tol: float = 1e-9,
    forcing: str = "zero",
    x0: Optional[List[float]] = None,
    v0: Optional[List[float]] = None,
    num_samples: int = 2000,
    out: str = "outputs",
    log_level: str = "INFO",
):
    _setup_logging(log_level)
    cfg = _config(
        None,
        problem=problem,
        mode="continuous",
        alpha_grid=[alpha],
        t_end=t_end,
        tol=tol,
        forcing=forcing,
        x0=x0,
        v0=v0,
        num_samples=num_samples,
        output_dir=out,
    )
    print(
        f"Simulating with params:\n"
        f"problem: {cfg.problem}\n"
        f"alpha: {alpha}\n"
        f"t_end: {cfg.t_end}\n"
        f"tol: {cfg.tol}\n"
        f"forcing: {cfg.forcing}\n"
        f"x0: {cfg.x0}\n"
        f"v0: {cfg.v0}\n"
        f"out: {cfg.output_dir}\n"
    )
    traj = integrate(
        get_problem(cfg.problem),
        alpha,
        cfg.x0,
        cfg.v0,
        t0=cfg.t0,
        t_end=cfg.t_end,
        tol=cfg.tol,
        forcing=Forcing.parse(cfg.forcing),
        num_samples=cfg.num_samples,
    )
    path = save_trajectory(traj, os.path.join(out, f"{cfg.problem}_alpha{alpha:g}_trajectory.csv"))
    logger.info(f"trajectory written to {path}")


def iterate(
    problem: str = "lasso-small",
    alpha: float = 3.0,
    iters: int = 100000,
    step: Optional[float] = None,
    forcing: str = "zero",
    x0: Optional[List[float]] = None,
    out: str = "outputs",
    log_level: str = "INFO",
):
    _setup_logging(log_level)
    cfg = _config(
        None,
        problem=problem,
        mode="discrete",
        alpha_grid=[alpha],
        iters=iters,
        step=step,
        forcing=forcing,
        x0=x0,
        output_dir=out,
    )
    print(
        f"Iterating with params:\n"
        f"problem: {cfg.problem}\n"
        f"alpha: {alpha}\n"
        f"iters: {cfg.iters}\n"
        f"step: {cfg.step}\n"
        f"forcing: {cfg.forcing}\n"
        f"x0: {cfg.x0}\n"
        f"out: {cfg.output_dir}\n"
    )
    log = run_ifb(get_problem(cfg.problem), alpha, cfg.step, cfg.x0, cfg.iters, perturbations=Forcing.parse(cfg.forcing))
    path = save_log(log, os.path.join(out, f"{cfg.problem}_alpha{alpha:g}_iterates.csv"))
    logger.info(f"iterates written to {path}")


def diagnose(path: str, out: Optional[str] = None, log_level: str = "INFO"):
    _setup_logging(log_level)
    report = diagnose_file(path)
    payload = json.dumps(jsonable(report), indent=2, sort_keys=True)
    if out:
        with open(out, "w") as f:
            f.write(payload + "\n")
    else:
        print(payload)
    failures = failed_checks(report)
    if failures:
        print(f"{failures} inequality violations in {path}", file=sys.stderr)
        sys.exit(1)


def sweep(
    config: Optional[str] = None,
    problem: Optional[str] = None,
    mode: Optional[str] = None,
    alpha: Optional[List[float]] = None,
    t_end: Optional[float] = None,
    iters: Optional[int] = None,
    step: Optional[float] = None,
    tol: Optional[float] = None,
    forcing: Optional[str] = None,
    p: Optional[float] = None,
    out: Optional[str] = None,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
    log_level: str = "INFO",
):
    _setup_logging(log_level)
    cfg = _config(
        config,
        problem=problem,
        mode=mode,
        alpha_grid=alpha,
        t_end=t_end,
        iters=iters,
        step=step,
        tol=tol,
        forcing=forcing,
        p=p,
        output_dir=out,
        workers=workers,
        seed=seed,
    )
    print(
        f"Sweeping with params:\n"
        f"problem: {cfg.problem}\n"
        f"mode: {cfg.mode}\n"
        f"alpha_grid: {cfg.alpha_grid}\n"
        f"t_end: {cfg.t_end}\n"
        f"iters: {cfg.iters}\n"
        f"step: {cfg.step}\n"
        f"tol: {cfg.tol}\n"
        f"forcing: {cfg.forcing}\n"
        f"workers: {cfg.workers}\n"
        f"output_dir: {cfg.output_dir}\n"
    )
    try:
        outcome = run_experiment(cfg)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        sys.exit(1)
    for line in outcome.violations:
        print(line, file=sys.stderr)
    if outcome.status:
        sys.exit(outcome.status)


def report(out: str = "outputs", log_level: str = "INFO"):
    """Merge the regime tables found under a sweep directory into one summary table."""
    _setup_logging(log_level)
    rows = []
    problem = "unknown"
    names = sorted(os.listdir(out)) if os.path.isdir(out) else []
    for name in names:
        if name.endswith("_regime_table.csv"):
            problem = name[: -len("_regime_table.csv")]
            metadata, columns, data = read_csv(os.path.join(out, name))
            rows.extend(dict(zip(columns, row)) for row in data)
    if not rows:
        print(f"no regime tables under {out}", file=sys.stderr)
        sys.exit(1)
    columns, data = report_regime_table(rows)
    path = write_csv(os.path.join(out, "regime_summary.csv"), {"problem": problem}, columns, data)
    print(",".join(columns))
    for row in data:
        print(",".join(f"{v:.6g}" for v in row))
    logger.info(f"summary written to {path}")


def main():
    fire.Fire(
        {
            "simulate": simulate,
            "iterate": iterate,
            "diagnose": diagnose,
            "sweep": sweep,
            "report": report,
        }
    )


if __name__ == "__main__":
    main()
