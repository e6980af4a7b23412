import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

from .dynamics import Forcing
from .problems import PROBLEM_IDS, ProblemSpec, get_problem
from .utils import ConfigError

logger = logging.getLogger(__name__)

MODES = ("continuous", "discrete", "both")


@dataclass
class ExperimentConfig:
    """
    Configuration of an α sweep.

    Args:
        problem (`str`): Catalog problem id.
        mode (`str`): One of `continuous`, `discrete`, `both`.
        alpha_grid (`List[float]`): Damping exponents to run.
        t0 (`float`): Start time of the continuous runs.
        t_end (`float`): Horizon of the continuous runs.
        iters (`int`): Number of iterations K of the discrete runs.
        tol (`float`): Integrator tolerance.
        step (`float`): Step s of the discrete runs; defaults to 1/L.
        forcing (`str`): `zero`, `power:c:q` or `table:path.csv`; also used as g_k = g(k).
        p (`float`): Exponent of the perturbed and discrete rate checks.
        x0 (`List[float]`): Start point; defaults to the catalog start.
        v0 (`List[float]`): Start velocity; defaults to zero.
        num_samples (`int`): Size of the log-uniform output grid.
        workers (`int`): Worker processes of the sweep.
        seed (`int`): Seed of randomized searches.
        output_dir (`str`): Directory receiving the artifacts.
    """

    problem: str = field(default="quadratic", metadata={"help": f"Problem id, one of {', '.join(PROBLEM_IDS)}"})
    mode: str = field(default="continuous", metadata={"help": "continuous | discrete | both"})
    alpha_grid: List[float] = field(default_factory=lambda: [3.0], metadata={"help": "Damping exponents"})
    t0: float = field(default=1.0, metadata={"help": "Start time (> 0)"})
    t_end: float = field(default=1e3, metadata={"help": "Continuous horizon"})
    iters: int = field(default=100000, metadata={"help": "Discrete horizon K"})
    tol: float = field(default=1e-9, metadata={"help": "Integrator tolerance"})
    step: Optional[float] = field(default=None, metadata={"help": "Discrete step s in (0, 1/L]; default 1/L"})
    forcing: str = field(default="zero", metadata={"help": "zero | power:c:q | table:path.csv"})
    p: Optional[float] = field(default=None, metadata={"help": "Exponent of the perturbed/discrete rate checks"})
    x0: Optional[List[float]] = field(default=None, metadata={"help": "Start point; default catalog start"})
    v0: Optional[List[float]] = field(default=None, metadata={"help": "Start velocity; default zero"})
    num_samples: int = field(default=2000, metadata={"help": "Output grid size"})
    workers: int = field(default=1, metadata={"help": "Worker processes"})
    seed: int = field(default=0, metadata={"help": "Seed of randomized searches"})
    output_dir: str = field(default="outputs", metadata={"help": "Artifact directory"})

    def __post_init__(self):
        if self.problem not in PROBLEM_IDS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose one of {', '.join(PROBLEM_IDS)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if isinstance(self.alpha_grid, (int, float)):
            self.alpha_grid = [self.alpha_grid]
        self.alpha_grid = [float(a) for a in self.alpha_grid]
        if not self.alpha_grid:
            raise ConfigError("alpha_grid is empty")
        if any(a <= 0 for a in self.alpha_grid):
            raise ConfigError(f"alpha values must be positive, got {self.alpha_grid}")
        if not self.t0 > 0:
            raise ConfigError(f"t0 must be positive, got {self.t0}")
        if not self.t_end > self.t0:
            raise ConfigError(f"t_end must exceed t0, got t_end={self.t_end}, t0={self.t0}")
        self.iters = int(self.iters)
        if self.iters < 2:
            raise ConfigError(f"iters must be at least 2, got {self.iters}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        spec = self.problem_spec()
        lip = spec.lipschitz
        if self.step is None:
            self.step = 1.0 / lip
        if self.mode != "continuous" and not 0 < self.step <= (1.0 + 1e-12) / lip:
            raise ConfigError(f"step must lie in (0, 1/L] = (0, {1.0 / lip:.6g}], got {self.step}")
        if self.mode != "discrete" and not spec.is_smooth:
            raise ConfigError(f"problem {self.problem!r} has a nonsmooth part; use mode=discrete")
        try:
            self.forcing_spec()
        except (ValueError, OSError) as err:
            raise ConfigError(f"bad forcing {self.forcing!r}: {err}") from None
        if self.x0 is None:
            self.x0 = list(spec.start())
        if self.v0 is None:
            self.v0 = [0.0] * spec.dimension
        self.x0 = [float(v) for v in _as_list(self.x0)]
        self.v0 = [float(v) for v in _as_list(self.v0)]
        if len(self.x0) != spec.dimension or len(self.v0) != spec.dimension:
            raise ConfigError(f"x0 and v0 must have dimension {spec.dimension}")
        if self.num_samples < 20:
            raise ConfigError(f"num_samples must be at least 20, got {self.num_samples}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    def problem_spec(self) -> ProblemSpec:
        return get_problem(self.problem)

    def forcing_spec(self) -> Forcing:
        return Forcing.parse(self.forcing)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload)

    @classmethod
    def from_json_file(cls, path: str) -> "ExperimentConfig":
        return cls.from_dict(_read_json(path))

    def to_json_file(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _as_list(value) -> List[float]:
    if isinstance(value, (int, float)):
        return [value]
    if isinstance(value, str):
        return [float(v) for v in value.strip("[]").replace(";", ",").split(",") if v.strip()]
    return list(value)


def _read_json(path: str) -> Dict[str, object]:
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return payload


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """Dataclass defaults, then the JSON file at `path`, then the non-None `overrides`."""
    payload: Dict[str, object] = _read_json(path) if path else {}
    payload.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(payload)
