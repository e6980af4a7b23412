import json
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


class NumericalError(RuntimeError):
    pass


class DivergenceError(NumericalError):
    """The state left the ball of radius `blowup_cap`."""


class IntegrationError(NumericalError):
    pass


class SeriesError(NumericalError):
    pass


class DiagnosticError(NumericalError):
    pass


class ConfigError(ValueError):
    pass


def as_point(x, dimension: Optional[int] = None, name: str = "x") -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a point (1-D array), got shape {arr.shape}")
    if dimension is not None and arr.shape[0] != dimension:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dimension}")
    return arr


def freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.flags.writeable = False
    return arr


def monotone_violations(
    values: np.ndarray, rel_slack: float, abs_slack: float = 0.0
) -> List[Tuple[int, float]]:
    """
    Indices i where values[i+1] exceeds values[i] by more than
    rel_slack * (1 + |values[i]|) + abs_slack. Returns (i, excess) pairs.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return []
    increase = np.diff(values)
    slack = rel_slack * (1.0 + np.abs(values[:-1])) + abs_slack
    bad = np.nonzero(increase > slack)[0]
    return [(int(i), float(increase[i])) for i in bad]


def tail_window(t_lo: float, t_hi: float, decades: float = 1.0) -> Tuple[float, float]:
    return max(t_lo, t_hi / 10.0**decades), t_hi


def window_mask(times: np.ndarray, window: Tuple[float, float]) -> np.ndarray:
    lo, hi = window
    return (times >= lo) & (times <= hi)


def write_csv(
    path: str,
    metadata: Dict[str, object],
    columns: Sequence[str],
    data: np.ndarray,
) -> str:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] != len(columns):
        raise ValueError(f"{len(columns)} column names for {data.shape[1]} columns")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = " ".join(f"{k}={_meta_str(v)}" for k, v in metadata.items())
    with open(path, "w", newline="\n") as f:
        f.write(f"# {header}\n")
        f.write(",".join(columns) + "\n")
        np.savetxt(f, data, fmt=CSV_FLOAT_FORMAT, delimiter=",", newline="\n")
    return path


def read_csv(path: str) -> Tuple[Dict[str, str], List[str], np.ndarray]:
    with open(path) as f:
        first = f.readline().strip()
        columns = f.readline().strip().split(",")
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    if not first.startswith("#"):
        raise ValueError(f"{path} has no metadata header line")
    metadata = {}
    for item in first[1:].split():
        key, _, value = item.partition("=")
        metadata[key] = value
    return metadata, columns, data


def _meta_str(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ";".join(_meta_str(v) for v in value) + "]"
    return str(value).replace(" ", "_")


def jsonable(value):
    """Convert numpy scalars/arrays and non-finite floats to strict-JSON values."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def unjson_float(value) -> Optional[float]:
    return None if value is None else float(value)


def write_json(path: str, payload) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(json.dumps(jsonable(payload), indent=2, sort_keys=True))
        f.write("\n")
    return path
