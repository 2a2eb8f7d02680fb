"""Experiment configuration: a single versioned JSON document.

Validation errors carry the dotted path of the offending field, e.g.
``accuracy.ka[0]: accuracy must be positive``.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError

SCHEMA_VERSION = 1
SOLVE = "solve"
SENSOR_KINDS = ("position", "range", "none")
SCHEDULE_MODES = ("constant", "per-step")
EXPERIMENT_KINDS = ("rate-sweep", "covariance-sweep")


def square_anchors(half_side=6.0):
    """Eight anchors: corners and edge midpoints of a square centred at 0."""
    h = half_side
    return [[-h, -h], [h, -h], [h, h], [-h, h], [0.0, -h], [h, 0.0], [0.0, h], [-h, 0.0]]


@dataclass
class MotionConfig:
    q: np.ndarray
    truth_step: float = 0.01
    duration: float = 60.0
    x0_low: list = field(default_factory=lambda: [-4.0, -4.0])
    x0_high: list = field(default_factory=lambda: [4.0, 4.0])
    v_low: list = field(default_factory=lambda: [-1.0, -1.0])
    v_high: list = field(default_factory=lambda: [1.0, 1.0])
    input_segment: Optional[float] = None  # None: one velocity for the whole run
    arena: float = 4.0


@dataclass
class SensorConfig:
    kind: str
    covariance: Union[str, np.ndarray, None]
    anchors: Optional[np.ndarray] = None
    quadrature_order: int = 3


@dataclass
class ScheduleConfig:
    rate: Union[str, float]
    mode: str = "constant"


@dataclass
class ExperimentConfig:
    dimension: int
    motion: MotionConfig
    sensor: SensorConfig
    ka: list
    schedule: ScheduleConfig
    trials: int = 10
    base_seed: int = 0
    experiment: str = "rate-sweep"
    rate_divisor: float = 3.0
    cov_factor: float = 3.0
    output_dir: str = "out"
    formats: tuple = ("csv", "json", "dat")
    m_cap: float = 1e6
    rel_tol: float = 1e-6
    record_timing: bool = False
    raw: dict = field(default_factory=dict, repr=False)


def _get(d, key, path, default=None, required=False):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
        return default
    return d[key]


def _number(v, path, positive=False, nonneg=False, what=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(path, "expected a finite number")
    if positive and not v > 0:
        raise ConfigError(path, f"{what or 'value'} must be positive")
    if nonneg and v < 0:
        raise ConfigError(path, f"{what or 'value'} must be non-negative")
    return float(v)


def _matrix(v, dim, path, what):
    """Scalar -> v*I, or a dim x dim nested list; must be symmetric PD."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        m = _number(v, path, positive=True, what=what) * np.eye(dim)
    else:
        try:
            m = np.array(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(path, "expected a number or a square matrix") from None
        if m.shape != (dim, dim):
            raise ConfigError(path, f"expected a {dim}x{dim} matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)) or np.abs(m - m.T).max() > 1e-12 * np.abs(m).max():
            raise ConfigError(path, "matrix must be finite and symmetric")
        if np.linalg.eigvalsh(m).min() <= 0:
            raise ConfigError(path, f"{what} must be positive definite")
    return m


def _vector(v, dim, path):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return [float(v)] * dim
    if not isinstance(v, list) or len(v) != dim:
        raise ConfigError(path, f"expected a number or a list of {dim} numbers")
    return [_number(x, f"{path}[{i}]") for i, x in enumerate(v)]


def parse_config(doc):
    """Validate a config dict and return an :class:`ExperimentConfig`."""
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    ver = _get(doc, "schema_version", "", required=True)
    if ver != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported schema version {ver!r} (expected {SCHEMA_VERSION})")
    dim = _get(doc, "dimension", "", 2)
    if isinstance(dim, bool) or not isinstance(dim, int) or dim not in (1, 2, 3):
        raise ConfigError("dimension", "must be 1, 2 or 3")

    m = _get(doc, "motion", "", required=True)
    q = _matrix(_get(m, "q", "motion", required=True), dim, "motion.q", "process PSD")
    motion = MotionConfig(q=q)
    for key in ("truth_step", "duration", "input_segment"):
        if key in m and not (key == "input_segment" and m[key] is None):
            setattr(motion, key, _number(m[key], f"motion.{key}", positive=True, what=key))
    if "arena" in m:
        motion.arena = _number(m["arena"], "motion.arena", nonneg=True, what="arena")
    for key, attr, default in (("initial_state", "x0", 4.0), ("initial_velocity", "v", 1.0)):
        box = _get(m, key, "motion", {})
        lo = _vector(_get(box, "low", f"motion.{key}", [-default] * dim), dim, f"motion.{key}.low")
        hi = _vector(_get(box, "high", f"motion.{key}", [default] * dim), dim, f"motion.{key}.high")
        if any(a > b for a, b in zip(lo, hi)):
            raise ConfigError(f"motion.{key}", "low must not exceed high")
        setattr(motion, f"{attr}_low", lo)
        setattr(motion, f"{attr}_high", hi)

    s = _get(doc, "sensor", "", required=True)
    kind = _get(s, "kind", "sensor", required=True)
    if kind not in SENSOR_KINDS:
        raise ConfigError("sensor.kind", f"must be one of {', '.join(SENSOR_KINDS)}")
    cov = _get(s, "covariance", "sensor", None)
    if kind != "none":
        if cov is None:
            raise ConfigError("sensor.covariance", "missing required field")
        if cov != SOLVE:
            if kind == "range":
                cov = _number(cov, "sensor.covariance", positive=True, what="range variance")
            else:
                cov = _matrix(cov, dim, "sensor.covariance", "sensor covariance")
    anchors = None
    if kind == "range":
        raw = _get(s, "anchors", "sensor", None)
        if raw is None:
            if dim != 2:
                raise ConfigError("sensor.anchors", "required unless dimension is 2")
            raw = square_anchors(_number(_get(s, "anchor_half_side", "sensor", 6.0), "sensor.anchor_half_side",
                                         positive=True, what="anchor half side"))
        try:
            anchors = np.array(raw, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("sensor.anchors", "expected a list of coordinate lists") from None
        if anchors.ndim != 2 or anchors.shape[1] != dim:
            raise ConfigError("sensor.anchors", f"each anchor must have {dim} coordinates")
        if anchors.shape[0] < dim:
            raise ConfigError("sensor.anchors", f"at least {dim} anchors are required")
    order = _get(s, "quadrature_order", "sensor", 3)
    if isinstance(order, bool) or not isinstance(order, int) or order < 1:
        raise ConfigError("sensor.quadrature_order", "must be a positive integer")
    sensor = SensorConfig(kind, cov, anchors, order)

    acc = _get(doc, "accuracy", "", required=True)
    ka = _get(acc, "ka", "accuracy", required=True)
    if isinstance(ka, (int, float)) and not isinstance(ka, bool):
        ka = [ka]
    if not isinstance(ka, list) or not ka:
        raise ConfigError("accuracy.ka", "expected a non-empty list of numbers")
    ka = [_number(v, f"accuracy.ka[{i}]", positive=True, what="accuracy") for i, v in enumerate(ka)]

    sc = _get(doc, "schedule", "", {"rate": SOLVE})
    rate = _get(sc, "rate", "schedule", SOLVE)
    if rate != SOLVE:
        rate = _number(rate, "schedule.rate", positive=True, what="query rate")
    mode = _get(sc, "mode", "schedule", "constant")
    if mode not in SCHEDULE_MODES:
        raise ConfigError("schedule.mode", f"must be one of {', '.join(SCHEDULE_MODES)}")
    if rate == SOLVE and isinstance(cov, str):
        raise ConfigError("schedule.rate", 'only one of sensor.covariance and schedule.rate may be "solve"')

    cfg = ExperimentConfig(dim, motion, sensor, ka, ScheduleConfig(rate, mode), raw=doc)
    tr = _get(doc, "trials", "", {})
    count = _get(tr, "count", "trials", 10)
    if isinstance(count, bool) or not isinstance(count, int) or count < 1:
        raise ConfigError("trials.count", "must be an integer >= 1")
    seed = _get(tr, "base_seed", "trials", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("trials.base_seed", "must be an unsigned 64-bit integer")
    cfg.trials, cfg.base_seed = count, seed

    ex = _get(doc, "experiment", "", {})
    kind_ex = _get(ex, "kind", "experiment", "rate-sweep" if rate == SOLVE else "covariance-sweep")
    if kind_ex not in EXPERIMENT_KINDS:
        raise ConfigError("experiment.kind", f"must be one of {', '.join(EXPERIMENT_KINDS)}")
    cfg.experiment = kind_ex
    cfg.rate_divisor = _number(_get(ex, "rate_divisor", "experiment", 3.0), "experiment.rate_divisor",
                               positive=True, what="rate divisor")
    cfg.cov_factor = _number(_get(ex, "cov_factor", "experiment", 3.0), "experiment.cov_factor",
                             positive=True, what="covariance factor")

    out = _get(doc, "output", "", {})
    d = _get(out, "directory", "output", "out")
    if not isinstance(d, str) or not d:
        raise ConfigError("output.directory", "expected a non-empty string")
    cfg.output_dir = d
    fm = _get(out, "formats", "output", ["csv", "json", "dat"])
    if not isinstance(fm, list) or any(f not in ("csv", "json", "dat") for f in fm):
        raise ConfigError("output.formats", "expected a list drawn from csv, json, dat")
    cfg.formats = tuple(fm)

    so = _get(doc, "solver", "", {})
    cfg.m_cap = _number(_get(so, "m_cap", "solver", 1e6), "solver.m_cap", positive=True, what="m_cap")
    cfg.rel_tol = _number(_get(so, "rel_tol", "solver", 1e-6), "solver.rel_tol", positive=True, what="rel_tol")
    rt = _get(so, "record_timing", "solver", False)
    if not isinstance(rt, bool):
        raise ConfigError("solver.record_timing", "expected true or false")
    cfg.record_timing = rt
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON in {path}: {exc.msg} (line {exc.lineno})") from None
    return parse_config(doc)


def require_experiment_fields(cfg, kind):
    if kind == "rate-sweep":
        if cfg.schedule.rate != SOLVE:
            raise ConfigError("schedule.rate", 'rate-sweep needs schedule.rate = "solve"')
        if cfg.sensor.kind == "none":
            raise ConfigError("sensor.kind", "experiments need a sensor")
    elif kind == "covariance-sweep":
        if not isinstance(cfg.sensor.covariance, str):
            raise ConfigError("sensor.covariance", 'covariance-sweep needs sensor.covariance = "solve"')
    else:
        raise ConfigError("experiment.kind", f"unknown experiment {kind!r}")
