"""Sensor parameter identification for accuracy-bounded state estimation.

Given a white-noise-on-velocity motion prior and a required accuracy ka,
find the sensor query rate (or sensor noise covariance) that keeps the
predictive posterior Cramer-Rao bound inside the ka envelope.
"""

from .conic import AccuracySpec, SolveStatus
from .errors import (
    ConfigError,
    InvalidArgumentError,
    NumericalSingularityError,
    SingularGeometryError,
    SpiError,
    UnderConstrainedError,
)
from .motion import MotionPrior, PiecewiseConstantInput, Trajectory, nominal_trajectory, sample_trajectory
from .sensors import PositionSensor, RangeSensor
from .solvers import solve_constant_rate, solve_covariance, solve_per_step_schedule

__version__ = "0.1.0"
