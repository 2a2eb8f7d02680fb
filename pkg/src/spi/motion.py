"""White-noise-on-velocity (WNOV) motion prior.

The state is the robot position x(t) in R^d driven by a known velocity
input plus white noise of power spectral density Q:

    x_{k+1} = x_k + u_k dt_k + w_k,    w_k ~ N(0, Q dt_k)

so the process Jacobian is the identity and the discrete process
covariance grows linearly with the interval length.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .rng import GaussianStream, psd_sqrt


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MotionPrior:
    """WNOV prior with power spectral density ``psd`` (d x d, m^2/s).

    ``zero_noise=True`` permits a singular (e.g. all-zero) ``psd``; it exists
    for noiseless testing only, since the bound computations need Q^-1.
    """

    psd: np.ndarray
    zero_noise: bool = False
    dim: int = field(init=False)

    def __post_init__(self):
        psd = np.atleast_2d(np.asarray(self.psd, dtype=float))
        if psd.ndim != 2 or psd.shape[0] != psd.shape[1] or psd.shape[0] < 1:
            raise InvalidArgumentError(f"psd must be a square matrix, got shape {psd.shape}")
        scale = max(np.abs(psd).max(), 1e-300)
        if np.abs(psd - psd.T).max() > 1e-12 * scale:
            raise InvalidArgumentError("psd must be symmetric")
        eig = np.linalg.eigvalsh(psd)
        if self.zero_noise:
            if eig.min() < -1e-12 * scale:
                raise InvalidArgumentError("psd must be positive semidefinite")
        elif eig.min() <= 0.0:
            raise InvalidArgumentError("psd must be positive definite (pass zero_noise=True for testing)")
        object.__setattr__(self, "psd", _frozen(psd))
        object.__setattr__(self, "dim", psd.shape[0])

    @classmethod
    def isotropic(cls, q, dim=2):
        return cls(q * np.eye(dim))


def _check_dt(dt):
    if not dt > 0:
        raise InvalidArgumentError(f"time step must be positive, got {dt}")


def propagate_mean(prior, x, u, dt):
    """Prior mean one interval ahead: ``x + u * dt``."""
    _check_dt(dt)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (prior.dim,) or u.shape != (prior.dim,):
        raise InvalidArgumentError(f"x and u must have shape ({prior.dim},)")
    return x + u * dt


def process_jacobian_and_cov(prior, dt):
    """Return ``(F, Q_k)`` for an interval of length ``dt``: ``(I, Q dt)``."""
    _check_dt(dt)
    return np.eye(prior.dim), prior.psd * dt


class PiecewiseConstantInput:
    """Velocity input held constant between breakpoints.

    ``values[i]`` applies on ``[breaks[i], breaks[i+1])``; the first value
    extends to -inf and the last to +inf.
    """

    def __init__(self, breaks, values):
        breaks = np.asarray(breaks, dtype=float).ravel()
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[0] != breaks.size:
            raise InvalidArgumentError("need one input value per breakpoint")
        if breaks.size > 1 and np.any(np.diff(breaks) <= 0):
            raise InvalidArgumentError("input breakpoints must be strictly increasing")
        self.breaks = breaks
        self.values = values
        # cumulative displacement at each breakpoint, relative to breaks[0]
        seg = np.diff(breaks)[:, None] * values[:-1]
        self._cum = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(seg, axis=0)])

    @classmethod
    def constant(cls, u, t0=0.0):
        return cls([t0], [np.asarray(u, dtype=float)])

    @property
    def dim(self):
        return self.values.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.breaks.size - 1)
        return self.values[idx]

    def _integral(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.breaks.size - 1)
        return self._cum[idx] + (t - self.breaks[idx])[..., None] * self.values[idx]

    def displacement(self, t_from, t_to):
        """Integral of the input over ``[t_from, t_to]`` (vectorized)."""
        return self._integral(t_to) - self._integral(t_from)


def as_input(u, dim):
    if isinstance(u, PiecewiseConstantInput):
        return u
    if u is None:
        return PiecewiseConstantInput.constant(np.zeros(dim))
    return PiecewiseConstantInput.constant(np.broadcast_to(np.asarray(u, dtype=float), (dim,)))


@dataclass(frozen=True)
class StateSample:
    time: float
    position: np.ndarray
    velocity_input: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    """Sampled positions with the velocity input active at each sample."""

    times: np.ndarray
    positions: np.ndarray
    inputs: np.ndarray
    seed: int = 0

    def __post_init__(self):
        times = _frozen(np.asarray(self.times, dtype=float).ravel())
        positions = _frozen(np.atleast_2d(self.positions))
        inputs = _frozen(np.broadcast_to(np.asarray(self.inputs, dtype=float), positions.shape))
        if positions.shape[0] != times.size:
            raise InvalidArgumentError("one position per time required")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "inputs", inputs)

    def __len__(self):
        return self.times.size

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def samples(self):
        return [StateSample(float(t), p, u) for t, p, u in zip(self.times, self.positions, self.inputs)]

    def interpolate(self, t):
        """Linearly interpolated positions at times ``t`` (clamped at the ends)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.times, self.positions[:, i]) for i in range(self.dim)])


def nominal_trajectory(x0, u, t_grid):
    """Noise-free integration of the input (the GP prior mean)."""
    x0 = np.asarray(x0, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    u = as_input(u, x0.size)
    pos = x0 + u.displacement(t_grid[0], t_grid)
    return Trajectory(t_grid, pos, u(t_grid))


def sample_trajectory(prior, x0, u, t_grid, seed):
    """Draw a ground-truth trajectory from the WNOV prior on ``t_grid``.

    ``u`` is a :class:`PiecewiseConstantInput`, a constant d-vector, or None
    (zero input). The increment over each interval is the input displacement
    plus a N(0, Q dt) draw from a :class:`GaussianStream` seeded with ``seed``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (prior.dim,):
        raise InvalidArgumentError(f"x0 must have shape ({prior.dim},)")
    t_grid = np.asarray(t_grid, dtype=float).ravel()
    if t_grid.size < 2:
        raise InvalidArgumentError("time grid needs at least two points")
    dts = np.diff(t_grid)
    if np.any(dts <= 0):
        raise InvalidArgumentError("time grid must be strictly increasing")
    u = as_input(u, prior.dim)
    mean_steps = u.displacement(t_grid[:-1], t_grid[1:])
    stream = GaussianStream(seed)
    z = stream.standard_normal((dts.size, prior.dim))
    root = psd_sqrt(prior.psd)
    noise = (z @ root.T) * np.sqrt(dts)[:, None]
    pos = np.vstack([x0, x0 + np.cumsum(mean_steps + noise, axis=0)])
    return Trajectory(t_grid, pos, u(t_grid), seed=int(seed))

