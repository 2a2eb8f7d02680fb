"""Position and range measurement models.

Both sensors are linear-Gaussian in the noise: y = h(x) + eta. The bound
computations only need the expected information E[H^T R^-1 H]; for range
sensors that expectation is taken over a Gauss-Hermite grid around a
nominal state.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import InvalidArgumentError, SingularGeometryError
from .rng import psd_sqrt

EPS_DIST = 1e-6
CHUNK = 256


def _check_spd(m, name):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"{name} must be square")
    if np.abs(m - m.T).max() > 1e-12 * max(np.abs(m).max(), 1e-300):
        raise InvalidArgumentError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() <= 0:
        raise InvalidArgumentError(f"{name} must be positive definite")
    m = 0.5 * (m + m.T)
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class PositionSensor:
    """Direct position measurement with covariance ``cov`` (m^2)."""

    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cov", _check_spd(self.cov, "cov"))

    kind = "position"

    @property
    def dim(self):
        return self.cov.shape[0]

    @property
    def precision(self):
        return np.linalg.inv(self.cov)

    def with_scaled_noise(self, factor):
        return PositionSensor(self.cov * factor)


@dataclass(frozen=True)
class RangeSensor:
    """Ranging to a set of anchors, scalar noise ``variance`` (m^2).

    ``active`` selects the anchors used per query (default: all). A query is
    one ranging round to every active anchor.
    """

    variance: float
    anchors: np.ndarray
    active: Optional[tuple] = None

    kind = "range"

    def __post_init__(self):
        if not self.variance > 0:
            raise InvalidArgumentError("range variance must be positive")
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        if anchors.shape[0] < 1:
            raise InvalidArgumentError("at least one anchor required")
        anchors.flags.writeable = False
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "variance", float(self.variance))
        if self.active is not None:
            act = tuple(int(i) for i in self.active)
            if not act or min(act) < 0 or max(act) >= anchors.shape[0]:
                raise InvalidArgumentError("active anchor indices out of range")
            object.__setattr__(self, "active", act)

    @property
    def dim(self):
        return self.anchors.shape[1]

    @property
    def active_indices(self):
        return np.arange(self.anchors.shape[0]) if self.active is None else np.asarray(self.active)

    @property
    def active_anchors(self):
        return self.anchors[self.active_indices]

    def with_scaled_noise(self, factor):
        return RangeSensor(self.variance * factor, self.anchors, self.active)


@dataclass(frozen=True)
class MeasurementRecord:
    time: float
    kind: str
    value: object
    anchor_index: Optional[int] = None

    def __post_init__(self):
        if self.kind == "range" and self.anchor_index is None:
            raise InvalidArgumentError("range records need an anchor index")
        if self.kind == "position" and self.anchor_index is not None:
            raise InvalidArgumentError("position records carry no anchor index")
        if self.kind not in ("position", "range"):
            raise InvalidArgumentError(f"unknown measurement kind {self.kind!r}")


@dataclass
class MeasurementBatch:
    """Columnar storage for many measurements of one kind.

    Position: ``values`` is (n, d) and ``anchor_index`` is None.
    Range: ``values`` is (n,) and ``anchor_index`` is (n,).
    Rows are sorted by time.
    """

    kind: str
    times: np.ndarray
    values: np.ndarray
    anchor_index: Optional[np.ndarray] = None

    def __len__(self):
        return self.times.size

    def records(self):
        if self.kind == "position":
            return [MeasurementRecord(float(t), "position", v.copy()) for t, v in zip(self.times, self.values)]
        return [
            MeasurementRecord(float(t), "range", float(v), int(a))
            for t, v, a in zip(self.times, self.values, self.anchor_index)
        ]

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            return cls("position", np.zeros(0), np.zeros((0, 0)))
        kinds = {r.kind for r in records}
        if len(kinds) != 1:
            raise InvalidArgumentError("mixed measurement kinds are not supported")
        kind = kinds.pop()
        times = np.array([r.time for r in records])
        order = np.argsort(times, kind="stable")
        times = times[order]
        if kind == "position":
            vals = np.array([np.asarray(r.value, dtype=float) for r in records])[order]
            return cls(kind, times, vals)
        vals = np.array([float(r.value) for r in records])[order]
        idx = np.array([r.anchor_index for r in records], dtype=int)[order]
        return cls(kind, times, vals, idx)


def position_jacobian(sensor):
    return np.eye(sensor.dim)


def range_jacobian(anchor, x):
    """Row Jacobian of ||p_a - x|| w.r.t. x: ``-(p_a - x)^T / ||p_a - x||``."""
    diff = np.asarray(anchor, dtype=float) - np.asarray(x, dtype=float)
    dist = np.linalg.norm(diff)
    if dist <= EPS_DIST:
        raise SingularGeometryError(f"state within {EPS_DIST} m of anchor", anchor_index=None)
    return (-diff / dist)[None, :]


def gauss_hermite_points(mean, spread, order):
    """Tensor-product Gauss-Hermite nodes/weights for N(mean, spread)."""
    if order < 1:
        raise InvalidArgumentError("quadrature order must be >= 1")
    mean = np.asarray(mean, dtype=float)
    d = mean.size
    xi, w = hermgauss(order)
    w = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([xi] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(2.0)
    wgrid = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    root = psd_sqrt(np.atleast_2d(np.asarray(spread, dtype=float)))
    return mean + nodes @ root.T, weights


def unit_range_information(anchors, points, weights=None, anchor_ids=None):
    """sum_a E[H_a^T H_a] over weighted points (unit noise variance).

    ``points`` may be (n, d) or (..., n, d); the sum over the weighted
    point axis is returned with shape (..., d, d).
    """
    anchors = np.atleast_2d(anchors)
    points = np.asarray(points, dtype=float)
    d = points.shape[-1]
    if weights is None:
        weights = np.ones(points.shape[-2])
    lead = points.shape[:-2]
    if points.ndim == 3 and lead[0] > CHUNK:
        # bounded temporaries are markedly faster than one large pass
        parts = [unit_range_information(anchors, points[k:k + CHUNK], weights, anchor_ids)
                 for k in range(0, lead[0], CHUNK)]
        return np.concatenate(parts)
    # coordinate-major differences: comp[i] has shape (..., n, A)
    comp = [anchors[:, i] - points[..., i, None] for i in range(d)]
    r2 = comp[0] * comp[0]
    for c in comp[1:]:
        r2 += c * c
    if np.any(r2 <= EPS_DIST**2):
        a = int(np.argwhere(r2 <= EPS_DIST**2)[0][-1])
        ident = int(anchor_ids[a]) if anchor_ids is not None else a
        raise SingularGeometryError(f"quadrature point within {EPS_DIST} m of anchor {ident}", anchor_index=ident)
    # H_a^T H_a = diff diff^T / |diff|^2
    scale = weights[:, None] / r2
    out = np.empty(points.shape[:-2] + (d, d))
    for i in range(d):
        ci = comp[i] * scale
        for j in range(i, d):
            out[..., i, j] = out[..., j, i] = np.einsum("...na,...na->...", ci, comp[j])
    return out


def expected_information(sensor, nominal_state, spread=None, quadrature_order=3):
    """Expected measurement information E[H^T R^-1 H] for one query.

    For a position sensor this is R^-1 exactly. For a range sensor the sum
    over active anchors is integrated over a Gauss-Hermite grid of the given
    order per axis, centred at ``nominal_state`` with covariance ``spread``.
    """
    if isinstance(sensor, PositionSensor):
        return sensor.precision
    return range_information_along(sensor, np.atleast_2d(nominal_state), spread, quadrature_order)[0]


def range_information_along(sensor, states, spread=None, quadrature_order=3, precision=None):
    """Expected range information at each row of ``states``; shape (n, d, d).

    ``precision`` overrides 1/variance (used when the precision is the
    optimization variable).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    d = states.shape[1]
    if spread is None:
        spread = np.zeros((d, d))
    spread = np.atleast_2d(np.asarray(spread, dtype=float))
    if np.linalg.eigvalsh(0.5 * (spread + spread.T)).min() < -1e-12:
        raise InvalidArgumentError("spread must be positive semidefinite")
    offsets, weights = gauss_hermite_points(np.zeros(d), spread, quadrature_order)
    pts = states[:, None, :] + offsets[None, :, :]
    ids = sensor.active_indices
    info = unit_range_information(sensor.anchors[ids], pts, weights, anchor_ids=ids)
    prec = 1.0 / sensor.variance if precision is None else precision
    info = prec * info
    return 0.5 * (info + np.swapaxes(info, -1, -2))


def simulate_measurement(sensor, true_state, time, stream, zero_noise=False):
    """Noisy measurement(s) of ``true_state`` drawn from ``stream``.

    Returns a list of :class:`MeasurementRecord`: one for a position sensor,
    one per active anchor for a range sensor.
    """
    batch = simulate_measurements(sensor, [time], np.atleast_2d(true_state), stream, zero_noise)
    return batch.records()


def simulate_measurements(sensor, times, true_states, stream, zero_noise=False):
    """Vectorized :func:`simulate_measurement` over many query times."""
    times = np.asarray(times, dtype=float).ravel()
    true_states = np.atleast_2d(np.asarray(true_states, dtype=float))
    n, d = true_states.shape
    if isinstance(sensor, PositionSensor):
        noise = np.zeros((n, d)) if zero_noise else stream.multivariate_normal(sensor.cov, n).reshape(n, d)
        return MeasurementBatch("position", times, true_states + noise)
    ids = sensor.active_indices
    diff = sensor.anchors[ids][None, :, :] - true_states[:, None, :]
    dist = np.linalg.norm(diff, axis=-1)
    if np.any(dist <= EPS_DIST):
        a = int(ids[np.argwhere(dist <= EPS_DIST)[0][1]])
        raise SingularGeometryError(f"state coincides with anchor {a}", anchor_index=a)
    noise = np.zeros(dist.shape) if zero_noise else np.sqrt(sensor.variance) * stream.standard_normal(dist.shape)
    values = (dist + noise).ravel()
    return MeasurementBatch(
        "range",
        np.repeat(times, ids.size),
        values,
        np.tile(ids, n),
    )
