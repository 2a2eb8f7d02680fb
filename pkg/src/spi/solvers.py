"""Sensor-parameter identification along a nominal trajectory.

Three procedures, all built on the accuracy LMI:

* constant query rate: one scalar LMI with J fixed at ka^-2 I;
* per-step schedule: a scalar LMI per query, advancing the bound
  recursion with each chosen interval;
* sensor covariance: trace-minimal precision for a given rate, either
  once (constant) or per query (per-step).
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conic, pcrb
from .conic import AccuracySpec, SolveStatus
from .errors import InvalidArgumentError
from .sensors import PositionSensor, RangeSensor, expected_information, range_information_along

RATE_BRACKET = (1e-3, 1.0)
BOUND_TOL = 1e-9


@dataclass
class ScheduleSolution:
    mode: str
    status: SolveStatus
    rate: Optional[float] = None
    times: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    info_trace: list = field(default_factory=list)
    failed_step: Optional[int] = None


@dataclass
class CovarianceSolution:
    mode: str
    status: SolveStatus
    precision: list = field(default_factory=list)
    implied_cov: list = field(default_factory=list)
    times: list = field(default_factory=list)
    info_trace: list = field(default_factory=list)
    threshold_ka: Optional[float] = None
    failed_step: Optional[int] = None

    @property
    def constant_precision(self):
        return self.precision[0] if self.precision else None

    @property
    def constant_cov(self):
        return self.implied_cov[0] if self.implied_cov else None


def default_spread(acc, dim):
    """Quadrature covariance used for range information: ka^2 I."""
    return np.eye(dim) * acc.ka**2


def _check_range_geometry(sensor, dim):
    if isinstance(sensor, RangeSensor) and sensor.active_indices.size < dim:
        raise InvalidArgumentError(
            f"range scheduling in {dim}-D needs at least {dim} active anchors, got {sensor.active_indices.size}"
        )


def sample_states(nominal, step=None):
    """Nominal positions used for pessimistic aggregation (optionally thinned)."""
    if step is None or len(nominal) < 2:
        return nominal.positions
    t = np.arange(nominal.times[0], nominal.times[-1] + 0.5 * step, step)
    t = np.clip(t, nominal.times[0], nominal.times[-1])
    return nominal.interpolate(t)


def unit_information(sensor, nominal, acc, spread=None, order=3, sample_step=None):
    """Per-query information at unit noise scale, aggregated pessimistically.

    Position: H = I, so the unit information is I. Range: the minimum over
    nominal samples of lambda_min(sum_a E[H_a^T H_a]), applied isotropically.
    """
    d = nominal.dim
    if isinstance(sensor, PositionSensor) or sensor == "position":
        return np.eye(d)
    spread = default_spread(acc, d) if spread is None else spread
    infos = range_information_along(sensor, sample_states(nominal, sample_step), spread, order, precision=1.0)
    if d == 2:
        a, b, c = infos[:, 0, 0], infos[:, 0, 1], infos[:, 1, 1]
        lam = (0.5 * (a + c) - np.hypot(0.5 * (a - c), b)).min()
    else:
        lam = np.linalg.eigvalsh(infos)[:, 0].min()
    return max(lam, 0.0) * np.eye(d)


def aggregated_information(sensor, nominal, acc, spread=None, order=3, sample_step=None):
    """Worst-case measurement information along the nominal trajectory."""
    if isinstance(sensor, PositionSensor):
        return sensor.precision
    return unit_information(sensor, nominal, acc, spread, order, sample_step) / sensor.variance


def information_at(sensor, state, acc, spread=None, order=3):
    if sensor is None:
        return np.zeros((np.size(state), np.size(state)))
    if isinstance(sensor, PositionSensor):
        return sensor.precision
    spread = default_spread(acc, np.size(state)) if spread is None else spread
    return expected_information(sensor, state, spread, order)


def solve_constant_rate(prior, sensor, acc, nominal, spread=None, order=3, bracket=RATE_BRACKET,
                        rel_tol=conic.REL_TOL, m_cap=conic.M_CAP, sample_step=None):
    """Smallest constant query rate meeting ``acc`` everywhere on ``nominal``."""
    acc = acc if isinstance(acc, AccuracySpec) else AccuracySpec(acc)
    _check_range_geometry(sensor, prior.dim)
    info = aggregated_information(sensor, nominal, acc, spread, order, sample_step)
    j = pcrb.initialize_known_state(acc.ka, prior.dim, t=float(nominal.times[0]))
    lmi = conic.build_lmi(j, prior, acc, conic.SCALAR_RATE, sensor_info=info)
    m, status = conic.minimize_scalar(lmi, bracket, rel_tol=rel_tol, m_cap=m_cap)
    return ScheduleSolution("constant", status, rate=m, info_trace=[j])


def solve_per_step_schedule(prior, sensor, acc, nominal, init, spread=None, order=3, bracket=RATE_BRACKET,
                            rel_tol=conic.REL_TOL, m_cap=conic.M_CAP, max_steps=None):
    """Greedy query schedule: at each query pick the longest admissible gap.

    Query times follow t_{k+1} = t_k + 1/m_k from the start of ``nominal``
    until its end is passed; the sensor information at each query is taken
    at the linearly interpolated nominal position.
    """
    acc = acc if isinstance(acc, AccuracySpec) else AccuracySpec(acc)
    _check_range_geometry(sensor, prior.dim)
    t = float(nominal.times[0])
    t_end = float(nominal.times[-1])
    info = pcrb.InfoState(init.J, 0, t)
    sol = ScheduleSolution("per-step", SolveStatus(conic.OPTIMAL), info_trace=[info])
    total_iters = 0
    wall = 0.0
    k = 0
    while t < t_end and (max_steps is None or k < max_steps):
        x_nom = nominal.interpolate(t)[0]
        s_info = information_at(sensor, x_nom, acc, spread, order)
        lmi = conic.build_lmi(info, prior, acc, conic.SCALAR_RATE, sensor_info=s_info)
        m, st = conic.minimize_scalar(lmi, bracket, rel_tol=rel_tol, m_cap=m_cap)
        total_iters += st.iterations
        wall += st.wall_time
        if not st.ok:
            st.certificate = f"step {k}: {st.certificate}"
            sol.status = st
            sol.failed_step = k
            return sol
        dt = 1.0 / m
        info = pcrb.step(info, prior, s_info, dt)
        sol.times.append(t)
        sol.rates.append(m)
        sol.info_trace.append(info)
        t += dt
        k += 1
    sol.status = SolveStatus(conic.OPTIMAL, iterations=total_iters, wall_time=wall)
    return sol


def covariance_basis(sensor_kind, prior, unit_info=None, isotropic=False):
    if sensor_kind == "position":
        return conic.position_precision_basis(prior.dim, isotropic)
    if sensor_kind == "range":
        return conic.range_precision_basis(unit_info)
    raise InvalidArgumentError(f"unknown sensor kind {sensor_kind!r}")


def isotropic_threshold(prior, rate):
    """sqrt(Q/m): accuracy below which no sensor precision suffices (isotropic Q)."""
    q = prior.psd
    if np.allclose(q, q[0, 0] * np.eye(prior.dim), rtol=1e-12, atol=0):
        return math.sqrt(q[0, 0] / rate)
    return math.sqrt(np.linalg.eigvalsh(q).max() / rate)


def _precision_to_cov(x, sensor_kind):
    if sensor_kind == "range":
        val = float(x[0, 0])
        return np.array([[1.0 / val]]) if val > 0 else np.array([[np.inf]])
    w = np.linalg.eigvalsh(x)
    if w.min() <= 0:
        return np.full_like(x, np.inf)
    return np.linalg.inv(x)


def solve_covariance(prior, sensor, rate, acc, nominal, mode="constant", spread=None, order=3, isotropic=False,
                     sample_step=None, max_steps=None):
    """Trace-minimal sensor precision achieving ``acc`` at query ``rate`` (Hz).

    ``sensor`` is "position", or a :class:`RangeSensor` (its variance is
    ignored, only the anchors matter). For range sensors the variable is the
    scalar precision 1/sigma_r^2 shared by all anchors.
    """
    acc = acc if isinstance(acc, AccuracySpec) else AccuracySpec(acc)
    if not rate > 0:
        raise InvalidArgumentError("query rate must be positive")
    kind = "position" if (sensor == "position" or isinstance(sensor, PositionSensor)) else "range"
    if kind == "range":
        _check_range_geometry(sensor, prior.dim)
    threshold = isotropic_threshold(prior, rate)
    t0 = float(nominal.times[0])
    j0 = pcrb.initialize_known_state(acc.ka, prior.dim, t=t0)
    sol = CovarianceSolution(mode, SolveStatus(conic.OPTIMAL), threshold_ka=threshold, info_trace=[j0])

    if mode == "constant":
        unit = unit_information(sensor, nominal, acc, spread, order, sample_step)
        basis = covariance_basis(kind, prior, unit, isotropic)
        lmi = conic.build_lmi(j0, prior, acc, conic.PRECISION_MATRIX, rate=rate, basis=basis)
        x, st = conic.minimize_trace_sdp(lmi)
        sol.status = st
        if x is None:
            st.certificate += f"; isotropic threshold ka_min = sqrt(Q/m) = {threshold:.6g} m"
            return sol
        sol.precision = [x]
        sol.implied_cov = [_precision_to_cov(x, kind)]
        sol.times = [t0]
        return sol

    if mode != "per-step":
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    dt = 1.0 / rate
    t_end = float(nominal.times[-1])
    info = j0
    iters = 0
    wall = 0.0
    k = 0
    while t0 + k * dt <= t_end + 1e-12 and (max_steps is None or k < max_steps):
        t = t0 + k * dt
        x_nom = nominal.interpolate(t)[0]
        if kind == "position":
            unit = np.eye(prior.dim)
        else:
            sp = default_spread(acc, prior.dim) if spread is None else spread
            unit = range_information_along(sensor, x_nom[None, :], sp, order, precision=1.0)[0]
        basis = covariance_basis(kind, prior, unit, isotropic)
        lmi = conic.build_lmi(info, prior, acc, conic.PRECISION_MATRIX, rate=rate, basis=basis)
        x, st = conic.minimize_trace_sdp(lmi)
        iters += st.iterations
        wall += st.wall_time
        if x is None or not st.ok:
            st.certificate = f"step {k}: {st.certificate}"
            if x is None:
                st.certificate += f"; isotropic threshold ka_min = sqrt(Q/m) = {threshold:.6g} m"
            sol.status = st
            sol.failed_step = k
            return sol
        s_info = x if kind == "position" else float(x[0, 0]) * unit
        info = pcrb.step(info, prior, s_info, dt)
        sol.precision.append(x)
        sol.implied_cov.append(_precision_to_cov(x, kind))
        sol.times.append(t)
        sol.info_trace.append(info)
        k += 1
    sol.status = SolveStatus(conic.OPTIMAL, iterations=iters, wall_time=wall)
    return sol


def bound_trace(prior, sensor, acc, nominal, rate, init=None, spread=None, order=3, horizon=None):
    """lambda_max(J^-1) at each query of a constant-rate schedule.

    Returns ``(times, bounds)`` where ``bounds[k]`` bounds the worst-direction
    error variance predicted for time ``times[k]``; the first entry is the
    initial state. ``sensor=None`` means no measurements.
    """
    acc = acc if isinstance(acc, AccuracySpec) else AccuracySpec(acc)
    t0 = float(nominal.times[0])
    t_end = float(nominal.times[-1]) if horizon is None else t0 + horizon
    info = init if init is not None else pcrb.initialize_known_state(acc.ka, prior.dim, t=t0)
    dt = 1.0 / rate
    n = int(math.floor((t_end - t0) / dt + 1e-9))
    times = [t0]
    bounds = [info.bound]
    for k in range(n):
        t = t0 + k * dt
        s_info = information_at(sensor, nominal.interpolate(t)[0], acc, spread, order)
        info = pcrb.step(info, prior, s_info, dt)
        times.append(t0 + (k + 1) * dt)
        bounds.append(info.bound)
    return np.array(times), np.array(bounds)
