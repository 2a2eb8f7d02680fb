"""Simulate -> solve -> measure -> estimate -> evaluate loop.

Every (ka index, trial) pair is an independent task with its own derived
seed, so results do not depend on the number of workers or completion
order. Within a task, separate sub-seeds drive the input draw, the
ground-truth noise, each variant's measurement noise and the initial-state
prior, which keeps the optimal and suboptimal variants paired on the same
ground truth.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conic, estimation, pcrb, solvers
from .config import SOLVE
from .errors import ConfigError, SpiError
from .motion import MotionPrior, PiecewiseConstantInput, nominal_trajectory, sample_trajectory
from .rng import GaussianStream, derive_seed
from .sensors import PositionSensor, RangeSensor, simulate_measurements

# sub-seed tags
SEED_INPUT, SEED_TRUTH, SEED_MEAS, SEED_X0 = 1, 2, 3, 5

OPTIMAL_VARIANT = "optimal"
SUBOPTIMAL_VARIANT = "suboptimal"


@dataclass
class ResultRow:
    ka: float
    variant: str
    trial: object  # int, or "mean"
    solved: list  # [rate] or covariance entries
    rmse: float
    status: str
    solver_time: Optional[float] = None
    note: str = ""


@dataclass
class TrialSetup:
    x0: np.ndarray
    u: PiecewiseConstantInput
    nominal: object
    seed: int
    grid: np.ndarray = field(repr=False, default=None)


def motion_prior(cfg):
    return MotionPrior(cfg.motion.q)


def make_sensor(cfg, covariance=None):
    """Sensor from config; ``covariance`` overrides the configured noise."""
    kind = cfg.sensor.kind
    cov = cfg.sensor.covariance if covariance is None else covariance
    if kind == "none":
        return None
    if kind == "position":
        if isinstance(cov, str):
            cov = 1.0  # placeholder, only the measurement model is used
        cov = np.asarray(cov, dtype=float)
        return PositionSensor(cov if cov.ndim == 2 else float(cov) * np.eye(cfg.dimension))
    var = 1.0 if isinstance(cov, str) else float(np.asarray(cov).ravel()[0])
    return RangeSensor(var, cfg.sensor.anchors)


def reflected_input(x0, velocities, segment, duration, arena):
    """Piecewise-constant velocity that bounces off the box [-arena, arena]^d.

    ``velocities[i]`` is the commanded velocity of segment i; when the
    noise-free path reaches a wall the normal velocity component flips.
    ``arena <= 0`` disables reflection.
    """
    x = np.array(x0, dtype=float)
    d = x.size
    breaks, values = [], []
    n_seg = max(1, int(math.ceil(duration / segment - 1e-12)))
    for i in range(n_seg):
        t = i * segment
        t_end = min((i + 1) * segment, duration) if i < n_seg - 1 else duration
        u = np.asarray(velocities[i], dtype=float)
        if arena > 0:
            # push headings back inside if the segment starts on a wall
            u = np.where((x >= arena) & (u > 0) | (x <= -arena) & (u < 0), -u, u)
        for _ in range(1000):
            breaks.append(t)
            values.append(u.copy())
            if arena <= 0 or not np.any(u):
                x = x + u * (t_end - t)
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                hit = np.where(u > 0, (arena - x) / u, np.where(u < 0, (-arena - x) / u, np.inf))
            hit = np.maximum(hit, 0.0)
            j = int(np.argmin(hit))
            if t + hit[j] >= t_end - 1e-12:
                x = x + u * (t_end - t)
                break
            x = x + u * hit[j]
            t = t + hit[j]
            u = u.copy()
            u[j] = -u[j]
        else:
            raise SpiError("input reflection did not terminate")
    breaks = np.array(breaks)
    values = np.array(values).reshape(-1, d)
    keep = np.concatenate([np.diff(breaks) > 1e-12, [True]])
    return PiecewiseConstantInput(breaks[keep], values[keep])


def trial_setup(cfg, seed):
    m = cfg.motion
    d = cfg.dimension
    stream = GaussianStream(derive_seed(seed, SEED_INPUT))
    x0 = stream.uniform(np.array(m.x0_low), np.array(m.x0_high), d)
    segment = m.duration if m.input_segment is None else m.input_segment
    n_seg = max(1, int(math.ceil(m.duration / segment - 1e-12)))
    vel = stream.uniform(np.array(m.v_low), np.array(m.v_high), (n_seg, d)).reshape(n_seg, d)
    u = reflected_input(x0, vel, segment, m.duration, m.arena)
    grid = truth_grid(m.duration, m.truth_step)
    return TrialSetup(np.asarray(x0), u, nominal_trajectory(x0, u, grid), seed, grid)


def truth_grid(duration, step):
    n = int(math.floor(duration / step + 1e-9))
    g = np.arange(n + 1) * step
    if g[-1] < duration - 1e-12:
        g = np.append(g, duration)
    return g


def query_times(rate, duration):
    """t_k = k / m for k >= 0 while t_k <= duration."""
    n = int(math.floor(duration * rate + 1e-9))
    return np.arange(n + 1) / rate


def _union_times(*arrs):
    t = np.sort(np.concatenate(arrs))
    return t[np.concatenate([[True], np.diff(t) > 1e-9])]


def estimate_rmse(cfg, prior, sensor, setup, truth, times, meas_seed, x0_seed, ka):
    batch = simulate_measurements(sensor, times, truth.interpolate(times), GaussianStream(meas_seed))
    x0_mean = setup.x0 + ka * GaussianStream(x0_seed).standard_normal(cfg.dimension)
    problem = estimation.build_problem(
        prior, sensor, batch, u=setup.u, t0=0.0, x0_mean=x0_mean, x0_info=np.eye(cfg.dimension) / ka**2
    )
    res = estimation.solve_gauss_newton(problem)
    return estimation.rmse(res.estimate, truth), res


def solve_rate(cfg, prior, ka, nominal):
    sensor = make_sensor(cfg)
    return solvers.solve_constant_rate(
        prior, sensor, ka, nominal, order=cfg.sensor.quadrature_order, rel_tol=cfg.rel_tol, m_cap=cfg.m_cap
    )


def solve_cov(cfg, prior, ka, nominal, mode="constant", max_steps=None):
    target = "position" if cfg.sensor.kind == "position" else make_sensor(cfg)
    return solvers.solve_covariance(
        prior, target, cfg.schedule.rate, ka, nominal, mode=mode, order=cfg.sensor.quadrature_order,
        max_steps=max_steps,
    )


def cov_entries(cfg, cov):
    """Upper-triangle entries (row-major) of a position covariance, or [sigma_r^2]."""
    cov = np.atleast_2d(cov)
    if cfg.sensor.kind == "range":
        return [float(cov[0, 0])]
    iu = np.triu_indices(cfg.dimension)
    return [float(v) for v in cov[iu]]


def cov_columns(cfg):
    if cfg.sensor.kind == "range":
        return ["solved_cov"]
    return [f"solved_cov_{i + 1}{j + 1}" for i, j in zip(*np.triu_indices(cfg.dimension))]


def run_trial(cfg, kind, ka_index, trial):
    """Both variants of one (ka, trial) task; returns two ResultRows."""
    ka = cfg.ka[ka_index]
    seed = derive_seed(cfg.base_seed, ka_index, trial)
    prior = motion_prior(cfg)
    setup = trial_setup(cfg, seed)
    dur = cfg.motion.duration
    t_start = time.perf_counter()
    try:
        if kind == "rate-sweep":
            sol = solve_rate(cfg, prior, ka, setup.nominal)
            solved = [sol.rate] if sol.rate is not None else [math.nan]
            variants = []
            if sol.status.ok:
                sensor = make_sensor(cfg)
                variants = [
                    (OPTIMAL_VARIANT, sensor, query_times(sol.rate, dur)),
                    (SUBOPTIMAL_VARIANT, sensor, query_times(sol.rate / cfg.rate_divisor, dur)),
                ]
        else:
            sol = solve_cov(cfg, prior, ka, setup.nominal)
            cov = sol.constant_cov
            solved = cov_entries(cfg, cov) if cov is not None else [math.nan] * len(cov_columns(cfg))
            variants = []
            if sol.status.ok:
                times = query_times(cfg.schedule.rate, dur)
                if np.all(np.isfinite(cov)):
                    variants = [
                        (OPTIMAL_VARIANT, make_sensor(cfg, cov), times),
                        (SUBOPTIMAL_VARIANT, make_sensor(cfg, cov * cfg.cov_factor), times),
                    ]
        solve_time = time.perf_counter() - t_start
    except SpiError as exc:
        return [ResultRow(ka, v, trial, [math.nan], math.nan, conic.MAX_ITERATIONS, None, f"solve failed: {exc}")
                for v in (OPTIMAL_VARIANT, SUBOPTIMAL_VARIANT)]
    status = sol.status.status
    stime = solve_time if cfg.record_timing else None
    if not variants:
        note = "" if not sol.status.ok else "unbounded covariance; nothing to simulate"
        return [ResultRow(ka, v, trial, solved, math.nan, status, stime, note)
                for v in (OPTIMAL_VARIANT, SUBOPTIMAL_VARIANT)]

    grid = _union_times(setup.grid, *[t for _, _, t in variants])
    truth = sample_trajectory(prior, setup.x0, setup.u, grid, derive_seed(seed, SEED_TRUTH))
    rows = []
    for vi, (name, sensor, times) in enumerate(variants):
        try:
            err, res = estimate_rmse(cfg, prior, sensor, setup, truth, times,
                                     derive_seed(seed, SEED_MEAS, vi), derive_seed(seed, SEED_X0), ka)
            note = "" if res.converged else "estimator did not converge"
        except SpiError as exc:
            err, note = math.nan, f"estimation failed: {exc}"
        rows.append(ResultRow(ka, name, trial, solved, err, status, stime, note))
    return rows


def _task(args):
    cfg, kind, ka_index, trial = args
    return run_trial(cfg, kind, ka_index, trial)


def run_experiment(cfg, kind, jobs=1):
    """All trial rows in (ka index, trial, variant) order, then per-(ka, variant) means."""
    if cfg.schedule.mode != "constant":
        raise ConfigError("schedule.mode", "experiments use constant schedules")
    tasks = [(cfg, kind, i, t) for i in range(len(cfg.ka)) for t in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    rows = [r for rs in results for r in rs]
    return rows + mean_rows(cfg, rows)


def mean_rows(cfg, rows):
    out = []
    for ka in cfg.ka:
        for variant in (OPTIMAL_VARIANT, SUBOPTIMAL_VARIANT):
            sel = [r for r in rows if r.ka == ka and r.variant == variant]
            vals = [r.rmse for r in sel if np.isfinite(r.rmse)]
            solved = np.array([r.solved for r in sel], dtype=float)
            solved_mean = [float(np.mean(c)) if np.all(np.isfinite(c)) else math.nan for c in solved.T]
            statuses = {r.status for r in sel}
            status = statuses.pop() if len(statuses) == 1 else conic.MAX_ITERATIONS
            times = [r.solver_time for r in sel if r.solver_time is not None]
            out.append(ResultRow(ka, variant, "mean", solved_mean, float(np.mean(vals)) if vals else math.nan,
                                 status, float(np.mean(times)) if times else None,
                                 "" if len(vals) == len(sel) else f"{len(sel) - len(vals)} trial(s) without rmse"))
    return out


def resolve_rate(cfg, prior, ka, nominal):
    """(rate, status) from the config: the given rate or a constant-rate solve."""
    if cfg.schedule.rate != SOLVE:
        return float(cfg.schedule.rate), conic.SolveStatus(conic.OPTIMAL)
    sol = solve_rate(cfg, prior, ka, nominal)
    return sol.rate, sol.status


def pcrb_trace(cfg, ka, nominal, rate_divisor=1.0):
    """Bound trace for one ka: returns (times, bounds, rate, status).

    Constant mode evaluates lambda_max(J^-1) at a constant rate; per-step
    mode follows the solved schedule (stretched by ``rate_divisor``).
    """
    prior = motion_prior(cfg)
    sensor = make_sensor(cfg)
    order = cfg.sensor.quadrature_order
    if cfg.schedule.mode == "per-step" and cfg.schedule.rate == SOLVE:
        init = pcrb.initialize_known_state(ka, cfg.dimension)
        sol = solvers.solve_per_step_schedule(prior, sensor, ka, nominal, init, order=order,
                                              rel_tol=cfg.rel_tol, m_cap=cfg.m_cap)
        if not sol.status.ok or rate_divisor == 1.0:
            times = [s.t for s in sol.info_trace]
            return np.array(times), np.array([s.bound for s in sol.info_trace]), None, sol.status
        info, times, bounds = init, [0.0], [init.bound]
        t = 0.0
        for m in sol.rates:
            dt = rate_divisor / m
            s_info = solvers.information_at(sensor, nominal.interpolate(t)[0], solvers.AccuracySpec(ka), None, order)
            info = pcrb.step(info, prior, s_info, dt)
            t += dt
            times.append(t)
            bounds.append(info.bound)
        return np.array(times), np.array(bounds), None, sol.status
    if sensor is None:
        if cfg.schedule.rate == SOLVE:
            raise ConfigError("schedule.rate", "a rate is required when no sensor is configured")
        rate, status = float(cfg.schedule.rate), conic.SolveStatus(conic.OPTIMAL)
    else:
        rate, status = resolve_rate(cfg, prior, ka, nominal)
    if not status.ok:
        return np.zeros(0), np.zeros(0), rate, status
    rate = rate / rate_divisor
    times, bounds = solvers.bound_trace(prior, sensor, ka, nominal, rate, order=order)
    return times, bounds, rate, status
