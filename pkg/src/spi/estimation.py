"""Batch MAP trajectory estimation over discrete position states.

States sit at the measurement epochs (plus optional endpoints). The cost is

    0.5 * sum_i ||x_{i+1} - x_i - u_i dt_i||^2_{Q_i^-1}
  + 0.5 * sum_meas ||y - h(x_s)||^2_{R^-1}
  + 0.5 * ||x_0 - mu_0||^2_{P_0^-1}      (optional)

whose Gauss-Newton normal matrix is block tridiagonal. It is solved as a
symmetric banded system, so each iteration is linear in trajectory length.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .errors import InvalidArgumentError, NumericalSingularityError, UnderConstrainedError
from .motion import Trajectory, as_input
from .sensors import EPS_DIST, MeasurementBatch, PositionSensor

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 50
LM_LAMBDA0 = 1e-4
LM_FACTOR = 10.0
LM_RETRIES = 10
TIME_TOL = 1e-9
COST_EPS = 100 * np.finfo(float).eps


@dataclass
class FactorGraphProblem:
    times: np.ndarray
    init: np.ndarray
    prior_weights: np.ndarray  # (n-1, d, d): Q_i^-1
    prior_offsets: np.ndarray  # (n-1, d): u_i dt_i
    kind: str
    meas_state: np.ndarray
    meas_values: np.ndarray
    meas_weight: object  # (d, d) for position, scalar for range
    anchors: Optional[np.ndarray] = None
    meas_anchor: Optional[np.ndarray] = None
    x0_mean: Optional[np.ndarray] = None
    x0_info: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.times.size
        if self.meas_state.size and (self.meas_state.min() < 0 or self.meas_state.max() >= n):
            raise InvalidArgumentError("measurement factor references a missing state")
        if self.prior_weights.shape[0] != n - 1:
            raise InvalidArgumentError("prior factors must connect consecutive states")

    @property
    def n_states(self):
        return self.times.size

    @property
    def dim(self):
        return self.init.shape[1]

    @property
    def n_prior_factors(self):
        return self.prior_weights.shape[0]

    @property
    def n_meas_factors(self):
        return self.meas_state.size


@dataclass
class EstimationResult:
    estimate: Trajectory
    iterations: int
    final_cost: float
    converged: bool
    grad_norm: float
    newton_decrement: float
    cost_history: list = field(default_factory=list)


def _as_batch(measurements):
    if isinstance(measurements, MeasurementBatch):
        return measurements
    return MeasurementBatch.from_records(measurements)


def _merge_times(times, extra):
    allt = np.concatenate([times, [t for t in extra if t is not None]])
    allt = np.sort(allt)
    if allt.size == 0:
        return allt
    keep = np.concatenate([[True], np.diff(allt) > TIME_TOL])
    return allt[keep]


def trilaterate(anchors, ranges):
    """Linear least-squares position from ranges to >= d+1 anchors (or None)."""
    anchors = np.asarray(anchors, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    d = anchors.shape[1]
    if anchors.shape[0] < d + 1:
        return None
    a = 2.0 * (anchors[1:] - anchors[0])
    b = ranges[0] ** 2 - ranges[1:] ** 2 + (anchors[1:] ** 2).sum(1) - (anchors[0] ** 2).sum()
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    return sol if rank == d else None


def _trilaterate_epochs(anchors, anchor_ids, values, state_of, guess, known):
    """Trilaterate every epoch in place; epochs sharing one anchor set are batched."""
    if state_of.size == 0:
        return
    states, starts = np.unique(state_of, return_index=True)
    ends = np.append(starts[1:], state_of.size)
    sizes = ends - starts
    first = anchor_ids[starts[0]:ends[0]]
    same = bool(np.all(sizes == sizes[0])) and np.array_equal(
        anchor_ids.reshape(states.size, sizes[0]), np.broadcast_to(first, (states.size, sizes[0]))
    )
    d = anchors.shape[1]
    if same and sizes[0] >= d + 1:
        pa = anchors[first]
        a = 2.0 * (pa[1:] - pa[0])
        if np.linalg.matrix_rank(a) == d:
            r = values.reshape(states.size, sizes[0])
            b = r[:, :1] ** 2 - r[:, 1:] ** 2 + (pa[1:] ** 2).sum(1) - (pa[0] ** 2).sum()
            guess[states] = b @ np.linalg.pinv(a).T
            known[states] = True
        return
    for s, a0, a1 in zip(states, starts, ends):
        p = trilaterate(anchors[anchor_ids[a0:a1]], values[a0:a1])
        if p is not None:
            guess[s] = p
            known[s] = True


def _fill_gaps(times, guess, known):
    """Linear interpolation of known guesses; zero everywhere if none known."""
    if not known.any():
        return np.zeros_like(guess)
    out = guess.copy()
    for i in range(guess.shape[1]):
        out[:, i] = np.interp(times, times[known], guess[known, i])
    return out


def build_problem(prior, sensor, measurements, u=None, init_mode="auto", t0=None, t_end=None,
                  x0_mean=None, x0_info=None):
    """Assemble the factor graph for ``measurements`` (records or a batch).

    States are created at the distinct measurement times plus ``t0`` and
    ``t_end`` when given. ``x0_mean``/``x0_info`` add a Gaussian prior on the
    first state. ``init_mode`` is "auto" (measurements or trilateration),
    "zero", or an (n, d) array.
    """
    batch = _as_batch(measurements)
    d = prior.dim
    has_x0 = x0_mean is not None
    if len(batch) == 0 and not has_x0:
        raise UnderConstrainedError("no measurements and no initial-state prior")
    if len(batch) and np.any(np.diff(batch.times) < 0):
        raise InvalidArgumentError("measurements must be time-sorted")
    if len(batch) and batch.kind != sensor.kind:
        raise InvalidArgumentError(f"{batch.kind} measurements given for a {sensor.kind} sensor")
    times = _merge_times(batch.times, [t0, t_end])
    if times.size == 0:
        times = np.array([0.0])
    n = times.size
    state_of = np.clip(np.searchsorted(times, batch.times - TIME_TOL), 0, n - 1)

    dts = np.diff(times)
    u_in = as_input(u, d)
    offsets = u_in.displacement(times[:-1], times[1:]).reshape(n - 1, d)
    qinv = np.linalg.inv(prior.psd)
    weights = qinv[None, :, :] / dts[:, None, None]

    guess = np.zeros((n, d))
    known = np.zeros(n, dtype=bool)
    if isinstance(sensor, PositionSensor):
        kind = "position"
        values = np.asarray(batch.values, dtype=float).reshape(len(batch), d) if len(batch) else np.zeros((0, d))
        w = np.linalg.inv(sensor.cov)
        anchors = anchor_ids = None
        counts = np.bincount(state_of, minlength=n)
        np.add.at(guess, state_of, values)
        known = counts > 0
        guess[known] /= counts[known][:, None]
    else:
        kind = "range"
        values = np.asarray(batch.values, dtype=float).ravel()
        w = 1.0 / sensor.variance
        anchors = sensor.anchors
        anchor_ids = np.asarray(batch.anchor_index, dtype=int) if len(batch) else np.zeros(0, dtype=int)
        _trilaterate_epochs(anchors, anchor_ids, values, state_of, guess, known)
    if has_x0:
        guess[0] = x0_mean
        known[0] = True

    if isinstance(init_mode, str):
        if init_mode == "auto":
            init = _fill_gaps(times, guess, known)
        elif init_mode == "zero":
            init = np.zeros((n, d))
        else:
            raise InvalidArgumentError(f"unknown init mode {init_mode!r}")
    else:
        init = np.asarray(init_mode, dtype=float).reshape(n, d)

    return FactorGraphProblem(
        times=times,
        init=init,
        prior_weights=weights,
        prior_offsets=offsets,
        kind=kind,
        meas_state=state_of.astype(int),
        meas_values=values,
        meas_weight=w,
        anchors=anchors,
        meas_anchor=anchor_ids,
        x0_mean=None if not has_x0 else np.asarray(x0_mean, dtype=float),
        x0_info=None if not has_x0 else np.atleast_2d(np.asarray(x0_info, dtype=float)),
        inputs=u_in(times).reshape(n, d),
    )


def _residual_cost(problem, x):
    r = np.diff(x, axis=0) - problem.prior_offsets
    cost = np.einsum("ni,nij,nj->", r, problem.prior_weights, r)
    if problem.x0_mean is not None:
        e = x[0] - problem.x0_mean
        cost += e @ problem.x0_info @ e
    if problem.n_meas_factors:
        if problem.kind == "position":
            e = x[problem.meas_state] - problem.meas_values
            cost += np.einsum("ni,ij,nj->", e, problem.meas_weight, e)
        else:
            diff = x[problem.meas_state] - problem.anchors[problem.meas_anchor]
            e = np.linalg.norm(diff, axis=1) - problem.meas_values
            cost += problem.meas_weight * (e @ e)
    return 0.5 * float(cost)


def linearize(problem, x):
    """Return (cost, gradient (n, d), diag blocks (n, d, d), sub-diag blocks (n-1, d, d))."""
    n, d = x.shape
    g = np.zeros((n, d))
    hd = np.zeros((n, d, d))
    r = np.diff(x, axis=0) - problem.prior_offsets
    wr = np.einsum("nij,nj->ni", problem.prior_weights, r)
    g[1:] += wr
    g[:-1] -= wr
    hd[1:] += problem.prior_weights
    hd[:-1] += problem.prior_weights
    ho = -problem.prior_weights.copy()  # block (i+1, i)
    if problem.x0_mean is not None:
        g[0] += problem.x0_info @ (x[0] - problem.x0_mean)
        hd[0] += problem.x0_info
    s = problem.meas_state
    if s.size:
        if problem.kind == "position":
            e = x[s] - problem.meas_values
            np.add.at(g, s, e @ problem.meas_weight.T)
            np.add.at(hd, s, np.broadcast_to(problem.meas_weight, (s.size, d, d)))
        else:
            diff = x[s] - problem.anchors[problem.meas_anchor]
            dist = np.linalg.norm(diff, axis=1)
            if np.any(dist <= EPS_DIST):
                raise NumericalSingularityError("state estimate coincides with an anchor")
            jac = diff / dist[:, None]
            e = dist - problem.meas_values
            w = problem.meas_weight
            np.add.at(g, s, w * e[:, None] * jac)
            np.add.at(hd, s, w * jac[:, :, None] * jac[:, None, :])
    return _residual_cost(problem, x), g, hd, ho


def _to_banded(hd, ho, damping=0.0):
    """Lower banded storage of the block-tridiagonal symmetric matrix."""
    n, d, _ = hd.shape
    size = n * d
    ab = np.zeros((2 * d, size))
    if damping:
        hd = hd + damping * np.einsum("nii->ni", hd)[:, :, None] * np.eye(d)
    # ab[k, j] = H[j + k, j]
    for k in range(d):
        # within diagonal blocks
        for c in range(d - k):
            ab[k, c::d] = hd[:, c + k, c]
    for k in range(1, 2 * d):
        for c in range(d):
            row = c + k
            if row >= d and row - d < d:
                # element of block (i+1, i): row offset row-d, column c
                ab[k, c:size - d:d] = ho[:, row - d, c]
    return ab


def solve_block_tridiagonal(hd, ho, rhs, damping=0.0):
    """Solve H x = rhs with H given by diagonal/sub-diagonal d x d blocks."""
    ab = _to_banded(hd, ho, damping)
    try:
        return solveh_banded(ab, rhs.ravel(), lower=True).reshape(rhs.shape)
    except LinAlgError as exc:
        raise NumericalSingularityError("normal equations are not positive definite") from exc


def dense_normal_matrix(hd, ho):
    """Dense H from blocks (for checks and small problems)."""
    n, d, _ = hd.shape
    h = np.zeros((n * d, n * d))
    for i in range(n):
        h[i * d:(i + 1) * d, i * d:(i + 1) * d] = hd[i]
    for i in range(n - 1):
        h[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d] = ho[i]
        h[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = ho[i].T
    return h


def solve_gauss_newton(problem, max_iter=MAX_ITER, grad_tol=GRAD_TOL, step_tol=STEP_TOL):
    """Damped Gauss-Newton on the MAP cost.

    Convergence is declared when the Newton decrement sqrt(g^T H^-1 g)
    drops below ``grad_tol`` (scale-free in the factor weights), when the
    predicted reduction dec^2/2 is lost in the cost's rounding, or the
    accepted step is shorter than ``step_tol``. Damping H + lam diag(H) is
    used only when a plain step fails to decrease the cost.
    """
    x = problem.init.copy()
    cost, g, hd, ho = linearize(problem, x)
    history = [cost]
    converged = False
    iters = 0
    dec = np.inf
    while True:
        delta = solve_block_tridiagonal(hd, ho, -g)
        dec = float(np.sqrt(max(-(g * delta).sum(), 0.0)))
        # the second test catches decrements whose predicted reduction is
        # below the rounding floor of the cost itself
        if dec < grad_tol or 0.5 * dec**2 <= COST_EPS * max(cost, 1.0):
            converged = True
            break
        if iters >= max_iter:
            break
        accepted = False
        lam = 0.0
        for attempt in range(LM_RETRIES + 1):
            if attempt:
                lam = LM_LAMBDA0 if attempt == 1 else lam * LM_FACTOR
                delta = solve_block_tridiagonal(hd, ho, -g, damping=lam)
            cand = x + delta
            try:
                new_cost = _residual_cost(problem, cand)
            except FloatingPointError:
                continue
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
        if not accepted:
            break
        x = cand
        iters += 1
        step = float(np.linalg.norm(delta))
        cost, g, hd, ho = linearize(problem, x)
        history.append(cost)
        if step < step_tol:
            dec = float(np.sqrt(max(-(g * solve_block_tridiagonal(hd, ho, -g)).sum(), 0.0)))
            converged = True
            break
    est = Trajectory(problem.times, x, problem.inputs)
    return EstimationResult(est, iters, cost, converged, float(np.abs(g).max()), dec, history)


def rmse(estimate, truth):
    """Root mean squared position error at the estimate times.

    Truth is linearly interpolated to the estimate times, which must lie
    inside the truth's time span.
    """
    te = np.asarray(estimate.times)
    tt = np.asarray(truth.times)
    if te.size == 0:
        raise InvalidArgumentError("empty estimate")
    if te.min() < tt.min() - TIME_TOL or te.max() > tt.max() + TIME_TOL:
        raise InvalidArgumentError("estimate times fall outside the ground-truth time span")
    ref = truth.interpolate(te)
    err = np.asarray(estimate.positions) - ref
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
