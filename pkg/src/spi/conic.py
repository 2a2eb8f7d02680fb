"""Accuracy LMI and the small solvers that act on it.

The accuracy requirement lambda_max(J_{k+1}^-1) <= ka^2 is equivalent to

    S(theta) = [[J_k + D11(theta),  D12(theta)],
                [D21(theta),        D22(theta) - ka^-2 I]]  >= 0

Two parametrizations are supported:

* ``scalar-rate``: theta = m (Hz), the process covariance is Q / m.
  The feasible set in m is an interval, so bisection is exact.
* ``precision-matrix``: theta parametrizes the sensor precision X = R^-1,
  which enters the (1,1) block affinely through E[H^T X H]. The
  trace-minimal X is found with a dense log-barrier method.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

FEAS_TOL = 1e-9
REL_TOL = 1e-6
M_CAP = 1e6
SYM_TOL = 1e-9
KKT_TOL = 1e-7
POLISH_GAP = 1e-4

SCALAR_RATE = "scalar-rate"
PRECISION_MATRIX = "precision-matrix"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class AccuracySpec:
    ka: float

    def __post_init__(self):
        if not (np.isfinite(self.ka) and self.ka > 0):
            raise InvalidArgumentError("accuracy must be positive")
        object.__setattr__(self, "ka", float(self.ka))

    @property
    def info_floor(self):
        """ka^-2, the smallest admissible eigenvalue of J."""
        return self.ka**-2

    def bound_matrix(self, dim):
        return np.eye(dim) * self.info_floor


@dataclass
class SolveStatus:
    status: str
    certificate: str = ""
    iterations: int = 0
    wall_time: float = 0.0
    note: str = ""
    kkt_residual: float = float("nan")

    @property
    def ok(self):
        return self.status == OPTIMAL

    def to_dict(self):
        return {
            "status": self.status,
            "certificate": self.certificate,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "note": self.note,
        }


@dataclass
class LmiInstance:
    """S(theta) for one step of the accuracy constraint.

    For ``scalar-rate`` instances ``sensor_info`` is fixed and the parameter
    is the query rate. For ``precision-matrix`` instances ``x_basis[i]`` and
    ``info_basis[i]`` give the i-th basis direction of X and its image
    E[H^T X H]; ``qk_inv`` is fixed by the given rate.
    """

    kind: str
    J: np.ndarray
    psd_inv: np.ndarray
    ka: float
    sensor_info: np.ndarray = None
    qk_inv: np.ndarray = None
    x_basis: list = field(default_factory=list)
    info_basis: list = field(default_factory=list)

    @property
    def dim(self):
        return self.J.shape[0]

    def _assemble(self, top_extra, qinv):
        d = self.dim
        s = np.empty((2 * d, 2 * d))
        s[:d, :d] = self.J + qinv + top_extra
        s[:d, d:] = -qinv
        s[d:, :d] = -qinv.T
        s[d:, d:] = qinv - np.eye(d) / self.ka**2
        return s

    def matrix(self, theta):
        if self.kind == SCALAR_RATE:
            return self._assemble(self.sensor_info, self.psd_inv * float(theta))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        extra = np.tensordot(theta, np.asarray(self.info_basis), axes=1)
        return self._assemble(extra, self.qk_inv)

    def x_matrix(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return np.tensordot(theta, np.asarray(self.x_basis), axes=1)

    @property
    def lower_right(self):
        return self.qk_inv - np.eye(self.dim) / self.ka**2


def position_precision_basis(dim, isotropic=False):
    """Basis for a position-sensor precision X (H = I, so E[H^T X H] = X)."""
    if isotropic:
        return [np.eye(dim)], [np.eye(dim)]
    basis = []
    for i in range(dim):
        for j in range(i, dim):
            b = np.zeros((dim, dim))
            b[i, j] = b[j, i] = 1.0
            basis.append(b)
    return basis, [b.copy() for b in basis]


def range_precision_basis(unit_info):
    """Scalar precision 1/sigma_r^2 shared across anchors."""
    return [np.ones((1, 1))], [np.asarray(unit_info, dtype=float)]


def build_lmi(J, prior, acc, kind, sensor_info=None, rate=None, basis=None):
    """Build S(theta).

    ``J`` is an ``InfoState`` or a d x d matrix. ``kind=SCALAR_RATE`` needs
    ``sensor_info``; ``kind=PRECISION_MATRIX`` needs ``rate`` (Hz) and
    ``basis`` as returned by :func:`position_precision_basis` or
    :func:`range_precision_basis`.
    """
    if not isinstance(acc, AccuracySpec):
        acc = AccuracySpec(acc)
    if prior.zero_noise:
        raise InvalidArgumentError("the accuracy LMI needs an invertible process PSD")
    J = np.asarray(getattr(J, "J", J), dtype=float)
    psd_inv = np.linalg.inv(prior.psd)
    psd_inv = 0.5 * (psd_inv + psd_inv.T)
    if kind == SCALAR_RATE:
        if sensor_info is None:
            raise InvalidArgumentError("scalar-rate LMI needs sensor information")
        return LmiInstance(kind, J, psd_inv, acc.ka, sensor_info=np.asarray(sensor_info, dtype=float))
    if kind == PRECISION_MATRIX:
        if rate is None or not rate > 0:
            raise InvalidArgumentError("precision-matrix LMI needs a positive rate")
        if basis is None:
            basis = position_precision_basis(prior.dim)
        xb, ib = basis
        return LmiInstance(kind, J, psd_inv, acc.ka, qk_inv=psd_inv * rate, x_basis=list(xb), info_basis=list(ib))
    raise InvalidArgumentError(f"unknown LMI kind {kind!r}")


def min_eig(s):
    return float(np.linalg.eigvalsh(0.5 * (s + s.T))[0])


def is_feasible(s, feas_tol=FEAS_TOL):
    s = np.asarray(s, dtype=float)
    if np.abs(s - s.T).max() > SYM_TOL * max(1.0, np.abs(s).max()):
        raise InvalidArgumentError("LMI matrix is not symmetric")
    return min_eig(s) >= -feas_tol


def minimize_scalar(lmi, bracket=(1e-3, 1.0), rel_tol=REL_TOL, m_cap=M_CAP, feas_tol=FEAS_TOL):
    """Smallest rate m with S(m) >= 0, by bracket expansion and bisection.

    Returns ``(m, SolveStatus)``; ``m`` is None when infeasible.
    """
    if lmi.kind != SCALAR_RATE:
        raise InvalidArgumentError("minimize_scalar needs a scalar-rate LMI")
    lo, hi = map(float, bracket)
    if not (0 < lo < hi):
        raise InvalidArgumentError(f"invalid bracket {bracket}")
    start = time.perf_counter()
    it = 0

    def feasible(m):
        return is_feasible(lmi.matrix(m), feas_tol)

    if feasible(lo):
        return lo, SolveStatus(OPTIMAL, iterations=1, wall_time=time.perf_counter() - start,
                               note="lower bracket feasible")
    while not feasible(hi):
        it += 1
        if hi >= m_cap:
            return None, SolveStatus(
                INFEASIBLE,
                certificate=f"upper bracket m_cap={m_cap:g} Hz infeasible",
                iterations=it,
                wall_time=time.perf_counter() - start,
            )
        lo, hi = hi, min(2.0 * hi, m_cap)
    while hi - lo > rel_tol * hi:
        it += 1
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi, SolveStatus(OPTIMAL, iterations=it, wall_time=time.perf_counter() - start)


def _chol_logdet(m):
    try:
        c = np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        return None
    return 2.0 * np.log(np.diag(c)).sum()


def _whiten(chol, m):
    li = np.linalg.inv(chol)
    w = li @ m @ li.T
    return 0.5 * (w + w.T)


def schur_offset(lmi):
    """M0 with S(X) >= 0  <=>  M0 + E[H^T X H] >= 0, given D22 - ka^-2 I > 0.

    Working with the d x d Schur complement instead of the 2d x 2d matrix
    keeps the barrier well conditioned: S mixes entries of size m/Q with
    a near-zero eigenvalue at the optimum.
    """
    # Q^-1 - Q^-1 (Q^-1 - jI)^-1 Q^-1 = -j (I - j Q_k)^-1, which avoids
    # cancelling terms of size m/Q
    j = 1.0 / lmi.ka**2
    qk = np.linalg.inv(lmi.qk_inv)
    m0 = lmi.J - j * np.linalg.inv(np.eye(lmi.dim) - j * qk)
    return 0.5 * (m0 + m0.T)


def _sym_basis(n):
    out = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            out.append(e)
    return out


def _svec_sym(m):
    """Upper triangle of the symmetric part of ``m``."""
    s = 0.5 * (m + m.T)
    return s[np.triu_indices(s.shape[0])]


def kkt_residual(m0, A, B, c, theta, zm, zx):
    """Relative KKT residual of a primal-dual pair for min c.theta s.t. M, X >= 0.

    Max of: stationarity, complementarity (||M Z_M|| + ||X Z_X||) and the
    PSD violation of the four matrices, each scaled by its natural size.
    """
    M = m0 + np.tensordot(theta, A, axes=1)
    X = np.tensordot(theta, B, axes=1)
    obj = float(c @ theta)
    stat = c - np.einsum("kij,ji->k", A, zm) - np.einsum("kij,ji->k", B, zx)
    comp = np.linalg.norm(M @ zm) + np.linalg.norm(X @ zx)
    viol = 0.0
    for mat in (M, X, zm, zx):
        w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
        viol = max(viol, -w.min() / (1.0 + np.abs(w).max()))
    return max(np.linalg.norm(stat) / (1.0 + np.linalg.norm(c)), comp / (1.0 + abs(obj)), viol)


def _complementarity_polish(m0, A, B, c, theta, zm, zx, steps=8):
    """Newton on stationarity + sym(M Z_M) = 0 + sym(X Z_X) = 0.

    Started near the central path, this converges quadratically to a
    strictly complementary solution without the 1/t conditioning of the
    barrier Hessian. Returns ``(theta, Z_M, Z_X, kkt)`` for the best iterate.
    """
    d, r, p = m0.shape[0], B.shape[1], c.size
    em, ex = _sym_basis(d), _sym_basis(r)
    zm_c = np.array([zm[i, j] for i in range(d) for j in range(i, d)])
    zx_c = np.array([zx[i, j] for i in range(r) for j in range(i, r)])
    em_a, ex_a = np.asarray(em), np.asarray(ex)

    def unpack(v):
        return v[:p], np.tensordot(v[p:p + len(em)], em_a, axes=1), np.tensordot(v[p + len(em):], ex_a, axes=1)

    def resid(v):
        th, zmm, zxx = unpack(v)
        M = m0 + np.tensordot(th, A, axes=1)
        X = np.tensordot(th, B, axes=1)
        stat = c - np.einsum("kij,ji->k", A, zmm) - np.einsum("kij,ji->k", B, zxx)
        return np.concatenate([stat, _svec_sym(M @ zmm), _svec_sym(X @ zxx)]), M, X, zmm, zxx

    v = np.concatenate([theta, zm_c, zx_c])
    best = (theta, zm, zx, kkt_residual(m0, A, B, c, theta, zm, zx))
    for _ in range(steps):
        f, M, X, zmm, zxx = resid(v)
        cols = []
        for k in range(p):
            cols.append(np.concatenate([np.zeros(p), _svec_sym(A[k] @ zmm), _svec_sym(B[k] @ zxx)]))
        for e in em:
            cols.append(np.concatenate([-np.einsum("kij,ji->k", A, e), _svec_sym(M @ e), np.zeros(len(ex))]))
        for e in ex:
            cols.append(np.concatenate([-np.einsum("kij,ji->k", B, e), np.zeros(len(em)), _svec_sym(X @ e)]))
        jac = np.column_stack(cols)
        try:
            dv = np.linalg.lstsq(jac, -f, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        v = v + dv
        th, zmm, zxx = unpack(v)
        k = kkt_residual(m0, A, B, c, th, zmm, zxx)
        if k < best[3]:
            best = (th, zmm, zxx, k)
        elif k > 10 * best[3]:
            break
    return best


def minimize_trace_sdp(lmi, max_iter=500, feas_tol=FEAS_TOL, gap_tol=1e-8, mu=20.0):
    """min tr(X) s.t. S(X) >= 0, X >= 0 by a log-barrier path-following method.

    The lower-right block is checked analytically first; the barrier then
    acts on the Schur complement of S and on X. Returns ``(X, SolveStatus)``
    with ``X`` None when infeasibility is certified.
    """
    if lmi.kind != PRECISION_MATRIX:
        raise InvalidArgumentError("minimize_trace_sdp needs a precision-matrix LMI")
    start = time.perf_counter()

    def elapsed():
        return time.perf_counter() - start

    lr_eig = min_eig(lmi.lower_right)
    scale = max(1.0, np.abs(lmi.qk_inv).max())
    if lr_eig <= 1e-12 * scale:
        return None, SolveStatus(
            INFEASIBLE,
            certificate=(
                f"lower-right block D22 - ka^-2 I has min eigenvalue {lr_eig:.6g} <= 0; "
                "its Schur complement cannot be PSD for any sensor precision"
            ),
            wall_time=elapsed(),
        )

    m0 = schur_offset(lmi)
    A = np.asarray(lmi.info_basis)
    B = np.asarray(lmi.x_basis)
    c = np.array([np.trace(b) for b in B])
    p = c.size

    def m_of(th):
        return m0 + np.tensordot(th, A, axes=1)

    def x_of(th):
        return np.tensordot(th, B, axes=1)

    def strictly_feasible(th):
        return _chol_logdet(m_of(th)) is not None and _chol_logdet(x_of(th)) is not None

    # phase 1: grow X = alpha I until both barrier terms are finite
    theta_id = np.linalg.lstsq(B.reshape(p, -1).T, np.eye(B.shape[1]).ravel(), rcond=None)[0]
    theta = None
    alpha = max(1.0, np.abs(m0).max())
    for _ in range(100):
        if strictly_feasible(alpha * theta_id):
            theta = alpha * theta_id
            break
        alpha *= 4.0
    if theta is None:
        return None, SolveStatus(
            INFEASIBLE,
            certificate="no strictly feasible point found within iteration budget (weak certificate)",
            iterations=100,
            wall_time=elapsed(),
        )

    n_barrier = A.shape[1] + B.shape[1]

    def line_search(th, dx, t, dec2):
        # f(th + s dx) - f(th) via generalized eigenvalues of the step
        try:
            mus = np.concatenate([
                np.linalg.eigvalsh(_whiten(np.linalg.cholesky(m_of(th)), np.tensordot(dx, A, axes=1))),
                np.linalg.eigvalsh(_whiten(np.linalg.cholesky(x_of(th)), np.tensordot(dx, B, axes=1))),
            ])
        except np.linalg.LinAlgError:
            return 0.0
        lin = t * c @ dx
        step = 1.0
        # inside the quadratic-convergence region of a self-concordant
        # barrier the full step is feasible and decreasing
        if dec2 < 0.25 and mus.min() > -0.5 and strictly_feasible(th + dx):
            return 1.0
        if mus.min() < 0:
            step = min(1.0, 0.99 / -mus.min())
        while step > 1e-14:
            if step * lin - np.log1p(step * mus).sum() <= -0.25 * step * dec2 and strictly_feasible(th + step * dx):
                return step
            step *= 0.5
        return 0.0

    t = n_barrier / max(c @ theta, 1e-300)
    cnorm = np.linalg.norm(c)
    iters = 0
    kkt = np.inf
    best = None
    status = MAX_ITERATIONS
    while iters < max_iter:
        polish = 0
        prev_dec2 = np.inf
        for _ in range(50):
            if iters >= max_iter:
                break
            iters += 1
            try:
                ma = np.einsum("ij,kjl->kil", np.linalg.inv(m_of(theta)), A)
                xb = np.einsum("ij,kjl->kil", np.linalg.inv(x_of(theta)), B)
            except np.linalg.LinAlgError:
                iters = max_iter
                break
            grad = t * c - np.einsum("kii->k", ma) - np.einsum("kii->k", xb)
            hess = np.einsum("kij,lji->kl", ma, ma) + np.einsum("kij,lji->kl", xb, xb)
            dx = -np.linalg.solve(0.5 * (hess + hess.T), grad)
            dec2 = -grad @ dx
            # quadratic convergence: a couple of steps past 1e-12 reach the
            # roundoff floor, which the stationarity check below needs
            if dec2 <= 1e-24 or (dec2 <= 1e-12 and polish >= 2):
                break
            # stagnation at the roundoff floor of an ill-conditioned centre
            if dec2 <= 1e-8 and dec2 >= prev_dec2:
                break
            if dec2 <= 1e-12:
                polish += 1
            prev_dec2 = dec2
            step = line_search(theta, dx, t, dec2)
            if step == 0.0:
                break
            theta = theta + step * dx
        gap = n_barrier / t
        obj = c @ theta
        # duals Z_M = M^-1 / t, Z_X = X^-1 / t leave stationarity residual
        # grad / t; complementarity gap is n / t
        kkt = max(np.linalg.norm(grad) / (t * cnorm), gap / max(1.0, abs(obj)))
        if gap <= POLISH_GAP * max(1.0, abs(obj)):
            try:
                th_p, _, _, kkt_p = _complementarity_polish(
                    m0, A, B, c, theta, np.linalg.inv(m_of(theta)) / t, np.linalg.inv(x_of(theta)) / t)
            except np.linalg.LinAlgError:
                kkt_p = np.inf
            if kkt_p < KKT_TOL:
                theta, kkt = th_p, kkt_p
                status = OPTIMAL
                break
        if kkt < KKT_TOL:
            best = (theta.copy(), kkt)
            if gap <= gap_tol * max(1.0, abs(obj)):
                status = OPTIMAL
                break
        elif best is not None:
            # the stationarity floor (roughly cond * eps) has overtaken the
            # shrinking gap; the last certified iterate is the answer
            theta, kkt = best
            status = OPTIMAL
            break
        t *= mu
    if status != OPTIMAL and best is not None:
        theta, kkt = best
        status = OPTIMAL

    x_opt = x_of(theta)
    x_opt = 0.5 * (x_opt + x_opt.T)
    if status == OPTIMAL and min_eig(lmi.matrix(theta)) < -feas_tol:
        status = MAX_ITERATIONS
    return x_opt, SolveStatus(status, iterations=iters, wall_time=elapsed(), kkt_residual=float(kkt),
                              note="" if status == OPTIMAL else "best iterate returned")
