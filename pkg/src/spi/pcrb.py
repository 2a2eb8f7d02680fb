"""Recursive predictive posterior Cramer-Rao bound.

For a WNOV prior (F = I, Q_k = Q dt) the one-step-ahead information obeys

    J_{k+1} = D22 - D21 (D11 + J_k)^-1 D12
    D11 = Q_k^-1 + E[H^T R^-1 H],  D12 = D21^T = -Q_k^-1,  D22 = Q_k^-1

and J_{k+1}^-1 lower-bounds the error correlation of any predictor of
x_{k+1} given y_{0:k}.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalSingularityError

SYM_TOL = 1e-10
NEG_EIG_TOL = 1e-10


def spd_inverse(m, what="matrix"):
    """Inverse of a symmetric PD matrix: Cholesky, eigendecomposition fallback."""
    m = 0.5 * (m + m.T)
    try:
        c = np.linalg.cholesky(m)
        ci = np.linalg.inv(c)
        return ci.T @ ci
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(m)
        if w.min() <= 1e-12 * max(1.0, abs(w.max())):
            raise NumericalSingularityError(f"{what} is singular (min eigenvalue {w.min():.3e})")
        return (v / w) @ v.T


def project_psd(j):
    """Symmetrize and clamp tiny negative eigenvalues; larger ones raise."""
    j = 0.5 * (j + j.T)
    w, v = np.linalg.eigh(j)
    tol = NEG_EIG_TOL * max(1.0, abs(w).max())
    if w.min() < -tol:
        raise NumericalSingularityError(f"information lost positive semidefiniteness (eig {w.min():.3e})")
    if w.min() < 0:
        j = (v * np.clip(w, 0.0, None)) @ v.T
        j = 0.5 * (j + j.T)
    return j


@dataclass(frozen=True)
class InfoState:
    """Predictive information J at step ``k`` / time ``t``."""

    J: np.ndarray
    k: int = 0
    t: float = 0.0

    @property
    def bound(self):
        """Largest eigenvalue of J^-1, i.e. the bound on the worst-direction error variance."""
        w = np.linalg.eigvalsh(self.J)
        return np.inf if w.min() <= 0 else 1.0 / w.min()


@dataclass(frozen=True)
class DBlocks:
    D11: np.ndarray
    D12: np.ndarray
    D21: np.ndarray
    D22: np.ndarray


def assemble_dblocks(prior, sensor_info, dt):
    """D-blocks for one interval ``dt`` with measurement information ``sensor_info``.

    Pass a zero matrix for ``sensor_info`` when no measurement is taken.
    """
    if not dt > 0:
        raise InvalidArgumentError(f"time step must be positive, got {dt}")
    if prior.zero_noise:
        raise NumericalSingularityError("process covariance must be invertible for the bound")
    qk_inv = spd_inverse(prior.psd * dt, "process covariance")
    sensor_info = np.asarray(sensor_info, dtype=float)
    d12 = -qk_inv
    return DBlocks(qk_inv + sensor_info, d12, d12.T.copy(), qk_inv)


def recurse(info, blocks, dt=0.0):
    """One step of the information recursion; returns the next :class:`InfoState`."""
    inner = blocks.D11 + info.J
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if w.min() <= 1e-12:
        raise NumericalSingularityError(f"D11 + J is singular (min eigenvalue {w.min():.3e})")
    j_next = blocks.D22 - blocks.D21 @ np.linalg.solve(inner, blocks.D12)
    return InfoState(project_psd(j_next), info.k + 1, info.t + dt)


def step(info, prior, sensor_info, dt):
    """Assemble blocks and recurse over an interval of length ``dt``."""
    return recurse(info, assemble_dblocks(prior, sensor_info, dt), dt)


def initialize_known_prior(j0, t=0.0):
    j0 = np.atleast_2d(np.asarray(j0, dtype=float))
    if np.abs(j0 - j0.T).max() > SYM_TOL * max(1.0, np.abs(j0).max()):
        raise InvalidArgumentError("initial information must be symmetric")
    if np.linalg.eigvalsh(j0).min() < -NEG_EIG_TOL:
        raise InvalidArgumentError("initial information must be positive semidefinite")
    return InfoState(0.5 * (j0 + j0.T), 0, t)


def initialize_known_state(ka, dim, t=0.0):
    """Start at the accuracy boundary: J_0 = ka^-2 I.

    The initial state is taken as known to within the accuracy envelope.
    """
    if not ka > 0:
        raise InvalidArgumentError("accuracy must be positive")
    return InfoState(np.eye(dim) / ka**2, 0, t)


def run_recursion(prior, init, sensor_infos, dts):
    """Iterate the recursion; returns the list of states including ``init``."""
    states = [init]
    for info, dt in zip(sensor_infos, dts):
        states.append(step(states[-1], prior, info, dt))
    return states


def batch_fim_oracle(prior, sensor_infos, dts, j0):
    """Predictive information of the last state from the full joint FIM.

    Builds the block-tridiagonal information matrix of
    p(x_0..x_n, y_0..y_{n-1}) and Schur-eliminates x_0..x_{n-1} densely.
    Used to check :func:`recurse`.
    """
    sensor_infos = [np.atleast_2d(s) for s in sensor_infos]
    dts = list(dts)
    if len(sensor_infos) != len(dts) or not dts:
        raise InvalidArgumentError("need equal-length, non-empty sequences")
    d = prior.dim
    n = len(dts)
    big = np.zeros(((n + 1) * d, (n + 1) * d))
    big[:d, :d] += np.atleast_2d(j0)
    for i, (s, dt) in enumerate(zip(sensor_infos, dts)):
        qi = np.linalg.inv(prior.psd * dt)
        a, b = slice(i * d, (i + 1) * d), slice((i + 1) * d, (i + 2) * d)
        big[a, a] += qi + s
        big[b, b] += qi
        big[a, b] -= qi
        big[b, a] -= qi
    past = slice(0, n * d)
    last = slice(n * d, (n + 1) * d)
    A, B, C = big[past, past], big[past, last], big[last, last]
    try:
        return C - B.T @ np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise NumericalSingularityError("singular elimination pivot") from exc
