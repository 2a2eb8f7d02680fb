import math

import cvxpy as cp
import numpy as np
import pytest
from conftest import random_spd
from hypothesis import given, settings
from hypothesis import strategies as st

from spi import conic, pcrb
from spi.errors import InvalidArgumentError
from spi.motion import MotionPrior


def rate_oracle(q, s2, ka):
    j = ka**-2
    return q * j * (s2 * j + 1)


def cov_oracle(m, q, ka):
    return (m / q - ka**-2) * ka**4


def test_accuracy_spec():
    acc = conic.AccuracySpec(0.05)
    assert np.isclose(acc.info_floor, 400.0)
    with pytest.raises(InvalidArgumentError, match="accuracy must be positive"):
        conic.AccuracySpec(0.0)


def test_lmi_blocks():
    prior = MotionPrior.isotropic(0.001)
    lmi = conic.build_lmi(pcrb.initialize_known_state(0.05, 2), prior, 0.05, conic.SCALAR_RATE,
                          sensor_info=np.eye(2) / 0.0064)
    s = lmi.matrix(2.0)
    qinv = 2000.0
    assert np.allclose(s[:2, :2], (400 + qinv + 1 / 0.0064) * np.eye(2))
    assert np.allclose(s[:2, 2:], -qinv * np.eye(2))
    assert np.allclose(s[2:, 2:], (qinv - 400) * np.eye(2))
    assert np.allclose(s, s.T)


def test_asymmetric_input_rejected():
    with pytest.raises(InvalidArgumentError):
        conic.is_feasible(np.array([[1.0, 0.5], [0.0, 1.0]]))


@pytest.mark.parametrize("q,s2,ka", [(0.001, 0.0064, 0.05), (1e-4, 1e-3, 0.01), (1e-2, 1e-1, 0.1)])
def test_scalar_rate_matches_closed_form(q, s2, ka):
    prior = MotionPrior.isotropic(q)
    lmi = conic.build_lmi(pcrb.initialize_known_state(ka, 2), prior, ka, conic.SCALAR_RATE,
                          sensor_info=np.eye(2) / s2)
    m, st_ = conic.minimize_scalar(lmi)
    assert st_.status == conic.OPTIMAL
    assert abs(m - rate_oracle(q, s2, ka)) <= 1e-5 * rate_oracle(q, s2, ka)


def test_lower_bracket_feasible():
    prior = MotionPrior.isotropic(1e-4)
    lmi = conic.build_lmi(pcrb.initialize_known_state(1.0, 2), prior, 1.0, conic.SCALAR_RATE,
                          sensor_info=np.eye(2))
    m, st_ = conic.minimize_scalar(lmi, bracket=(1e-3, 1.0))
    assert m == 1e-3 and st_.ok and "lower bracket" in st_.note


def test_m_cap_infeasible():
    prior = MotionPrior.isotropic(0.001)
    lmi = conic.build_lmi(pcrb.initialize_known_state(1e-4, 2), prior, 1e-4, conic.SCALAR_RATE,
                          sensor_info=np.eye(2) / 0.0064)
    m, st_ = conic.minimize_scalar(lmi, m_cap=1e3)
    assert m is None and st_.status == conic.INFEASIBLE
    assert "m_cap" in st_.certificate


@pytest.mark.parametrize("m,ka", [(20, 0.05), (20, 0.01), (40, 0.1), (5, 0.03), (20, 0.0071)])
def test_trace_sdp_matches_closed_form(m, ka):
    q = 0.001
    prior = MotionPrior.isotropic(q)
    lmi = conic.build_lmi(pcrb.initialize_known_state(ka, 2), prior, ka, conic.PRECISION_MATRIX, rate=m)
    x, st_ = conic.minimize_trace_sdp(lmi)
    assert st_.status == conic.OPTIMAL
    cov = np.linalg.inv(x)
    ref = cov_oracle(m, q, ka)
    assert np.abs(cov - ref * np.eye(2)).max() <= 1e-5 * ref
    assert st_.kkt_residual < 1e-7


def test_trace_sdp_infeasible_below_threshold():
    q, m = 0.001, 20.0
    prior = MotionPrior.isotropic(q)
    thr = math.sqrt(q / m)
    for ka in (0.005, 0.99 * thr):
        lmi = conic.build_lmi(pcrb.initialize_known_state(ka, 2), prior, ka, conic.PRECISION_MATRIX, rate=m)
        x, st_ = conic.minimize_trace_sdp(lmi)
        assert x is None and st_.status == conic.INFEASIBLE and st_.certificate


def test_trace_sdp_unconstrained_gives_zero():
    prior = MotionPrior.isotropic(0.001)
    lmi = conic.build_lmi(pcrb.initialize_known_state(100.0, 2), prior, 100.0, conic.PRECISION_MATRIX, rate=20)
    x, st_ = conic.minimize_trace_sdp(lmi)
    assert st_.ok and np.trace(x) < 1e-6


def cvxpy_trace(J, qk_inv, ka):
    d = J.shape[0]
    X = cp.Variable((d, d), symmetric=True)
    S = cp.bmat([[J + qk_inv + X, -qk_inv], [-qk_inv, qk_inv - np.eye(d) / ka**2]])
    prob = cp.Problem(cp.Minimize(cp.trace(X)), [0.5 * (S + S.T) >> 0, X >> 0])
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@given(st.integers(2, 3), st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_trace_sdp_matches_cvxpy_on_anisotropic_instances(d, seed):
    rng = np.random.default_rng(seed)
    q = random_spd(rng, d, 1e-3, cond=5.0)
    ka = 0.05
    m = 1.5 * np.linalg.eigvalsh(q).max() / ka**2 * rng.uniform(1.0, 3.0)
    J = random_spd(rng, d, 1.0 / ka**2, cond=3.0)
    prior = MotionPrior(q)
    lmi = conic.build_lmi(J, prior, ka, conic.PRECISION_MATRIX, rate=m)
    x, st_ = conic.minimize_trace_sdp(lmi)
    ref = cvxpy_trace(J, np.linalg.inv(q) * m, ka)
    assert st_.ok
    assert abs(np.trace(x) - ref) <= 1e-5 * max(1.0, abs(ref))
    assert st_.kkt_residual < 1e-7
    theta = [x[i, j] for i in range(d) for j in range(i, d)]
    assert conic.min_eig(lmi.matrix(theta)) >= -conic.FEAS_TOL


def test_range_basis_scalar_precision():
    prior = MotionPrior.isotropic(0.001)
    unit = np.diag([3.0, 5.0])
    lmi = conic.build_lmi(pcrb.initialize_known_state(0.05, 2), prior, 0.05, conic.PRECISION_MATRIX, rate=40,
                          basis=conic.range_precision_basis(unit))
    x, st_ = conic.minimize_trace_sdp(lmi)
    # binding direction is the weakest eigenvalue of the unit information
    need = 1.0 / cov_oracle(40, 0.001, 0.05)
    assert st_.ok and np.isclose(x[0, 0] * 3.0, need, rtol=1e-5)


def test_solve_timing_budget():
    prior = MotionPrior.isotropic(0.001)
    lmi = conic.build_lmi(pcrb.initialize_known_state(0.05, 2), prior, 0.05, conic.PRECISION_MATRIX, rate=20)
    _, st_ = conic.minimize_trace_sdp(lmi)
    assert st_.wall_time < 0.1
