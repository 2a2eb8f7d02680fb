import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spi import conic, pcrb, solvers
from spi.errors import InvalidArgumentError
from spi.motion import MotionPrior, nominal_trajectory
from spi.sensors import PositionSensor, RangeSensor


def rate_oracle(q, s2, ka):
    j = ka**-2
    return q * j * (s2 * j + 1)


def test_constant_rate_example(prior2, nominal2):
    sol = solvers.solve_constant_rate(prior2, PositionSensor(0.0064 * np.eye(2)), 0.05, nominal2)
    assert sol.status.status == conic.OPTIMAL and sol.mode == "constant"
    assert abs(sol.rate - 1.424) <= 1e-5 * 1.424
    assert sol.rate > 0


def test_doubling_noise_increases_rate(prior2, nominal2):
    a = solvers.solve_constant_rate(prior2, PositionSensor(0.0064 * np.eye(2)), 0.05, nominal2).rate
    b = solvers.solve_constant_rate(prior2, PositionSensor(0.0128 * np.eye(2)), 0.05, nominal2).rate
    assert b > a
    assert abs(b - rate_oracle(0.001, 0.0128, 0.05)) <= 1e-5 * b


def test_unreachable_accuracy_infeasible(prior2, nominal2):
    sol = solvers.solve_constant_rate(prior2, PositionSensor(0.0064 * np.eye(2)), 1e-4, nominal2, m_cap=1e3)
    assert sol.status.status == conic.INFEASIBLE and sol.rate is None and sol.status.certificate


def test_rate_monotone_in_accuracy(prior2, nominal2, anchors8):
    for sensor in (PositionSensor(0.0064 * np.eye(2)), RangeSensor(0.0064, anchors8)):
        rates = [solvers.solve_constant_rate(prior2, sensor, ka, nominal2).rate for ka in np.linspace(0.01, 0.1, 10)]
        assert all(r2 <= r1 * (1 + 1e-6) for r1, r2 in zip(rates, rates[1:]))


def test_range_needs_enough_anchors(prior2, nominal2):
    with pytest.raises(InvalidArgumentError):
        solvers.solve_constant_rate(prior2, RangeSensor(0.0064, [[5.0, 5.0]]), 0.05, nominal2)
    with pytest.raises(InvalidArgumentError):
        solvers.solve_covariance(prior2, RangeSensor(0.0064, [[5.0, 5.0]]), 40.0, 0.05, nominal2)


def test_range_rate_bound_holds_along_trajectory(prior2, nominal2, anchors8):
    sensor = RangeSensor(0.0064, anchors8)
    sol = solvers.solve_constant_rate(prior2, sensor, 0.05, nominal2)
    _, bounds = solvers.bound_trace(prior2, sensor, 0.05, nominal2, sol.rate)
    assert bounds.max() <= 0.05**2 + 1e-9


def test_per_step_large_initial_information(prior2, nominal2):
    sensor = PositionSensor(0.0064 * np.eye(2))
    ms = solvers.solve_constant_rate(prior2, sensor, 0.05, nominal2).rate
    sol = solvers.solve_per_step_schedule(prior2, sensor, 0.05, nominal2, pcrb.InfoState(1e12 * np.eye(2)))
    assert sol.status.ok and sol.rates[0] < ms


def test_per_step_converges_to_constant_rate(prior2):
    nominal2 = nominal_trajectory(np.zeros(2), None, [0.0, 60.0])
    sensor = PositionSensor(0.0064 * np.eye(2))
    ms = solvers.solve_constant_rate(prior2, sensor, 0.05, nominal2).rate
    init = pcrb.InfoState(4.0 * np.eye(2) / 0.05**2)
    sol = solvers.solve_per_step_schedule(prior2, sensor, 0.05, nominal2, init, max_steps=20)
    assert len(sol.rates) == 20
    assert abs(sol.rates[-1] - ms) / ms < 1e-3
    floor = np.eye(2) / 0.05**2
    for s in sol.info_trace:
        assert np.linalg.eigvalsh(s.J - floor).min() >= -1e-6 * np.abs(floor).max()


def test_per_step_times_follow_rates(prior2, nominal2):
    sol = solvers.solve_per_step_schedule(prior2, PositionSensor(0.0064 * np.eye(2)), 0.05, nominal2,
                                          pcrb.initialize_known_state(0.05, 2))
    assert np.allclose(np.diff(sol.times), 1.0 / np.array(sol.rates[:-1]))
    assert sol.times[-1] <= nominal2.times[-1] < sol.times[-1] + 1.0 / sol.rates[-1] + 1e-12


def test_per_step_empty_horizon(prior2, nominal2):
    sol = solvers.solve_per_step_schedule(prior2, PositionSensor(0.0064 * np.eye(2)), 0.05, nominal2,
                                          pcrb.initialize_known_state(0.05, 2), max_steps=0)
    assert sol.status.status == conic.OPTIMAL and sol.rates == []


def test_per_step_infeasible_reports_step(prior2, nominal2):
    sol = solvers.solve_per_step_schedule(prior2, PositionSensor(0.0064 * np.eye(2)), 1e-4, nominal2,
                                          pcrb.initialize_known_state(1e-4, 2), m_cap=1e3)
    assert sol.status.status == conic.INFEASIBLE and sol.failed_step == 0


def test_covariance_example(prior2, nominal2):
    sol = solvers.solve_covariance(prior2, "position", 20.0, 0.05, nominal2)
    assert sol.status.ok
    assert np.allclose(sol.constant_cov, 0.1225 * np.eye(2), rtol=1e-5)
    assert np.allclose(sol.constant_cov @ sol.constant_precision, np.eye(2), atol=1e-8)


def test_covariance_infeasible_with_threshold(prior2, nominal2):
    sol = solvers.solve_covariance(prior2, "position", 20.0, 0.005, nominal2)
    assert sol.status.status == conic.INFEASIBLE
    assert math.isclose(sol.threshold_ka, math.sqrt(0.001 / 20))
    assert "0.00707" in sol.status.certificate


def test_covariance_unconstrained_zero_precision(prior2, nominal2):
    sol = solvers.solve_covariance(prior2, "position", 20.0, 1e3, nominal2)
    assert sol.status.ok and np.trace(sol.constant_precision) < 1e-6


def test_covariance_isotropic_flag(prior2, nominal2):
    sol = solvers.solve_covariance(prior2, "position", 20.0, 0.05, nominal2, isotropic=True)
    assert np.allclose(sol.constant_cov, 0.1225 * np.eye(2), rtol=1e-5)


def test_covariance_range_scalar(prior2, nominal2, anchors8):
    sol = solvers.solve_covariance(prior2, RangeSensor(1.0, anchors8), 40.0, 0.05, nominal2)
    assert sol.status.ok and sol.constant_cov.shape == (1, 1)
    # tightness: the recursion at the solved variance lands on the envelope
    sensor = RangeSensor(float(sol.constant_cov[0, 0]), anchors8)
    _, bounds = solvers.bound_trace(prior2, sensor, 0.05, nominal2, 40.0)
    assert bounds.max() <= 0.05**2 * (1 + 1e-6)


def test_covariance_per_step(prior2, nominal2):
    sol = solvers.solve_covariance(prior2, "position", 20.0, 0.05, nominal2, mode="per-step", max_steps=5)
    assert sol.status.ok and len(sol.precision) == 5
    for x, c in zip(sol.precision, sol.implied_cov):
        assert np.allclose(c @ x, np.eye(2), atol=1e-8)
    assert np.allclose(sol.implied_cov[-1], 0.1225 * np.eye(2), rtol=1e-5)


def test_bad_rate(prior2, nominal2):
    with pytest.raises(InvalidArgumentError):
        solvers.solve_covariance(prior2, "position", 0.0, 0.05, nominal2)


@given(st.floats(0.0075, 0.1), st.floats(0.0075, 0.1))
@settings(max_examples=15, deadline=None)
def test_covariance_monotone_in_accuracy(ka1, ka2):
    prior = MotionPrior.isotropic(0.001)
    nom = nominal_trajectory(np.zeros(2), None, [0.0, 1.0])
    lo, hi = sorted((ka1, ka2))
    a = solvers.solve_covariance(prior, "position", 20.0, lo, nom).constant_cov[0, 0]
    b = solvers.solve_covariance(prior, "position", 20.0, hi, nom).constant_cov[0, 0]
    assert b >= a * (1 - 1e-6)


@given(st.floats(10.0, 100.0), st.floats(10.0, 100.0))
@settings(max_examples=15, deadline=None)
def test_covariance_monotone_in_rate(m1, m2):
    prior = MotionPrior.isotropic(0.001)
    nom = nominal_trajectory(np.zeros(2), None, [0.0, 1.0])
    lo, hi = sorted((m1, m2))
    a = solvers.solve_covariance(prior, "position", lo, 0.05, nom).constant_cov[0, 0]
    b = solvers.solve_covariance(prior, "position", hi, 0.05, nom).constant_cov[0, 0]
    assert b >= a * (1 - 1e-6)


def test_guarantee_propagation_and_rate_third(prior2):
    nominal2 = nominal_trajectory(np.zeros(2), None, [0.0, 120.0])
    sensor = PositionSensor(0.0064 * np.eye(2))
    for ka in (0.02, 0.05, 0.1):
        m = solvers.solve_constant_rate(prior2, sensor, ka, nominal2).rate
        _, b = solvers.bound_trace(prior2, sensor, ka, nominal2, m)
        assert b.max() <= ka**2 + 1e-9
        _, b3 = solvers.bound_trace(prior2, sensor, ka, nominal2, m / 3)
        assert b3.max() > ka**2
