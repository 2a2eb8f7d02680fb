import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spi.errors import InvalidArgumentError, SingularGeometryError
from spi.rng import GaussianStream
from spi.sensors import (
    MeasurementBatch,
    MeasurementRecord,
    PositionSensor,
    RangeSensor,
    expected_information,
    gauss_hermite_points,
    range_jacobian,
    simulate_measurement,
    simulate_measurements,
)


def test_position_information_is_precision():
    s = PositionSensor(np.diag([0.01, 0.04]))
    assert np.allclose(expected_information(s, np.zeros(2)), np.diag([100.0, 25.0]))


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_range_jacobian_finite_difference(x, y):
    anchor = np.array([6.0, -6.0])
    p = np.array([x, y])
    jac = range_jacobian(anchor, p)
    h = 1e-6
    fd = [(np.linalg.norm(anchor - (p + h * e)) - np.linalg.norm(anchor - (p - h * e))) / (2 * h) for e in np.eye(2)]
    assert np.allclose(jac[0], fd, atol=1e-7)


def test_quadrature_moments():
    # order-3 Gauss-Hermite integrates polynomials up to degree 5 exactly
    cov = np.array([[0.3, 0.1], [0.1, 0.2]])
    pts, w = gauss_hermite_points(np.array([1.0, -2.0]), cov, 3)
    assert np.isclose(w.sum(), 1.0)
    mean = w @ pts
    c = (pts - mean).T @ np.diag(w) @ (pts - mean)
    assert np.allclose(mean, [1.0, -2.0])
    assert np.allclose(c, cov)
    x = pts[:, 0] - 1.0
    assert np.isclose(w @ x**4, 3 * 0.3**2)


def test_range_information_zero_spread():
    anchors = np.array([[5.0, 0.0], [0.0, 5.0], [-3.0, -4.0]])
    s = RangeSensor(0.01, anchors)
    x = np.array([0.5, 0.5])
    ref = sum(np.outer(a - x, a - x) / np.sum((a - x) ** 2) for a in anchors) / 0.01
    assert np.allclose(expected_information(s, x, np.zeros((2, 2))), ref)


def test_range_information_expectation_against_monte_carlo():
    anchors = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, -1.0]])
    s = RangeSensor(1.0, anchors)
    spread = 0.05 * np.eye(2)
    gh = expected_information(s, np.zeros(2), spread, 5)
    pts = GaussianStream(4).multivariate_normal(spread, 100_000)
    mc = np.zeros((2, 2))
    for a in anchors:
        u = a - pts
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        mc += u.T @ u / len(pts)
    assert np.allclose(gh, mc, atol=5e-3)


def test_active_anchors_subset():
    anchors = np.array([[5.0, 0.0], [0.0, 5.0], [-3.0, -4.0]])
    full = RangeSensor(0.01, anchors)
    sub = RangeSensor(0.01, anchors, active=(0, 2))
    x = np.zeros(2)
    diff = expected_information(full, x) - expected_information(sub, x)
    assert np.allclose(diff, np.outer([0, 1], [0, 1]) / 0.01)


def test_singular_geometry_reports_anchor():
    anchors = np.array([[5.0, 0.0], [1.0, 1.0]])
    s = RangeSensor(0.01, anchors)
    with pytest.raises(SingularGeometryError) as exc:
        expected_information(s, np.array([1.0, 1.0]))
    assert exc.value.anchor_index == 1
    with pytest.raises(SingularGeometryError) as exc:
        simulate_measurement(s, np.array([1.0, 1.0]), 0.0, GaussianStream(0))
    assert exc.value.anchor_index == 1


def test_zero_noise_simulation():
    anchors = np.array([[3.0, 4.0], [0.0, -2.0]])
    recs = simulate_measurement(RangeSensor(0.01, anchors), np.zeros(2), 1.5, GaussianStream(0), zero_noise=True)
    assert [r.anchor_index for r in recs] == [0, 1]
    assert np.allclose([r.value for r in recs], [5.0, 2.0])
    assert all(r.time == 1.5 for r in recs)


def test_measurement_noise_statistics():
    s = PositionSensor(np.diag([0.0064, 0.0016]))
    truth = np.zeros((50_000, 2))
    b = simulate_measurements(s, np.arange(50_000), truth, GaussianStream(8))
    assert np.allclose(np.var(b.values, axis=0), [0.0064, 0.0016], rtol=0.03)


def test_batch_record_round_trip():
    anchors = np.array([[3.0, 4.0], [0.0, -2.0]])
    b = simulate_measurements(RangeSensor(0.01, anchors), [0.0, 1.0], np.zeros((2, 2)), GaussianStream(1))
    again = MeasurementBatch.from_records(b.records())
    assert np.array_equal(again.values, b.values)
    assert np.array_equal(again.anchor_index, b.anchor_index)


def test_record_validation():
    with pytest.raises(InvalidArgumentError):
        MeasurementRecord(0.0, "range", 1.0)
    with pytest.raises(InvalidArgumentError):
        MeasurementRecord(0.0, "position", [0.0, 0.0], anchor_index=1)
    with pytest.raises(InvalidArgumentError):
        RangeSensor(0.0, [[0.0, 0.0]])
    with pytest.raises(InvalidArgumentError):
        PositionSensor(np.array([[1.0, 0.0], [0.0, -1.0]]))
