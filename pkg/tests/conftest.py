import numpy as np
import pytest

from spi.config import square_anchors
from spi.motion import MotionPrior, nominal_trajectory


@pytest.fixture
def prior2():
    return MotionPrior.isotropic(0.001, 2)


@pytest.fixture
def anchors8():
    return np.array(square_anchors(6.0))


@pytest.fixture
def nominal2():
    return nominal_trajectory(np.zeros(2), [0.1, 0.05], np.linspace(0.0, 10.0, 101))


def random_spd(rng, d, scale=1.0, cond=10.0):
    a = rng.normal(size=(d, d))
    q, _ = np.linalg.qr(a)
    w = scale * np.exp(rng.uniform(0.0, np.log(cond), size=d))
    return (q * w) @ q.T


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
