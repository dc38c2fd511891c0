import numpy as np
import pytest

from cencov import GaussianConditional, MeanSpec


@pytest.fixture
def tte():
    return MeanSpec.time_to_event(0)


@pytest.fixture
def theta_tte():
    return np.array([1.0, 3.0, 2.0, 1.0])


@pytest.fixture
def x_law():
    # X | Z under the independent simulation design
    return GaussianConditional(0.0, (0.5,), np.sqrt(0.75), (1,))


@pytest.fixture
def c_law():
    return GaussianConditional(0.0, (0.5,), np.sqrt(3.75), (1,))


@pytest.fixture
def point():
    """A single (y, z, w) evaluation point shared by the frozen oracle values."""
    return np.array([2.5]), np.array([[0.3, -0.4]]), np.array([0.2])


ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    """Store one criterion outcome for the terminal summary."""
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
