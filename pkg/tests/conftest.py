import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppdepth import autodiff as ad

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def checked_mode(request):
    """Finite-value checks on for every unit test (acceptance runs choose their own)."""
    if request.node.get_closest_marker("unchecked") or request.module.__name__.endswith("test_acceptance"):
        yield
        return
    with ad.checked(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
