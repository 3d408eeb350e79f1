import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cloudrad.domain import DomainConfig, MassGrid, angular_quadrature, build_domain

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("thorough", parent=settings.get_profile("default"), max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running convergence study (runs by default)")


@pytest.fixture
def emit(capsys):
    """Print one acceptance line straight to the terminal and keep it for the summary."""
    def _emit(number, title, ok, detail):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok
    return _emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def box8():
    return build_domain(DomainConfig("box", 8))


@pytest.fixture(scope="session")
def box4():
    return build_domain(DomainConfig("box", 4))


@pytest.fixture(scope="session")
def ball12():
    return build_domain(DomainConfig("ball", 12))


@pytest.fixture(scope="session")
def quad6():
    return angular_quadrature(1)


@pytest.fixture(scope="session")
def mass24():
    return MassGrid.geometric(24, 1.0, 2.0, 8.0, 64.0, 16.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
