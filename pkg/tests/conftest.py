import numpy as np
import pytest
from hypothesis import settings

from wrml import grf

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# Filled by test_acceptance.py; printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_spec():
    return grf.CovarianceSpec(0.8, 1.1)


@pytest.fixture(scope="session")
def op5(default_spec):
    return grf.build_embedding(default_spec, grf.Grid2D.square(5), materialize_dense=True)


@pytest.fixture(scope="session")
def op8(default_spec):
    return grf.build_embedding(default_spec, grf.Grid2D.square(8), materialize_dense=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
