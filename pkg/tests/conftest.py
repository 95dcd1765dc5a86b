import numpy as np
import pytest
from threadpoolctl import threadpool_limits

_limits = None


def pytest_configure(config):
    # every reproducibility check assumes single-threaded BLAS
    global _limits
    _limits = threadpool_limits(limits=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
