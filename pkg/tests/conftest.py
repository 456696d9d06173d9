import numpy as np
import pytest

from trafficpf.model import DEFAULT_TRANSITION, default_spec
from trafficpf.regime_kernel import FixedKernel


@pytest.fixture
def spec():
    return default_spec()


@pytest.fixture
def default_kernel():
    return FixedKernel(DEFAULT_TRANSITION)


@pytest.fixture
def rng():
    return np.random.default_rng(20240518)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
