import numpy as np
import pytest

from eveneuron.numkernel import Rng

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return Rng(12345)


def random_params(rng, N, k, d, scale=1.0):
    from eveneuron.layer import EveLayerParams
    return EveLayerParams(
        A_mu=scale * rng.normal((N, k, d)), b_mu=scale * rng.normal((N, k)),
        A_logvar=0.3 * rng.normal((N, k, d)), b_logvar=0.3 * rng.normal((N, k)),
        w=rng.normal(N * k), b0=np.array(0.1))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
