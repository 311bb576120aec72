import numpy as np
import pytest

from f2f.model import PriorConfig, synth_prior


@pytest.fixture(scope="session")
def prior():
    return synth_prior()


@pytest.fixture(scope="session")
def tiny_prior():
    return synth_prior(PriorConfig(n_subdiv=1, d_id=4, d_alb=4, d_exp=5, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
