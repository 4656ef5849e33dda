import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tilq import TimeGrid, build_lq_feedback, solve_equilibrium_system
from tilq.instances import mv_market, multi_noise_lq, noise_free_lq, scalar_lq

settings.register_profile("tilq", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tilq")


@pytest.fixture(scope="session")
def lq():
    return scalar_lq()


@pytest.fixture(scope="session")
def lq_free():
    return noise_free_lq()


@pytest.fixture(scope="session")
def lq_multi():
    return multi_noise_lq()


@pytest.fixture(scope="session")
def market():
    return mv_market()


@pytest.fixture(scope="session")
def grid256():
    return TimeGrid(0.0, 1.0, 256)


@pytest.fixture(scope="session")
def eq256(lq, grid256):
    sys_ = solve_equilibrium_system(lq, grid256)
    return sys_, build_lq_feedback(lq, sys_)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
