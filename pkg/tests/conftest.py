import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slope_lab.agent import expert_demos
from slope_lab.envs import TabularEnv
from slope_lab.mdp import default_gridworld, value_iteration

settings.register_profile("lab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture(scope="session")
def grid_spec():
    return default_gridworld()


@pytest.fixture(scope="session")
def grid_env(grid_spec):
    return TabularEnv.from_gridworld(grid_spec, 100)


@pytest.fixture(scope="session")
def grid_q_star(grid_env):
    return value_iteration(grid_env.mdp)[1]


@pytest.fixture(scope="session")
def grid_demos(grid_env, grid_q_star):
    return expert_demos(grid_env, grid_q_star, 5, np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
