import pytest
from helpers import ConstantModel, CounterModel

from abmident.dgp import SimConfig


@pytest.fixture
def constant_model():
    return ConstantModel()


@pytest.fixture
def counter_model():
    return CounterModel()


@pytest.fixture
def small_config():
    return SimConfig(n_agents=10, horizon=200, burn_in=20, replications=4, master_seed=42)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
