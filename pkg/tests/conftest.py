import numpy as np
import pytest

from talbotlau import constants as const
from talbotlau.ensemble import default_ensemble
from talbotlau.macroscopicity import MacroModel
from talbotlau.physics import ClusterMaterial, default_setup

# acceptance verdicts, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def material():
    return ClusterMaterial()


@pytest.fixture(scope="session")
def setup():
    return default_setup()


@pytest.fixture(scope="session")
def ensemble():
    return default_ensemble()


@pytest.fixture(scope="session")
def small_model():
    """Coarse quadrature so likelihood tests stay fast."""
    return MacroModel(ensemble=default_ensemble(velocity_nodes=8, mass_nodes=8))


@pytest.fixture(scope="session")
def small_context(small_model, setup):
    return small_model.context(setup.powers, 170.0 * const.kDa)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
