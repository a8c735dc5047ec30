"""
Configuration file for pytest.
"""

import os
import sys

import pytest

# Add the package to the path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from mfsmp.adjoint import solve_adjoint_interbank_explicit  # noqa: E402
from mfsmp.forward_sim import ControlPair, interbank_mp_feedback, simulate_coupled  # noqa: E402
from mfsmp.grid import TimeGrid  # noqa: E402
from mfsmp.model import InterbankParams, interbank_model  # noqa: E402
from mfsmp.performance_monitor import reset_performance_data  # noqa: E402
from mfsmp.regime_chain import GeneratorMatrix  # noqa: E402
from mfsmp.settings import reset_settings  # noqa: E402

CONFIG_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "configs"))


@pytest.fixture(autouse=True)
def clean_state():
    """Fresh settings and timing data around every test."""
    reset_settings()
    reset_performance_data()
    yield
    reset_settings()
    reset_performance_data()


@pytest.fixture
def interbank_params():
    """Single-regime inter-bank parameters of the shipped example."""
    return InterbankParams.single_regime(
        a=1.0, b=1.0, c=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5, kappa=0.5
    )


@pytest.fixture
def interbank(interbank_params):
    return interbank_model(interbank_params)


@pytest.fixture
def two_state():
    return GeneratorMatrix.two_state(1.0, 2.0)


@pytest.fixture
def two_regime_params(two_state):
    return InterbankParams(
        a=[1.0, 2.0], b=1.0, c=[1.0, 0.5], sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5,
        kappa=0.5, generator=two_state,
    )


@pytest.fixture
def grid():
    return TimeGrid(1.0, 20)


@pytest.fixture
def explicit_solver(interbank_params):
    return lambda ensemble: solve_adjoint_interbank_explicit(interbank_params, ensemble)[0]


@pytest.fixture
def mp_run(interbank, interbank_params, grid, explicit_solver):
    """Maximum-principle feedback coupled with the explicit adjoint: (control, ensemble, adjoint)."""
    control = ControlPair(interbank_mp_feedback(interbank_params))
    ensemble, adjoint = simulate_coupled(
        interbank, interbank_params.generator, control, grid, 500, 7, explicit_solver
    )
    return control, ensemble, adjoint


@pytest.fixture
def config_dir():
    return CONFIG_DIR
