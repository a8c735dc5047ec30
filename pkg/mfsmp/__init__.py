"""
mfsmp
=====

Simulation and verification of the stochastic maximum principle for
singular mean-field control with Markov regime switching.

The package simulates McKean-Vlasov particle systems driven by a Brownian
motion and a continuous-time Markov chain, solves the first- and
second-order adjoint equations, and checks the necessary and sufficient
maximum-principle conditions for a candidate control. The inter-bank
borrowing and lending model is built in, with a closed-form Riccati
solution and brute-force open-loop enumeration as independent references.

Example:
    >>> from mfsmp import InterbankParams, TimeGrid, interbank_model, simulate
    >>> from mfsmp import ControlPair, constant_feedback
    >>> params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5)
    >>> model = interbank_model(params)
    >>> ensemble = simulate(model, params.generator, ControlPair(constant_feedback(0.0)),
    ...                     TimeGrid(1.0, 100), particles=1000, seed=7)
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("mfsmp")
except PackageNotFoundError:
    # Source checkout without installed metadata
    __version__ = "0.1.0"

from .adjoint import (
    AdjointSample,
    DefectReport,
    LinearDeviationField,
    RiccatiSolution,
    SecondOrderField,
    adjoint_driver,
    backward_defect,
    hamiltonian,
    solve_adjoint_interbank_explicit,
    solve_adjoint_lsmc,
    solve_riccati,
    solve_second_order,
    solve_volterra_mean,
)
from .config import ExperimentConfig, load_config, parse_config
from .diagnostics import get_version_info, health_check
from .errors import (
    CheckFailure,
    ConfigurationError,
    MfsmpError,
    NumericalError,
)
from .forward_sim import (
    Atom,
    ControlPair,
    Feedback,
    OpenLoop,
    ParticleEnsemble,
    SingularControl,
    constant_feedback,
    draw_noise,
    estimate_cost,
    hamiltonian_feedback,
    interbank_mp_feedback,
    simulate,
    simulate_coupled,
)
from .grid import TimeGrid
from .model import (
    ControlSet,
    InterbankParams,
    LinearQuadraticParams,
    ModelSpec,
    interbank_model,
    linear_quadratic_model,
    validate_model,
)
from .mp_check import (
    CheckReport,
    check_singular_conditions,
    check_sufficient,
    check_variational_inequality,
    compare_costs,
    random_perturbations,
)
from .oracle import CoarseInstance, brute_force_open_loop, bsde_residual, riccati_oracle
from .performance_monitor import export_performance_data, get_stats as get_performance_stats
from .regime_chain import GeneratorMatrix, compensated_increments, sample_regime_path
from .settings import get_settings, override_settings

__all__ = [
    "__version__",
    "AdjointSample",
    "Atom",
    "CheckFailure",
    "CheckReport",
    "CoarseInstance",
    "ConfigurationError",
    "ControlPair",
    "ControlSet",
    "DefectReport",
    "ExperimentConfig",
    "Feedback",
    "GeneratorMatrix",
    "InterbankParams",
    "LinearDeviationField",
    "LinearQuadraticParams",
    "MfsmpError",
    "ModelSpec",
    "NumericalError",
    "OpenLoop",
    "ParticleEnsemble",
    "RiccatiSolution",
    "SecondOrderField",
    "SingularControl",
    "TimeGrid",
    "adjoint_driver",
    "backward_defect",
    "brute_force_open_loop",
    "bsde_residual",
    "check_singular_conditions",
    "check_sufficient",
    "check_variational_inequality",
    "compare_costs",
    "compensated_increments",
    "constant_feedback",
    "draw_noise",
    "estimate_cost",
    "export_performance_data",
    "get_performance_stats",
    "get_settings",
    "get_version_info",
    "hamiltonian",
    "hamiltonian_feedback",
    "health_check",
    "interbank_model",
    "interbank_mp_feedback",
    "linear_quadratic_model",
    "load_config",
    "override_settings",
    "parse_config",
    "random_perturbations",
    "riccati_oracle",
    "sample_regime_path",
    "simulate",
    "simulate_coupled",
    "solve_adjoint_interbank_explicit",
    "solve_adjoint_lsmc",
    "solve_riccati",
    "solve_second_order",
    "solve_volterra_mean",
    "validate_model",
]
