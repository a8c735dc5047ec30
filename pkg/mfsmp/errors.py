"""
Exception hierarchy for mfsmp.

Every exception carries the exit code the command-line entry point reports
for it: 1 check failure, 2 configuration error, 3 numerical failure.
"""

from typing import Any, Dict, Optional


class MfsmpError(Exception):
    """Base class for all mfsmp errors."""

    exit_code = 3


class ConfigurationError(MfsmpError):
    """Invalid input: configuration, generator, control or shapes."""

    exit_code = 2


class GeneratorValidationError(ConfigurationError):
    """Generator matrix violates the row-sum or sign conditions."""


class ConvexityError(ConfigurationError):
    """Inter-bank parameters with rho**2 > epsilon (running cost not concave)."""


class ControlError(ConfigurationError):
    """Control values outside A1, negative singular increments, unsorted atoms."""


class ShapeMismatchError(ConfigurationError):
    """Arrays produced for different ensembles were combined."""


class PreconditionError(ConfigurationError):
    """An operation was called outside the class it supports."""


class EnumerationGuardError(ConfigurationError):
    """Brute-force enumeration would exceed the configured guard."""

    def __init__(self, cardinality: int, guard: int):
        self.cardinality = cardinality
        self.guard = guard
        super().__init__(
            f"refusing to enumerate {cardinality} controls (guard is {guard})"
        )


class CheckFailure(MfsmpError):
    """A verification did not pass."""

    exit_code = 1


class ModelValidationError(CheckFailure):
    """Analytic derivatives disagree with finite differences."""

    def __init__(self, message: str, report: Optional[Any] = None):
        self.report = report
        super().__init__(message)


class NumericalError(MfsmpError):
    """A solver or the simulator produced unusable numbers."""

    exit_code = 3


class SimulationError(NumericalError):
    """Non-finite state in the particle simulation."""

    def __init__(self, particle: int, step: int, value: float):
        self.particle = particle
        self.step = step
        self.value = value
        super().__init__(
            f"non-finite state {value!r} for particle {particle} at step {step}"
        )


class SolverError(NumericalError):
    """Backward solver produced non-finite values."""


class RiccatiBlowUpError(NumericalError):
    """Riccati solution left the admissible bound."""


class ConvergenceError(NumericalError):
    """Fixed-point iteration did not reach its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")


class UnsupportedModelClassError(NumericalError):
    """Model is outside the class a solver supports."""


def error_payload(error: MfsmpError) -> Dict[str, Any]:
    """Serializable description of an error for CLI reports."""
    return {
        "error": type(error).__name__,
        "message": str(error),
        "exit_code": error.exit_code,
    }
