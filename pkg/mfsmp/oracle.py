"""
Independent references for the maximum-principle machinery.

- Brute-force enumeration of open-loop controls on a coarse instance, all
  candidates sharing one noise draw.
- The closed-form Riccati feedback of the single-regime inter-bank model.
- The backward-equation residual of an adjoint sample.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import AdjointSample, DefectReport, RiccatiSolution, backward_defect, solve_riccati
from .errors import ConfigurationError, EnumerationGuardError
from .forward_sim import (
    Atom,
    ControlPair,
    Feedback,
    OpenLoop,
    ParticleEnsemble,
    SingularControl,
    draw_noise,
    estimate_cost,
    simulate,
)
from .grid import TimeGrid
from .model import InterbankParams, ModelSpec
from .performance_monitor import timed
from .regime_chain import GeneratorMatrix
from .rng import map_ordered
from .settings import resolve

logger = logging.getLogger(__name__)

MAX_STEPS = 5
MAX_VALUES = 9
MAX_ATOM_TIMES = 3
MAX_ATOM_SIZES = 4

WITHIN_SE = "within 2·SE"
CANDIDATE_BETTER = "candidate better"
ENUMERATION_BETTER = "enumerated optimum better"


@dataclass(frozen=True)
class CoarseInstance:
    """
    Small problem whose open-loop controls can be enumerated: one value of
    ``control_values`` per step and one of ``atom_sizes`` per atom time.
    """

    model: ModelSpec
    generator: GeneratorMatrix
    grid: TimeGrid
    control_values: Tuple[float, ...]
    atom_times: Tuple[float, ...] = ()
    atom_sizes: Tuple[float, ...] = (0.0,)
    particles: int = 1000
    seed: int = 0
    initial_regime: int = 1
    guard: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "control_values", tuple(float(v) for v in self.control_values))
        object.__setattr__(self, "atom_times", tuple(float(t) for t in self.atom_times))
        object.__setattr__(self, "atom_sizes", tuple(float(s) for s in self.atom_sizes))
        if self.grid.steps > MAX_STEPS:
            raise ConfigurationError(f"coarse instance allows at most {MAX_STEPS} steps, got {self.grid.steps}")
        if not 1 <= len(self.control_values) <= MAX_VALUES:
            raise ConfigurationError(f"coarse instance needs 1..{MAX_VALUES} control values")
        if len(self.atom_times) > MAX_ATOM_TIMES:
            raise ConfigurationError(f"coarse instance allows at most {MAX_ATOM_TIMES} atom times")
        if not 1 <= len(self.atom_sizes) <= MAX_ATOM_SIZES:
            raise ConfigurationError(f"coarse instance needs 1..{MAX_ATOM_SIZES} atom sizes")
        if any(size < 0 for size in self.atom_sizes):
            raise ConfigurationError("atom sizes must be nonnegative")
        outside = ~self.model.control_set.contains(np.array(self.control_values))
        if np.any(outside):
            raise ConfigurationError(
                f"control values {np.array(self.control_values)[outside].tolist()} lie outside A1"
            )
        guard = resolve("enumeration_guard", self.guard)
        if self.cardinality > guard:
            raise EnumerationGuardError(self.cardinality, guard)

    @property
    def cardinality(self) -> int:
        return len(self.control_values) ** self.grid.steps * len(self.atom_sizes) ** len(self.atom_times)

    def candidates(self) -> List[Tuple[Tuple[float, ...], Tuple[float, ...]]]:
        """Every (regular table, atom sizes) pair in lexicographic order."""
        regular = itertools.product(self.control_values, repeat=self.grid.steps)
        return list(itertools.product(regular, itertools.product(self.atom_sizes, repeat=len(self.atom_times))))

    def control(self, regular: Sequence[float], sizes: Sequence[float]) -> ControlPair:
        atoms = tuple(Atom(t, s) for t, s in zip(self.atom_times, sizes))
        return ControlPair(regular=OpenLoop(np.array(regular)), singular=SingularControl(atoms=atoms))


@dataclass
class BruteForceResult:
    """Reward estimate of every enumerated control; ``best`` is the first maximizer."""

    rows: List[Dict[str, Any]]
    best: int

    @property
    def best_row(self) -> Dict[str, Any]:
        return self.rows[self.best]

    @property
    def best_value(self) -> float:
        return self.rows[self.best]["J"]


def brute_force_open_loop(instance: CoarseInstance, threads: Optional[int] = None) -> BruteForceResult:
    threads = resolve("threads", threads)
    noise = draw_noise(
        instance.generator, instance.grid, instance.particles, instance.seed,
        instance.initial_regime, threads=threads,
    )
    candidates = instance.candidates()
    logger.info(f"Enumerating {len(candidates)} open-loop controls on {instance.particles} particles")

    def evaluate(index: int) -> Dict[str, Any]:
        regular, sizes = candidates[index]
        control = instance.control(regular, sizes)
        ensemble = simulate(
            instance.model, instance.generator, control, instance.grid,
            instance.particles, instance.seed, noise=noise, threads=1,
        )
        value, stderr = estimate_cost(instance.model, ensemble, control)
        return {"index": index, "regular": list(regular), "atoms": list(sizes), "J": value, "SE": stderr}

    with timed("oracle", "brute_force_open_loop", candidates=len(candidates)):
        rows = map_ordered(evaluate, range(len(candidates)), threads)

    values = np.array([row["J"] for row in rows])
    best = int(np.argmax(values))
    logger.info(f"Best open-loop control #{best}: J={values[best]:.6g}")
    return BruteForceResult(rows=rows, best=best)


@dataclass(frozen=True)
class OracleVerdict:
    """
    Open-loop controls bound the optimum from below only, so a candidate
    beating the enumeration is no contradiction; the candidate is suspect
    only when the best enumerated control beats it by more than ``z``
    combined standard errors.
    """

    outcome: str
    candidate_value: float
    candidate_stderr: float
    best_value: float
    best_stderr: float
    gap: float
    threshold: float

    @property
    def consistent(self) -> bool:
        return self.outcome != ENUMERATION_BETTER

    def to_dict(self) -> Dict[str, Any]:
        out = dict(self.__dict__)
        out["consistent"] = self.consistent
        return out

    def line(self) -> str:
        return (
            f"{self.outcome}: candidate J={self.candidate_value:.6g} (SE {self.candidate_stderr:.2g}), "
            f"enumerated optimum J={self.best_value:.6g} (SE {self.best_stderr:.2g})"
        )


def verdict(candidate: Tuple[float, float], result: BruteForceResult, z: float = 2.0) -> OracleVerdict:
    value, stderr = candidate
    best = result.best_row
    threshold = z * math.sqrt(stderr**2 + best["SE"] ** 2)
    gap = best["J"] - value
    if gap > threshold:
        outcome = ENUMERATION_BETTER
    elif -gap > threshold:
        outcome = CANDIDATE_BETTER
    else:
        outcome = WITHIN_SE
    return OracleVerdict(
        outcome=outcome,
        candidate_value=value,
        candidate_stderr=stderr,
        best_value=best["J"],
        best_stderr=best["SE"],
        gap=gap,
        threshold=threshold,
    )


@dataclass(frozen=True)
class RiccatiOracle:
    solution: RiccatiSolution
    feedback: Feedback
    sigma: float

    @property
    def eta(self) -> np.ndarray:
        return self.solution.eta

    def q(self, k: int) -> float:
        """Martingale integrand -eta(t_k) sigma, the same for every particle."""
        return -self.solution.eta[k] * self.sigma


def riccati_oracle(params: InterbankParams, grid: TimeGrid, substeps: Optional[int] = None) -> RiccatiOracle:
    """
    Closed-form optimal feedback u = b p + rho (mu - x) with p = -eta (x - mu),
    valid for regime-independent coefficients.
    """
    if not params.is_regime_independent:
        raise ConfigurationError("the Riccati oracle needs regime-independent a, b and c")
    solution = solve_riccati(
        lambda t: float(params.a(t, 1)),
        lambda t: float(params.b(t, 1)),
        params.rho,
        params.epsilon,
        params.beta,
        grid,
        substeps=substeps,
    )
    eta = solution.eta

    def rule(t, x, mu, regime, p):
        k = min(int(round(t / grid.h)), grid.steps)
        deviation = np.asarray(x, dtype=float) - mu
        return -float(params.b(t, 1)) * eta[k] * deviation - params.rho * deviation

    feedback = Feedback(rule=rule, needs_adjoint=False, name="riccati")
    return RiccatiOracle(solution=solution, feedback=feedback, sigma=params.sigma)


def bsde_residual(
    model: ModelSpec, gen: GeneratorMatrix, ensemble: ParticleEnsemble, adjoint: AdjointSample
) -> DefectReport:
    """Backward-equation defect of ``adjoint`` on ``ensemble``."""
    with timed("oracle", "bsde_residual", particles=ensemble.particles):
        report = backward_defect(model, gen, ensemble, adjoint)
    logger.info(f"BSDE residual {report.aggregate:.3e} (terminal error {report.terminal_error:.3e})")
    return report
