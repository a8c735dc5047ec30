"""
Continuous-time Markov chain driving the regime switches.

Jump times are simulated exactly. Paths are restricted to the time grid only
when per-step quantities are emitted: the regime at each grid point, the jump
counts into each state and the compensator mass, computed from the exact
occupation times inside every step.

Regimes are numbered 1..D throughout.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import expm

from .errors import GeneratorValidationError
from .grid import TimeGrid
from .rng import CHAIN, map_ordered, stream

logger = logging.getLogger(__name__)

RandomSource = Union[int, np.random.Generator]


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Rate matrix (zeta_ij) of the regime chain."""

    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1] or rates.shape[0] < 1:
            raise GeneratorValidationError(f"generator must be a square D x D matrix, got shape {rates.shape}")
        if not np.all(np.isfinite(rates)):
            raise GeneratorValidationError("generator contains non-finite rates")
        dim = rates.shape[0]
        scale = max(1.0, float(np.max(np.abs(rates))))
        row_sums = rates.sum(axis=1)
        worst = int(np.argmax(np.abs(row_sums)))
        if abs(row_sums[worst]) > 1e-9 * scale * dim:
            raise GeneratorValidationError(
                f"row {worst + 1} of the generator sums to {row_sums[worst]!r}, expected 0"
            )
        if dim > 1:
            off_diagonal = rates[~np.eye(dim, dtype=bool)]
            if np.any(off_diagonal <= 0.0):
                raise GeneratorValidationError("off-diagonal generator entries must be strictly positive")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def dim(self) -> int:
        return self.rates.shape[0]

    @property
    def off_diagonal(self) -> np.ndarray:
        """Rates with the diagonal zeroed."""
        return self.rates - np.diag(np.diag(self.rates))

    def rate(self, i: int, j: int) -> float:
        """zeta_ij for 1-based regimes."""
        return float(self.rates[i - 1, j - 1])

    def holding_rate(self, i: int) -> float:
        """Total rate of leaving regime i."""
        return -float(self.rates[i - 1, i - 1])

    def jump_distribution(self, i: int) -> np.ndarray:
        """Embedded-chain probabilities of the next regime when leaving i."""
        total = self.holding_rate(i)
        if total == 0.0:
            return np.zeros(self.dim)
        probs = self.off_diagonal[i - 1] / total
        return probs

    def transition_probabilities(self, t: float) -> np.ndarray:
        """P(alpha(t) = e_j | alpha(0) = e_i) as a D x D matrix."""
        return expm(self.rates * t)

    def stationary_distribution(self) -> np.ndarray:
        """Invariant law pi with pi Q = 0 and sum(pi) = 1."""
        dim = self.dim
        system = np.vstack([self.rates.T, np.ones((1, dim))])
        rhs = np.zeros(dim + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
        return pi

    def to_config(self) -> Dict[str, Any]:
        return {"D": self.dim, "rates": self.rates.tolist()}

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "GeneratorMatrix":
        rates = np.asarray(config["rates"], dtype=float)
        declared = config.get("D")
        if declared is not None and rates.shape != (declared, declared):
            raise GeneratorValidationError(
                f"generator declares D={declared} but rates have shape {rates.shape}"
            )
        return cls(rates)

    @classmethod
    def single(cls) -> "GeneratorMatrix":
        """Trivial one-state chain."""
        return cls(np.zeros((1, 1)))

    @classmethod
    def two_state(cls, rate_12: float, rate_21: float) -> "GeneratorMatrix":
        return cls(np.array([[-rate_12, rate_12], [rate_21, -rate_21]]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GeneratorMatrix):
            return NotImplemented
        return np.array_equal(self.rates, other.rates)

    def __hash__(self) -> int:
        return hash(self.rates.tobytes())


@dataclass(frozen=True)
class Jump:
    time: float
    from_state: int
    to_state: int


@dataclass(frozen=True, eq=False)
class RegimePath:
    """
    One chain trajectory.

    ``regime_index[k]`` is alpha(t_k-), the regime holding just before grid
    time t_k, so a jump landing exactly on a grid point shows up at the next
    index.
    """

    grid: TimeGrid
    initial: int
    jumps: Tuple[Jump, ...]
    regime_index: np.ndarray

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([jump.time for jump in self.jumps], dtype=float)

    def state_at(self, t: float) -> int:
        """alpha(t), right-continuous."""
        state = self.initial
        for jump in self.jumps:
            if jump.time > t:
                break
            state = jump.to_state
        return state

    def terminal_state(self) -> int:
        return self.jumps[-1].to_state if self.jumps else self.initial

    def occupation_times(self, dim: int) -> np.ndarray:
        """Total time spent in each regime over [0, T]."""
        return occupation_by_step(self, dim).sum(axis=0)


@dataclass(frozen=True, eq=False)
class JumpMartingaleIncrements:
    """
    Per-step jump counts, compensator mass and compensated martingale
    increments, each of shape (M, D).
    """

    counts: np.ndarray
    compensator: np.ndarray
    martingale: np.ndarray

    def terminal_values(self) -> np.ndarray:
        """Compensated martingale at T, one entry per state."""
        return self.martingale.sum(axis=0)


def _as_generator(rng: RandomSource) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng), CHAIN, 0)


def _check_initial(gen: GeneratorMatrix, initial: int):
    if not 1 <= initial <= gen.dim:
        raise GeneratorValidationError(f"initial regime {initial} outside 1..{gen.dim}")


def sample_regime_path(
    gen: GeneratorMatrix, initial: int, grid: TimeGrid, rng: RandomSource
) -> RegimePath:
    """
    Exact simulation: exponential holding times with rate -zeta_ii, then an
    embedded transition to e_j with probability zeta_ij / -zeta_ii.
    """
    _check_initial(gen, initial)
    generator = _as_generator(rng)
    horizon = grid.horizon

    jumps: List[Jump] = []
    state = initial
    t = 0.0
    while True:
        rate = gen.holding_rate(state)
        if rate <= 0.0:
            break
        t += generator.exponential(1.0 / rate)
        if t > horizon:
            break
        target = int(generator.choice(gen.dim, p=gen.jump_distribution(state))) + 1
        jumps.append(Jump(time=t, from_state=state, to_state=target))
        state = target

    return RegimePath(
        grid=grid,
        initial=initial,
        jumps=tuple(jumps),
        regime_index=_restrict_to_grid(initial, jumps, grid),
    )


def _restrict_to_grid(initial: int, jumps: Sequence[Jump], grid: TimeGrid) -> np.ndarray:
    states = np.array([initial] + [jump.to_state for jump in jumps], dtype=np.int64)
    if not jumps:
        return np.full(grid.steps + 1, initial, dtype=np.int64)
    times = np.array([jump.time for jump in jumps])
    # Number of jumps strictly before t_k selects alpha(t_k-).
    before = np.searchsorted(times, grid.times, side="left")
    return states[before]


def sample_regime_paths(
    gen: GeneratorMatrix,
    initial: int,
    grid: TimeGrid,
    seed: int,
    count: int,
    particle_offset: int = 0,
    threads: int = 1,
) -> List[RegimePath]:
    """``count`` independent paths, path n drawn from its own chain stream."""
    _check_initial(gen, initial)

    def draw(n: int) -> RegimePath:
        return sample_regime_path(gen, initial, grid, stream(seed, CHAIN, particle_offset + n))

    return map_ordered(draw, range(count), threads)


def occupation_by_step(path: RegimePath, dim: int) -> np.ndarray:
    """Exact time spent in each regime inside every step, shape (M, D)."""
    grid = path.grid
    jump_times = path.jump_times
    breakpoints = np.concatenate([[0.0], jump_times, [grid.horizon]])
    states = [path.initial] + [jump.to_state for jump in path.jumps]

    occupation = np.zeros((grid.steps, dim))
    grid_times = grid.times
    for i in range(1, dim + 1):
        # Cumulative occupation of regime i is piecewise linear in t.
        slopes = np.array([1.0 if s == i else 0.0 for s in states])
        cumulative = np.concatenate([[0.0], np.cumsum(slopes * np.diff(breakpoints))])
        at_grid = np.interp(grid_times, breakpoints, cumulative)
        occupation[:, i - 1] = np.diff(at_grid)
    return occupation


def compensated_increments(path: RegimePath, gen: GeneratorMatrix) -> JumpMartingaleIncrements:
    """
    Per step k: counts[k, j] jumps into e_j in (t_k, t_{k+1}], compensator
    mass sum_{i != j} zeta_ij * occupation_i, and their difference.
    """
    grid = path.grid
    counts = np.zeros((grid.steps, gen.dim))
    for jump in path.jumps:
        counts[grid.step_containing(jump.time), jump.to_state - 1] += 1.0

    compensator = occupation_by_step(path, gen.dim) @ gen.off_diagonal
    return JumpMartingaleIncrements(
        counts=counts, compensator=compensator, martingale=counts - compensator
    )


def jumps_to_rows(path: RegimePath, particle: Optional[int] = None) -> List[Tuple[Any, ...]]:
    """Jump list as CSV rows (time, from, to), optionally prefixed by particle."""
    rows = []
    for jump in path.jumps:
        row: Tuple[Any, ...] = (jump.time, jump.from_state, jump.to_state)
        rows.append(row if particle is None else (particle,) + row)
    return rows
