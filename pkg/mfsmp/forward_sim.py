"""
Interacting-particle Euler scheme for the controlled mean-field state
equation, and Monte Carlo estimation of the reward functional.

All particles step synchronously: the empirical mean field mu_k is computed
from the whole ensemble before step k, then every particle advances with
the same mu_k.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol, Tuple, Union

import numpy as np

from .errors import ControlError, PreconditionError, ShapeMismatchError, SimulationError
from .grid import TimeGrid
from .model import ModelSpec, PiecewiseConstant
from .performance_monitor import timed
from .regime_chain import (
    GeneratorMatrix,
    RegimePath,
    compensated_increments,
    sample_regime_path,
)
from .rng import BROWNIAN, CHAIN, map_ordered, stream
from .settings import resolve

logger = logging.getLogger(__name__)

FeedbackRule = Callable[[float, np.ndarray, float, np.ndarray, Optional[np.ndarray]], np.ndarray]


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OpenLoop:
    """Regular control table: shape (M,) common to all particles, or (N, M)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim not in (1, 2):
            raise ControlError(f"open-loop table must have 1 or 2 dimensions, got {values.ndim}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def table(self, grid: TimeGrid, particles: int) -> np.ndarray:
        values = self.values
        if values.shape[-1] != grid.steps:
            raise ShapeMismatchError(
                f"open-loop table has {values.shape[-1]} steps, grid has {grid.steps}"
            )
        if values.ndim == 2 and values.shape[0] != particles:
            raise ShapeMismatchError(
                f"open-loop table has {values.shape[0]} rows for {particles} particles"
            )
        return np.broadcast_to(values, (particles, grid.steps))


@dataclass(frozen=True, eq=False)
class Feedback:
    """
    State-feedback rule u = rule(t, x, mu, regime, p).

    ``p`` is the first-order adjoint at the current state when
    ``needs_adjoint`` is set, otherwise None.
    """

    rule: FeedbackRule
    needs_adjoint: bool = False
    name: str = "feedback"

    def __call__(self, t, x, mu, regime, p=None) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.rule(t, x, mu, regime, p), dtype=float), np.shape(x))


RegularControl = Union[OpenLoop, Feedback]


@dataclass(frozen=True, eq=False)
class Atom:
    """Singular jump of size ``size`` (scalar, or one entry per particle) at ``time``."""

    time: float
    size: Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class SingularControl:
    """
    Nondecreasing singular control: time-sorted atoms plus an optional
    nonnegative piecewise-constant density.
    """

    atoms: Tuple[Atom, ...] = ()
    density: Optional[PiecewiseConstant] = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        times = [atom.time for atom in self.atoms]
        if times != sorted(times):
            raise ControlError("singular atoms must be sorted by time")
        for atom in self.atoms:
            if np.any(np.asarray(atom.size) < 0) or not np.all(np.isfinite(atom.size)):
                raise ControlError(f"singular atom at t={atom.time} has a negative or non-finite size")
        if self.density is not None and np.any(self.density.values < 0):
            raise ControlError("singular density must be nonnegative")

    def increments(self, grid: TimeGrid, particles: int) -> np.ndarray:
        """
        Grid-aligned increments dxi, shape (N, M+1), with dxi[:, 0] = 0.

        An atom at tau in (t_k, t_{k+1}] lands on index k+1; the density
        contributes density(t_k) * h on index k+1.
        """
        dxi = np.zeros((particles, grid.steps + 1))
        for atom in self.atoms:
            if not 0.0 < atom.time <= grid.horizon:
                raise ControlError(f"singular atom time {atom.time} outside (0, {grid.horizon}]")
            size = np.asarray(atom.size, dtype=float)
            if size.ndim == 1 and size.shape[0] != particles:
                raise ShapeMismatchError(
                    f"singular atom carries {size.shape[0]} sizes for {particles} particles"
                )
            dxi[:, grid.index_at_or_after(atom.time)] += size
        if self.density is not None:
            rates = np.array([float(self.density(t)) for t in grid.times[:-1]])
            dxi[:, 1:] += rates[None, :] * grid.h
        return dxi


@dataclass(frozen=True, eq=False)
class ControlPair:
    regular: RegularControl
    singular: SingularControl = field(default_factory=SingularControl)

    @property
    def needs_adjoint(self) -> bool:
        return isinstance(self.regular, Feedback) and self.regular.needs_adjoint

    @property
    def name(self) -> str:
        return self.regular.name if isinstance(self.regular, Feedback) else "open_loop"


# ---------------------------------------------------------------------------
# Feedback rules
# ---------------------------------------------------------------------------


def constant_feedback(value: float) -> Feedback:
    return Feedback(rule=lambda t, x, mu, regime, p: np.full(np.shape(x), value), name=f"constant({value})")


def shifted_feedback(base: Feedback, shift: float) -> Feedback:
    """``base`` plus a constant offset."""
    return Feedback(
        rule=lambda t, x, mu, regime, p: base(t, x, mu, regime, p) + shift,
        needs_adjoint=base.needs_adjoint,
        name=f"{base.name}+{shift}",
    )


def interbank_mp_feedback(params: Any) -> Feedback:
    """Maximizer of the inter-bank Hamiltonian: u = b p + rho (mu - x)."""
    return Feedback(
        rule=lambda t, x, mu, regime, p: params.b(t, regime) * p + params.rho * (mu - x),
        needs_adjoint=True,
        name="maximum_principle",
    )


def _noise_depends_on_control(model: ModelSpec, grid_u: np.ndarray) -> bool:
    x = np.linspace(-1.0, 1.0, 5)[:, None]
    for t in (0.0, model.horizon):
        for regime in range(1, model.regimes + 1):
            for coefficient in (model.diffusion, model.jump):
                if np.any(coefficient.partial("du", t, x, model.x0, grid_u, regime) != 0.0):
                    return True
    return False


def hamiltonian_feedback(model: ModelSpec) -> Feedback:
    """
    Grid argmax of f + b p over A1.

    The rule sees only p, so models whose sigma or gamma move with u are
    rejected with ControlError.
    """
    grid_u = model.control_set.grid()
    if _noise_depends_on_control(model, grid_u):
        raise ControlError(
            f"hamiltonian feedback needs sigma and gamma free of u, {model.name} has control-dependent noise"
        )

    def rule(t, x, mu, regime, p):
        x = np.asarray(x, dtype=float)
        u = np.broadcast_to(grid_u, x.shape + grid_u.shape)
        xs = x[..., None]
        rs = np.asarray(regime)[..., None]
        score = model.running_cost(t, xs, mu, u, rs) + model.drift(t, xs, mu, u, rs) * np.asarray(p)[..., None]
        return grid_u[np.argmax(score, axis=-1)]

    return Feedback(rule=rule, needs_adjoint=True, name="hamiltonian")


@dataclass(frozen=True, eq=False)
class PerturbedFeedback(Feedback):
    """Feedback plus a per-step deterministic offset."""

    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grid: Optional[TimeGrid] = None

    @classmethod
    def around(cls, base: Feedback, offsets: np.ndarray, grid: TimeGrid, name: str) -> "PerturbedFeedback":
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != (grid.steps,):
            raise ShapeMismatchError(f"perturbation has {offsets.shape} offsets for {grid.steps} steps")

        def rule(t, x, mu, regime, p):
            k = min(int(round(t / grid.h)), grid.steps - 1)
            return base(t, x, mu, regime, p) + offsets[k]

        return cls(rule=rule, needs_adjoint=base.needs_adjoint, name=name, offsets=offsets, grid=grid)


# ---------------------------------------------------------------------------
# Noise and ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DrivingNoise:
    """
    Pre-drawn Brownian increments and regime paths. Reusing one instance
    across controls gives common random numbers.
    """

    grid: TimeGrid
    brownian: np.ndarray
    paths: Tuple[RegimePath, ...]
    regimes: np.ndarray
    jump_martingale: np.ndarray

    @property
    def particles(self) -> int:
        return self.brownian.shape[0]


def draw_noise(
    gen: GeneratorMatrix,
    grid: TimeGrid,
    particles: int,
    seed: int,
    initial_regime: int = 1,
    particle_offset: int = 0,
    threads: Optional[int] = None,
) -> DrivingNoise:
    """Draw every particle's noise from its own (seed, channel, particle) streams."""
    if particles < 1:
        raise PreconditionError(f"particle count must be at least 1, got {particles}")
    threads = resolve("threads", threads)
    sqrt_h = np.sqrt(grid.h)

    def draw(n: int):
        index = particle_offset + n
        increments = stream(seed, BROWNIAN, index).standard_normal(grid.steps) * sqrt_h
        path = sample_regime_path(gen, initial_regime, grid, stream(seed, CHAIN, index))
        return increments, path, compensated_increments(path, gen).martingale

    with timed("forward_sim", "draw_noise", particles=particles, steps=grid.steps):
        results = map_ordered(draw, range(particles), threads)

    return DrivingNoise(
        grid=grid,
        brownian=np.stack([r[0] for r in results]),
        paths=tuple(r[1] for r in results),
        regimes=np.stack([r[1].regime_index for r in results]),
        jump_martingale=np.stack([r[2] for r in results]),
    )


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """
    N simulated paths on a grid.

    states and regimes have shape (N, M+1), brownian and controls (N, M),
    jump_martingale (N, M, D), singular (N, M+1) and mean_field (M+1,).
    """

    grid: TimeGrid
    states: np.ndarray
    regimes: np.ndarray
    brownian: np.ndarray
    jump_martingale: np.ndarray
    mean_field: np.ndarray
    controls: np.ndarray
    singular: np.ndarray
    paths: Tuple[RegimePath, ...]
    seed: int = 0

    @property
    def particles(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.grid.steps

    def check_consistency(self, model: Optional[ModelSpec] = None):
        """Raise ShapeMismatchError unless all arrays agree (and mu matches the states)."""
        n, m = self.particles, self.grid.steps
        expected = {
            "states": (self.states, (n, m + 1)),
            "regimes": (self.regimes, (n, m + 1)),
            "brownian": (self.brownian, (n, m)),
            "controls": (self.controls, (n, m)),
            "singular": (self.singular, (n, m + 1)),
            "mean_field": (self.mean_field, (m + 1,)),
        }
        for name, (array, shape) in expected.items():
            if array.shape != shape:
                raise ShapeMismatchError(f"ensemble {name} has shape {array.shape}, expected {shape}")
        if self.jump_martingale.shape[:2] != (n, m):
            raise ShapeMismatchError(f"ensemble jump martingale has shape {self.jump_martingale.shape}")
        if len(self.paths) != n:
            raise ShapeMismatchError(f"ensemble holds {len(self.paths)} regime paths for {n} particles")
        if model is not None:
            recomputed = np.array(
                [float(model.mean_field(self.states[:, k]).mean()) for k in range(m + 1)]
            )
            if not np.array_equal(recomputed, self.mean_field):
                raise ShapeMismatchError("stored mean field does not match the states")

    def summary(self) -> np.ndarray:
        """Columns t, mu, mean X, var X (population variance)."""
        return np.column_stack(
            [self.grid.times, self.mean_field, self.states.mean(axis=0), self.states.var(axis=0)]
        )


class AdjointLike(Protocol):
    p: np.ndarray
    field: Any


@dataclass(frozen=True)
class _ZeroAdjoint:
    """p = 0 everywhere; starts the feedback fixed point."""

    p: Any = None
    field: Any = lambda k, x, mu, regime: np.zeros(np.shape(x))


ZERO_ADJOINT = _ZeroAdjoint()


def _adjoint_value(adjoint: AdjointLike, k: int, x, mu, regime) -> np.ndarray:
    if getattr(adjoint, "field", None) is not None:
        return np.asarray(adjoint.field(k, x, mu, regime), dtype=float)
    if adjoint.p.shape[0] != np.shape(x)[0] or adjoint.p.shape[1] <= k:
        raise ShapeMismatchError(f"adjoint of shape {adjoint.p.shape} does not match the ensemble")
    return adjoint.p[:, k]


def simulate(
    model: ModelSpec,
    gen: GeneratorMatrix,
    control: ControlPair,
    grid: TimeGrid,
    particles: int,
    seed: int,
    initial_regime: int = 1,
    adjoint: Optional[AdjointLike] = None,
    noise: Optional[DrivingNoise] = None,
    threads: Optional[int] = None,
    particle_offset: int = 0,
) -> ParticleEnsemble:
    """
    Euler step per particle

        X_{k+1} = X_k + b h + sigma dB_k + gamma . dPhi~_k + G(t_{k+1}, alpha_{k+1}-) dxi_{k+1}

    with the mean field mu_k recomputed from all particles before each step.
    Open-loop values outside A1 are rejected; feedback values are projected
    onto A1.
    """
    if gen.dim != model.regimes:
        raise ShapeMismatchError(f"generator has {gen.dim} regimes, model expects {model.regimes}")
    if control.needs_adjoint and adjoint is None:
        raise PreconditionError(f"feedback '{control.name}' needs an adjoint; use simulate_coupled")
    if noise is None:
        noise = draw_noise(gen, grid, particles, seed, initial_regime, particle_offset, threads)
    elif noise.particles != particles or noise.grid != grid:
        raise ShapeMismatchError("pre-drawn noise does not match the particle count or grid")

    with timed("forward_sim", "simulate", particles=particles, steps=grid.steps):
        dxi = control.singular.increments(grid, particles)

        table = None
        if isinstance(control.regular, OpenLoop):
            table = control.regular.table(grid, particles)
            inside = model.control_set.contains(table)
            if not np.all(inside):
                n, k = np.argwhere(~inside)[0]
                raise ControlError(
                    f"open-loop value {table[n, k]!r} for particle {n} at step {k} is outside A1"
                )

        h = grid.h
        states = np.empty((particles, grid.steps + 1))
        states[:, 0] = model.x0
        mean_field = np.empty(grid.steps + 1)
        controls = np.empty((particles, grid.steps))
        regimes = noise.regimes
        clipped = 0

        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(grid.steps):
                t = grid.time(k)
                x = states[:, k]
                mu = float(model.mean_field(x).mean())
                mean_field[k] = mu
                regime = regimes[:, k]

                if table is not None:
                    u = table[:, k]
                else:
                    p = _adjoint_value(adjoint, k, x, mu, regime) if control.needs_adjoint else None
                    raw = control.regular(t, x, mu, regime, p)
                    u = model.control_set.project(raw)
                    clipped += int(np.count_nonzero(u != raw))
                controls[:, k] = u

                increment = model.drift(t, x, mu, u, regime) * h + model.diffusion(t, x, mu, u, regime) * noise.brownian[:, k]
                if model.regimes > 1:
                    gamma = model.jump(t, x, mu, u, regime)
                    increment = increment + np.sum(gamma * noise.jump_martingale[:, k, :], axis=-1)
                singular_step = dxi[:, k + 1]
                if np.any(singular_step):
                    increment = increment + model.singular_coefficient(grid.time(k + 1), regimes[:, k + 1]) * singular_step
                states[:, k + 1] = x + increment

                finite = np.isfinite(states[:, k + 1])
                if not np.all(finite):
                    n = int(np.argmin(finite))
                    raise SimulationError(n, k + 1, float(states[n, k + 1]))

        mean_field[-1] = float(model.mean_field(states[:, -1]).mean())

    if clipped:
        logger.warning(f"{clipped} feedback values of '{control.name}' were projected onto A1")
    logger.debug(f"Simulated {particles} particles over {grid.steps} steps")

    return ParticleEnsemble(
        grid=grid,
        states=states,
        regimes=regimes,
        brownian=noise.brownian,
        jump_martingale=noise.jump_martingale,
        mean_field=mean_field,
        controls=controls,
        singular=dxi,
        paths=noise.paths,
        seed=seed,
    )


def simulate_coupled(
    model: ModelSpec,
    gen: GeneratorMatrix,
    control: ControlPair,
    grid: TimeGrid,
    particles: int,
    seed: int,
    solver: Callable[[ParticleEnsemble], AdjointLike],
    sweeps: Optional[int] = None,
    initial_regime: int = 1,
    noise: Optional[DrivingNoise] = None,
    threads: Optional[int] = None,
) -> Tuple[ParticleEnsemble, AdjointLike]:
    """
    Fixed-point iteration between the forward simulation and the adjoint
    solver for feedback that reads p. The first sweep starts from p = 0;
    the returned adjoint is solved on the returned ensemble.
    """
    sweeps = resolve("feedback_sweeps", sweeps)
    if noise is None:
        noise = draw_noise(gen, grid, particles, seed, initial_regime, threads=threads)
    if not control.needs_adjoint:
        ensemble = simulate(model, gen, control, grid, particles, seed, noise=noise)
        return ensemble, solver(ensemble)

    adjoint: AdjointLike = ZERO_ADJOINT
    for sweep in range(sweeps):
        ensemble = simulate(model, gen, control, grid, particles, seed, adjoint=adjoint, noise=noise)
        adjoint = solver(ensemble)
        logger.info(f"Feedback sweep {sweep + 1}/{sweeps} finished")
    return ensemble, adjoint


def particle_costs(model: ModelSpec, ensemble: ParticleEnsemble) -> np.ndarray:
    """Per-particle reward: running reward, singular reward and terminal reward."""
    grid = ensemble.grid
    x, mu, regimes = ensemble.states, ensemble.mean_field, ensemble.regimes
    running = np.zeros(ensemble.particles)
    for k in range(grid.steps):
        running += model.running_cost(grid.time(k), x[:, k], mu[k], ensemble.controls[:, k], regimes[:, k])
    kappa = np.array([model.singular_cost(t) for t in grid.times])
    singular = ensemble.singular @ kappa
    terminal = model.terminal_cost(x[:, -1], mu[-1], regimes[:, -1])
    return running * grid.h + singular + terminal


def estimate_cost(
    model: ModelSpec, ensemble: ParticleEnsemble, control: Optional[ControlPair] = None
) -> Tuple[float, float]:
    """
    Monte Carlo reward estimate and its standard error, read from the applied-controls record.

    When ``control`` is given its singular increments must be the ones the
    ensemble recorded; a pair that did not produce the ensemble raises
    ShapeMismatchError.
    """
    if control is not None:
        expected = control.singular.increments(ensemble.grid, ensemble.particles)
        matches = expected.shape == ensemble.singular.shape and np.allclose(
            expected, ensemble.singular, rtol=0.0, atol=1e-12
        )
        if not matches:
            raise ShapeMismatchError(f"control '{control.name}' did not produce this ensemble's singular record")
    costs = particle_costs(model, ensemble)
    return mean_and_stderr(costs)


def mean_and_stderr(samples: np.ndarray) -> Tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return float(samples.mean()), 0.0
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size))
