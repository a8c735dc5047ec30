"""
Quantified checks of the maximum-principle conditions for a candidate
control: the variational inequality, the singular-control conditions, the
sufficient conditions (concavity, maximum condition, complementarity) and
an empirical cost comparison under common random numbers.

Almost-sure statements are checked as empirical fractions. A report's
``max_violation`` is the largest violation left after discounting the worst
points that together make up at most ``cap`` of the sample (by count, or
by singular mass for complementarity), so

    passed  <=>  max_violation <= tolerance  and  violating_fraction <= cap.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .adjoint import AdjointSample, SecondOrderField, hamiltonian
from .errors import PreconditionError, ShapeMismatchError
from .forward_sim import (
    ControlPair,
    Feedback,
    OpenLoop,
    ParticleEnsemble,
    PerturbedFeedback,
    SingularControl,
    draw_noise,
    estimate_cost,
    simulate,
    simulate_coupled,
)
from .grid import TimeGrid
from .model import ModelSpec
from .performance_monitor import timed
from .regime_chain import GeneratorMatrix
from .rng import CONTROL, stream
from .settings import resolve

logger = logging.getLogger(__name__)

EVIDENCE_SIZE = 5


def _json_float(value: float) -> Any:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else str(value)


@dataclass
class CheckReport:
    """Pass/fail evidence for one condition, optionally with sub-checks."""

    name: str
    max_violation: float
    violating_fraction: float
    tolerance: float
    cap: float
    evidence: List[Dict[str, Any]] = field(default_factory=list)
    children: List["CheckReport"] = field(default_factory=list)
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        own = self.max_violation <= self.tolerance and self.violating_fraction <= self.cap
        return own and all(child.passed for child in self.children)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_violation": _json_float(self.max_violation),
            "violating_fraction": _json_float(self.violating_fraction),
            "tolerance": _json_float(self.tolerance),
            "cap": _json_float(self.cap),
            "evidence": self.evidence,
            "details": {k: _json_float(v) if isinstance(v, float) else v for k, v in self.details.items()},
            "children": [child.to_dict() for child in self.children],
        }

    def render(self, indent: int = 0) -> str:
        """Human-readable table, one line per condition."""
        pad = "  " * indent
        status = "PASS" if self.passed else "FAIL"
        line = (
            f"{pad}{self.name:<{40 - len(pad)}} {status}  "
            f"max_violation={self.max_violation:.4g} (tol {self.tolerance:.4g})  "
            f"fraction={self.violating_fraction:.4g} (cap {self.cap:.4g})"
        )
        return "\n".join([line] + [child.render(indent + 1) for child in self.children])

    @classmethod
    def composite(cls, name: str, children: List["CheckReport"], **details: Any) -> "CheckReport":
        """Report that passes exactly when every child passes."""
        return cls(
            name=name,
            max_violation=max((c.max_violation for c in children), default=0.0),
            violating_fraction=max((c.violating_fraction for c in children), default=0.0),
            tolerance=math.inf,
            cap=1.0,
            children=children,
            details=details,
        )


def default_cap(particles: int) -> float:
    return 1.0 / math.sqrt(particles)


def _discounted_max(values: np.ndarray, weights: np.ndarray, cap: float) -> float:
    """Largest value once the worst points carrying at most ``cap`` of the weight are dropped."""
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    total = weights.sum()
    if values.size == 0 or total <= 0.0:
        return 0.0
    order = np.argsort(-values, kind="stable")
    cumulative = np.cumsum(weights[order]) / total
    kept = np.nonzero(cumulative > cap)[0]
    if kept.size == 0:
        return 0.0
    return max(float(values[order][kept[0]]), 0.0)


def _evidence(values: np.ndarray, **coordinates: np.ndarray) -> List[Dict[str, Any]]:
    flat = np.asarray(values, dtype=float).ravel()
    worst = np.argsort(-flat, kind="stable")[:EVIDENCE_SIZE]
    rows = []
    for index in worst:
        if not np.isfinite(flat[index]):
            continue
        row = {name: np.asarray(coord).ravel()[index].item() for name, coord in coordinates.items()}
        row["violation"] = float(flat[index])
        rows.append(row)
    return rows


def _fraction_report(name, values, tolerance, cap, weights=None, evidence=None, **details) -> CheckReport:
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    total = float(weights.sum())
    fraction = float(weights[values > tolerance].sum() / total) if total > 0 else 0.0
    details.setdefault("worst", float(values.max()) if values.size else 0.0)
    return CheckReport(
        name=name,
        max_violation=_discounted_max(values, weights, cap),
        violating_fraction=fraction,
        tolerance=tolerance,
        cap=cap,
        evidence=evidence or [],
        details=details,
    )


# ---------------------------------------------------------------------------
# Spike differences and the variational inequality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpikeDifference:
    """Coefficient at the spiked control minus at the candidate control."""

    db: np.ndarray
    dsigma: np.ndarray
    dgamma: np.ndarray


def spike_differences(model: ModelSpec, t, x, y, u, u_star, regime) -> SpikeDifference:
    return SpikeDifference(
        db=model.drift(t, x, y, u, regime) - model.drift(t, x, y, u_star, regime),
        dsigma=model.diffusion(t, x, y, u, regime) - model.diffusion(t, x, y, u_star, regime),
        dgamma=model.jump(t, x, y, u, regime) - model.jump(t, x, y, u_star, regime),
    )


def variational_gap(
    model: ModelSpec,
    gen: GeneratorMatrix,
    t: float,
    x,
    y: float,
    u_star,
    regime,
    p,
    q,
    s,
    P,
    S,
    control_grid: np.ndarray,
) -> np.ndarray:
    """
    H(u) - H(u*) + P (d sigma)^2 / 2 + sum_j (P + S_j)(d gamma^j)^2 zeta_ij / 2
    for every u of ``control_grid``; shape (N, G).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    candidates = np.concatenate(
        [np.asarray(u_star, dtype=float).reshape(n, 1), np.broadcast_to(control_grid, (n, control_grid.size))],
        axis=1,
    )
    xs, rs = x[:, None], np.asarray(regime)[:, None]
    ps, qs = np.asarray(p)[:, None], np.asarray(q)[:, None]
    ss = np.asarray(s)[:, None, :]
    values = hamiltonian(model, t, xs, y, candidates, rs, ps, qs, ss, gen)
    sigma = model.diffusion(t, xs, y, candidates, rs)
    gamma = model.jump(t, xs, y, candidates, rs)
    d_sigma = sigma[:, 1:] - sigma[:, :1]
    d_gamma = gamma[:, 1:, :] - gamma[:, :1, :]
    rates = gen.off_diagonal[np.asarray(regime) - 1][:, None, :]
    weight = (np.asarray(P)[:, None, None] + np.asarray(S)[:, None, :]) * rates
    second = 0.5 * np.asarray(P)[:, None] * d_sigma**2 + 0.5 * np.sum(weight * d_gamma**2, axis=-1)
    return values[:, 1:] - values[:, :1] + second


def _check_second(second: SecondOrderField, dim: int, steps: int):
    if second.P.shape != (dim, steps + 1):
        raise ShapeMismatchError(
            f"second-order field of shape {second.P.shape} does not match {dim} regimes and {steps} steps"
        )


def check_variational_inequality(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    candidate: ControlPair,
    adjoint: AdjointSample,
    second: SecondOrderField,
    control_grid: Optional[Sequence[float]] = None,
    tol: Optional[float] = None,
    cap: Optional[float] = None,
) -> CheckReport:
    """
    Largest spike gain over particles, steps and the control grid. The
    candidate values are read from the ensemble's applied-controls record.
    ``tol=None`` uses 5h + 3 SE, SE the standard error of the per-particle
    worst gain.
    """
    adjoint.check_shapes(ensemble)
    _check_second(second, gen.dim, ensemble.steps)
    grid = ensemble.grid
    control_grid = model.control_set.grid() if control_grid is None else np.asarray(control_grid, dtype=float)
    cap = default_cap(ensemble.particles) if cap is None else cap

    with timed("mp_check", "check_variational_inequality", particles=ensemble.particles):
        gains = np.empty((ensemble.particles, grid.steps))
        worst_u = np.empty_like(gains)
        for k in range(grid.steps):
            regime = ensemble.regimes[:, k]
            P, S = second.at(k, regime)
            gap = variational_gap(
                model, gen, grid.time(k), ensemble.states[:, k], ensemble.mean_field[k],
                ensemble.controls[:, k], regime, adjoint.p[:, k], adjoint.q[:, k], adjoint.s[:, k, :],
                P, S, control_grid,
            )
            best = np.argmax(gap, axis=1)
            gains[:, k] = gap[np.arange(gap.shape[0]), best]
            worst_u[:, k] = control_grid[best]

    per_particle = gains.max(axis=1)
    stderr = float(per_particle.std(ddof=1) / math.sqrt(per_particle.size)) if per_particle.size > 1 else 0.0
    auto = tol is None
    if auto:
        tol = 5.0 * grid.h + 3.0 * stderr
    particles, steps = np.meshgrid(np.arange(ensemble.particles), np.arange(grid.steps), indexing="ij")
    report = _fraction_report(
        "variational_inequality",
        gains,
        tol,
        cap,
        evidence=_evidence(gains, particle=particles, step=steps, u=worst_u),
        candidate=candidate.name,
        stderr=stderr,
        auto_tolerance=auto,
        grid_points=int(control_grid.size),
    )
    logger.info(f"Variational inequality: {'pass' if report.passed else 'FAIL'} (worst gain {report.details['worst']:.4g})")
    return report


# ---------------------------------------------------------------------------
# Singular conditions
# ---------------------------------------------------------------------------


def check_singular_conditions(
    model: ModelSpec,
    ensemble: ParticleEnsemble,
    adjoint: AdjointSample,
    singular: Optional[SingularControl] = None,
    tol: float = 1e-9,
    cap: Optional[float] = None,
) -> CheckReport:
    """
    A: kappa + G p <= tol at (almost) every (n, k).
    B: singular mass only where kappa + G p >= -tol (complementary slackness
    on the strict set {kappa + G p < -tol}); zero total mass passes.

    The singular increments are read from the ensemble record, which
    ``singular`` (when given) must have produced.
    """
    adjoint.check_shapes(ensemble)
    grid = ensemble.grid
    cap = default_cap(ensemble.particles) if cap is None else cap
    if singular is not None:
        expected = singular.increments(grid, ensemble.particles)
        if not np.array_equal(expected, ensemble.singular):
            raise ShapeMismatchError("singular control does not match the ensemble's increments")

    kappa = np.array([model.singular_cost(t) for t in grid.times])
    coefficient = np.column_stack(
        [model.singular_coefficient(grid.time(k), ensemble.regimes[:, k]) for k in range(grid.steps + 1)]
    )
    margin = kappa[None, :] + coefficient * adjoint.p
    particles, steps = np.meshgrid(np.arange(ensemble.particles), np.arange(grid.steps + 1), indexing="ij")

    condition_a = _fraction_report(
        "singular_condition_a",
        margin,
        tol,
        cap,
        evidence=_evidence(margin, particle=particles, step=steps),
    )

    mass = ensemble.singular
    total = float(mass.sum())
    shortfall = -margin
    if total > 0.0:
        condition_b = _fraction_report(
            "singular_condition_b",
            shortfall,
            tol,
            cap,
            weights=mass,
            evidence=_evidence(np.where(mass > 0, shortfall, -np.inf), particle=particles, step=steps),
            total_mass=total,
        )
    else:
        condition_b = CheckReport("singular_condition_b", 0.0, 0.0, tol, cap, details={"total_mass": 0.0})
    return CheckReport.composite("singular_conditions", [condition_a, condition_b])


# ---------------------------------------------------------------------------
# Sufficient conditions
# ---------------------------------------------------------------------------


def _hessian(func: Callable[[np.ndarray], np.ndarray], point: np.ndarray, step: float) -> np.ndarray:
    """Central second differences of ``func`` at ``point``; func is vectorized over leading axes."""
    dim = point.size
    eye = np.eye(dim) * step
    hess = np.empty((dim, dim))
    base = float(func(point))
    for i in range(dim):
        for j in range(i, dim):
            if i == j:
                value = (float(func(point + eye[i])) - 2 * base + float(func(point - eye[i]))) / step**2
            else:
                value = (
                    float(func(point + eye[i] + eye[j]))
                    - float(func(point + eye[i] - eye[j]))
                    - float(func(point - eye[i] + eye[j]))
                    + float(func(point - eye[i] - eye[j]))
                ) / (4 * step**2)
            hess[i, j] = hess[j, i] = value
    return hess


def check_concavity(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    adjoint: AdjointSample,
    samples: Optional[int] = None,
    step: Optional[float] = None,
    tol: Optional[float] = None,
) -> CheckReport:
    """Largest Hessian eigenvalue of H in (x, y, u) and of h in (x, y) at sampled points."""
    samples = resolve("concavity_samples", samples)
    step = resolve("concavity_step", step)
    tol = resolve("concavity_tolerance", tol)
    grid = ensemble.grid
    rng = stream(ensemble.seed, CONTROL, ensemble.particles)
    picks_n = rng.integers(0, ensemble.particles, samples)
    picks_k = rng.integers(0, grid.steps, samples)

    eigen = np.empty(samples)
    for index, (n, k) in enumerate(zip(picks_n, picks_k)):
        regime = ensemble.regimes[n, k]
        p, q, s = adjoint.p[n, k], adjoint.q[n, k], adjoint.s[n, k, :]
        t = grid.time(k)

        def h_of(z, regime=regime, p=p, q=q, s=s, t=t):
            return hamiltonian(model, t, z[0], z[1], z[2], regime, p, q, s, gen)

        point = np.array([ensemble.states[n, k], ensemble.mean_field[k], ensemble.controls[n, k]])
        eigen[index] = np.linalg.eigvalsh(_hessian(h_of, point, step)).max()

    terminal_regimes = ensemble.regimes[picks_n, grid.steps]
    terminal_eigen = np.empty(samples)
    for index, (n, regime) in enumerate(zip(picks_n, terminal_regimes)):
        point = np.array([ensemble.states[n, -1], ensemble.mean_field[-1]])
        terminal_eigen[index] = np.linalg.eigvalsh(
            _hessian(lambda z, r=regime: model.terminal_cost(z[0], z[1], r), point, step)
        ).max()

    return CheckReport.composite(
        "concavity",
        [
            _fraction_report(
                "hamiltonian_concavity", eigen, tol, 0.0,
                evidence=_evidence(eigen, particle=picks_n, step=picks_k),
            ),
            _fraction_report(
                "terminal_concavity", terminal_eigen, tol, 0.0,
                evidence=_evidence(terminal_eigen, particle=picks_n),
            ),
        ],
    )


def check_maximum_condition(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    adjoint: AdjointSample,
    control_grid: Optional[Sequence[float]] = None,
    tol: float = 1e-9,
    cap: Optional[float] = None,
) -> CheckReport:
    """|argmax over the grid of H - u*| <= pitch + tol at (almost) every (n, k)."""
    grid = ensemble.grid
    control_grid = model.control_set.grid() if control_grid is None else np.asarray(control_grid, dtype=float)
    pitch = float(np.max(np.diff(np.sort(control_grid)))) if control_grid.size > 1 else 0.0
    cap = default_cap(ensemble.particles) if cap is None else cap

    excess = np.empty((ensemble.particles, grid.steps))
    for k in range(grid.steps):
        regime = ensemble.regimes[:, k]
        x = ensemble.states[:, k][:, None]
        values = hamiltonian(
            model, grid.time(k), x, ensemble.mean_field[k], control_grid[None, :], regime[:, None],
            adjoint.p[:, k][:, None], adjoint.q[:, k][:, None], adjoint.s[:, k, :][:, None, :], gen,
        )
        best = control_grid[np.argmax(values, axis=1)]
        excess[:, k] = np.abs(best - ensemble.controls[:, k]) - pitch

    particles, steps = np.meshgrid(np.arange(ensemble.particles), np.arange(grid.steps), indexing="ij")
    return _fraction_report(
        "maximum_condition",
        excess,
        tol,
        cap,
        evidence=_evidence(excess, particle=particles, step=steps),
        pitch=pitch,
    )


def check_sufficient(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    candidate: ControlPair,
    adjoint: AdjointSample,
    control_grid: Optional[Sequence[float]] = None,
    tol: Optional[float] = None,
    cap: Optional[float] = None,
) -> CheckReport:
    """Concavity, maximum condition and singular complementarity; needs an interval A1."""
    if not model.control_set.is_interval:
        raise PreconditionError("sufficient conditions need a convex (interval) control set A1")
    adjoint.check_shapes(ensemble)
    with timed("mp_check", "check_sufficient", particles=ensemble.particles):
        concavity = check_concavity(model, gen, ensemble, adjoint, tol=tol)
        maximum = check_maximum_condition(
            model, gen, ensemble, adjoint, control_grid, tol=1e-9 if tol is None else tol, cap=cap
        )
        singular = check_singular_conditions(
            model, ensemble, adjoint, candidate.singular, tol=1e-9 if tol is None else tol, cap=cap
        )
        singular.name = "complementarity"
    report = CheckReport.composite("sufficient_conditions", [concavity, maximum, singular], candidate=candidate.name)
    logger.info(f"Sufficient conditions: {'pass' if report.passed else 'FAIL'}")
    return report


# ---------------------------------------------------------------------------
# Empirical cost comparison
# ---------------------------------------------------------------------------


@dataclass
class CostComparison:
    rows: List[Dict[str, Any]]
    flagged: List[str]

    @property
    def candidate(self) -> Dict[str, Any]:
        return self.rows[0]

    def to_report(self) -> CheckReport:
        margins = np.array([row["margin"] for row in self.rows[1:]]) if len(self.rows) > 1 else np.zeros(0)
        return CheckReport(
            name="compare_costs",
            max_violation=max(float(margins.max()), 0.0) if margins.size else 0.0,
            violating_fraction=len(self.flagged) / max(len(self.rows) - 1, 1),
            tolerance=0.0,
            cap=0.0,
            evidence=[row for row in self.rows if row["flagged"]][:EVIDENCE_SIZE],
            details={"controls": len(self.rows)},
        )


def compare_costs(
    model: ModelSpec,
    gen: GeneratorMatrix,
    grid: TimeGrid,
    particles: int,
    seed: int,
    candidate: ControlPair,
    perturbations: Sequence[ControlPair],
    solver: Optional[Callable[[ParticleEnsemble], Any]] = None,
    initial_regime: int = 1,
    threads: Optional[int] = None,
) -> CostComparison:
    """
    Reward of the candidate and of each perturbation under one shared noise
    draw. A perturbation is flagged when its reward beats the candidate's by
    more than two combined standard errors. ``solver`` supplies the adjoint
    for feedback that reads p.
    """
    noise = draw_noise(gen, grid, particles, seed, initial_regime, threads=threads)

    def evaluate(control: ControlPair):
        if control.needs_adjoint:
            if solver is None:
                raise PreconditionError(f"control '{control.name}' needs an adjoint solver")
            ensemble, _ = simulate_coupled(
                model, gen, control, grid, particles, seed, solver,
                initial_regime=initial_regime, noise=noise,
            )
        else:
            ensemble = simulate(model, gen, control, grid, particles, seed, noise=noise)
        return estimate_cost(model, ensemble, control)

    with timed("mp_check", "compare_costs", controls=len(perturbations) + 1):
        j_candidate, se_candidate = evaluate(candidate)
        rows = [
            {"name": candidate.name, "J": j_candidate, "SE": se_candidate, "margin": 0.0, "flagged": False}
        ]
        flagged = []
        for index, control in enumerate(perturbations):
            j, se = evaluate(control)
            margin = (j - j_candidate) - 2.0 * math.sqrt(se_candidate**2 + se**2)
            is_flagged = margin > 0.0
            name = control.name if control.name != candidate.name else f"{control.name}#{index}"
            rows.append({"name": name, "J": j, "SE": se, "margin": margin, "flagged": is_flagged})
            if is_flagged:
                flagged.append(name)
    if flagged:
        logger.warning(f"{len(flagged)} controls beat the candidate by more than 2 SE: {flagged}")
    return CostComparison(rows=rows, flagged=flagged)


def random_perturbations(
    candidate: ControlPair,
    grid: TimeGrid,
    count: int,
    amplitude: float,
    seed: int,
    control_set: Optional[Any] = None,
) -> List[ControlPair]:
    """
    ``count`` controls equal to the candidate plus a random per-step offset
    in [-amplitude, amplitude]; open-loop tables are projected back onto A1.
    """
    out = []
    for index in range(count):
        offsets = stream(seed, CONTROL, index).uniform(-amplitude, amplitude, grid.steps)
        regular = candidate.regular
        if isinstance(regular, Feedback):
            perturbed = PerturbedFeedback.around(regular, offsets, grid, name=f"{regular.name}~{index}")
        else:
            values = regular.values + offsets
            perturbed = OpenLoop(control_set.project(values) if control_set is not None else values)
        out.append(ControlPair(regular=perturbed, singular=candidate.singular))
    return out
