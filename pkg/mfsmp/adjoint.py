"""
Hamiltonian and adjoint equations.

First-order adjoint (maximization form), with y = E[phi(X)]:

    dp = -[H_x + E[H_y] phi_x(X)] dt + q dB + sum_j s_j dPhi~_j
    p(T) = h_x + E[h_y] phi_x(X(T))

Solvers provided here:

- ``solve_adjoint_lsmc``: backward Euler with least-squares regression on
  polynomial bases times regime indicators.
- ``solve_adjoint_interbank_explicit``: Riccati representation
  p = -eta(t) (X - E X) for the regime-independent inter-bank model.
- ``solve_volterra_mean``: integrating-factor representation of the
  inter-bank adjoint with regime-dependent mean reversion, closed by a
  Volterra equation for E[a p].
- ``solve_second_order``: regime-coupled linear ODE for P_i(t) when the
  coefficients are deterministic per regime.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import expm

from .errors import (
    ConvergenceError,
    RiccatiBlowUpError,
    ShapeMismatchError,
    SolverError,
    UnsupportedModelClassError,
)
from .forward_sim import ParticleEnsemble
from .grid import TimeGrid
from .model import IDENTITY, InterbankParams, MeanFieldMap, ModelSpec, interbank_model
from .performance_monitor import timed
from .regime_chain import GeneratorMatrix
from .settings import resolve

logger = logging.getLogger(__name__)

ScalarOrFunction = Union[float, Callable[[float], float]]


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------


def _jump_rates(gen: GeneratorMatrix, regime) -> np.ndarray:
    # zeta_ij for j != i; the j = i term never fires.
    return gen.off_diagonal[np.asarray(regime) - 1]


def hamiltonian(model: ModelSpec, t, x, y, u, regime, p, q, s, gen: GeneratorMatrix) -> np.ndarray:
    """H = f + b p + sigma q + sum_j gamma^j s_j zeta_ij."""
    s = np.asarray(s, dtype=float)
    jump = np.sum(model.jump(t, x, y, u, regime) * s * _jump_rates(gen, regime), axis=-1)
    return (
        model.running_cost(t, x, y, u, regime)
        + model.drift(t, x, y, u, regime) * p
        + model.diffusion(t, x, y, u, regime) * q
        + jump
    )


def hamiltonian_derivatives(
    model: ModelSpec, t, x, y, u, regime, p, q, s, gen: GeneratorMatrix
) -> Dict[str, np.ndarray]:
    """H_x, H_y and H_xx at fixed (p, q, s)."""
    s = np.asarray(s, dtype=float)
    rates = _jump_rates(gen, regime)
    out = {}
    for name in ("dx", "dy", "dxx"):
        jump = np.sum(model.jump.partial(name, t, x, y, u, regime) * s * rates, axis=-1)
        out[f"H_{name[1:]}"] = (
            model.running_cost.partial(name, t, x, y, u, regime)
            + model.drift.partial(name, t, x, y, u, regime) * p
            + model.diffusion.partial(name, t, x, y, u, regime) * q
            + jump
        )
    return out


def adjoint_driver(
    model: ModelSpec, gen: GeneratorMatrix, t: float, x, mu: float, u, regime, p, q, s
) -> np.ndarray:
    """F = H_x + mean(H_y) phi_x(X), the mean taken over the ensemble."""
    d = hamiltonian_derivatives(model, t, x, mu, u, regime, p, q, s, gen)
    return d["H_x"] + float(np.mean(d["H_y"])) * model.mean_field.derivative(x)


def terminal_adjoint(model: ModelSpec, x, mu: float, regime) -> np.ndarray:
    """p(T) = h_x + mean(h_y) phi_x(X(T))."""
    h_y = model.terminal_cost.partial("dy", x, mu, regime)
    return model.terminal_cost.partial("dx", x, mu, regime) + float(np.mean(h_y)) * model.mean_field.derivative(x)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearDeviationField:
    """p(t_k, x) = -eta_k (x - mu)."""

    eta: np.ndarray

    def __call__(self, k: int, x, mu: float, regime) -> np.ndarray:
        return -self.eta[k] * (np.asarray(x, dtype=float) - mu)


@dataclass
class AdjointSample:
    """
    First-order adjoint on an ensemble: p (N, M+1), q (N, M), s (N, M, D).

    ``field`` optionally represents p as a function of (step, state, mean
    field, regime) so feedback rules can read p on a fresh ensemble.
    """

    p: np.ndarray
    q: np.ndarray
    s: np.ndarray
    solver: str
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    field: Optional[Callable[[int, Any, float, Any], np.ndarray]] = None

    def check_shapes(self, ensemble: ParticleEnsemble):
        n, m = ensemble.particles, ensemble.steps
        if self.p.shape != (n, m + 1) or self.q.shape != (n, m) or self.s.shape[:2] != (n, m):
            raise ShapeMismatchError(
                f"adjoint shapes p{self.p.shape} q{self.q.shape} s{self.s.shape} "
                f"do not match an ensemble of {n} particles and {m} steps"
            )


@dataclass(frozen=True)
class RiccatiSolution:
    times: np.ndarray
    eta: np.ndarray
    residual_norm: float


@dataclass(frozen=True)
class SecondOrderField:
    """Per-regime P (D, M+1), Q (D, M+1) and S (D, D, M+1) with S[i, j] = P_j - P_i."""

    P: np.ndarray
    Q: np.ndarray
    S: np.ndarray

    def at(self, k: int, regime) -> Tuple[np.ndarray, np.ndarray]:
        """P and the S-row (one entry per target regime) for the given regimes at step k."""
        idx = np.asarray(regime) - 1
        return self.P[idx, k], self.S[idx, :, k]


@dataclass(frozen=True)
class DefectReport:
    """Backward-Euler defect of the first-order adjoint equation."""

    per_step: np.ndarray
    aggregate: float
    terminal_error: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_step": self.per_step.tolist(),
            "aggregate": self.aggregate,
            "terminal_error": self.terminal_error,
        }


# ---------------------------------------------------------------------------
# Regression machinery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Basis:
    order: int
    center: float
    scale: float
    extra: Optional[MeanFieldMap] = None

    @property
    def columns(self) -> int:
        return self.order + 1 + (self.extra is not None)

    def design(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.center) / self.scale
        cols = [z**d for d in range(self.order + 1)]
        if self.extra is not None:
            cols.append(self.extra(x))
        return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class _BlockFit:
    """Per-regime regression coefficients, shape (D, columns)."""

    basis: _Basis
    coefficients: np.ndarray

    def __call__(self, x, regime) -> np.ndarray:
        design = self.basis.design(x)
        coef = self.coefficients[np.asarray(regime) - 1]
        return np.sum(design * coef, axis=-1)


class _Regressor:
    """Least squares on polynomial bases times regime indicators."""

    def __init__(self, dim: int, order: int, mean_field: MeanFieldMap):
        self.dim = dim
        self.order = order
        self.extra = None if mean_field is IDENTITY else mean_field
        self.degraded_steps: List[int] = []

    def fit(self, x: np.ndarray, regime: np.ndarray, target: np.ndarray, step: int) -> _BlockFit:
        x = np.asarray(x, dtype=float)
        spread = float(np.std(x))
        order = self.order
        extra = self.extra
        if spread == 0.0 or x.size < 2:
            # Degenerate cross-section, e.g. the deterministic initial state.
            order, extra, spread = 0, None, 1.0

        while True:
            basis = _Basis(order, float(np.mean(x)), spread, extra)
            design = basis.design(x)
            pooled, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
            if rank == basis.columns or (order == 0 and extra is None):
                break
            if extra is not None:
                extra = None
            else:
                order -= 1
            if step not in self.degraded_steps:
                self.degraded_steps.append(step)

        coefficients = np.tile(pooled, (self.dim, 1))
        if self.dim > 1:
            minimum = max(2 * basis.columns, 10)
            for i in range(1, self.dim + 1):
                mask = regime == i
                if np.count_nonzero(mask) < minimum:
                    continue
                block, _, rank, _ = np.linalg.lstsq(design[mask], target[mask], rcond=None)
                if rank == basis.columns:
                    coefficients[i - 1] = block
        return _BlockFit(basis, coefficients)

    def report(self, solver: str):
        if self.degraded_steps:
            logger.warning(
                f"{solver}: regression basis order reduced at {len(self.degraded_steps)} "
                f"steps (rank deficient design), first at step {min(self.degraded_steps)}"
            )


@dataclass(frozen=True)
class RegressionField:
    """p(t_k, x, regime) from the per-step regression fits."""

    fits: Tuple[_BlockFit, ...]

    def __call__(self, k: int, x, mu: float, regime) -> np.ndarray:
        return self.fits[min(k, len(self.fits) - 1)](x, regime)


def _martingale_integrands(
    regressor: _Regressor,
    ensemble: ParticleEnsemble,
    k: int,
    next_p: np.ndarray,
    next_value: Callable[[np.ndarray, np.ndarray], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Conditional mean of p_{k+1}, the Brownian integrand q_k by Delta B
    regression, and the jump integrands s_k from the regime-indexed
    representation of p_{k+1}.
    """
    x = ensemble.states[:, k]
    regime = ensemble.regimes[:, k]
    h = ensemble.grid.h
    conditional = regressor.fit(x, regime, next_p, k)(x, regime)
    q_target = (next_p - conditional) * ensemble.brownian[:, k] / h
    q = regressor.fit(x, regime, q_target, k)(x, regime)

    dim = regressor.dim
    s = np.zeros((x.size, dim))
    if dim > 1:
        by_regime = np.column_stack([next_value(x, np.full(x.size, j)) for j in range(1, dim + 1)])
        s = by_regime - by_regime[np.arange(x.size), regime - 1][:, None]
    return conditional, q, s


def _require_finite(name: str, values: np.ndarray, step: int):
    if not np.all(np.isfinite(values)):
        raise SolverError(f"non-finite {name} at step {step}")


# ---------------------------------------------------------------------------
# LSMC solver
# ---------------------------------------------------------------------------


def solve_adjoint_lsmc(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    basis_order: Optional[int] = None,
) -> AdjointSample:
    """
    Backward Euler p_k = E_k[p_{k+1}] + h F_k, conditional expectations by
    regression on {1, X, ..., X^order (, phi(X))} per regime.
    """
    basis_order = resolve("basis_order", basis_order)
    grid = ensemble.grid
    n, m, dim = ensemble.particles, grid.steps, gen.dim
    x_all, mu, regimes = ensemble.states, ensemble.mean_field, ensemble.regimes
    regressor = _Regressor(dim, basis_order, model.mean_field)

    p = np.empty((n, m + 1))
    q = np.empty((n, m))
    s = np.zeros((n, m, dim))

    with timed("adjoint", "solve_adjoint_lsmc", particles=n, steps=m):
        p[:, m] = terminal_adjoint(model, x_all[:, m], mu[m], regimes[:, m])
        _require_finite("terminal adjoint", p[:, m], m)

        mu_m = mu[m]
        h_y_mean = float(np.mean(model.terminal_cost.partial("dy", x_all[:, m], mu_m, regimes[:, m])))

        def terminal_value(x, regime):
            return model.terminal_cost.partial("dx", x, mu_m, regime) + h_y_mean * model.mean_field.derivative(x)

        next_value: Callable[[np.ndarray, np.ndarray], np.ndarray] = terminal_value
        fits: List[_BlockFit] = [None] * m  # type: ignore[list-item]

        for k in range(m - 1, -1, -1):
            x, regime = x_all[:, k], regimes[:, k]
            conditional, q[:, k], s[:, k, :] = _martingale_integrands(
                regressor, ensemble, k, p[:, k + 1], next_value
            )
            driver = adjoint_driver(
                model, gen, grid.time(k), x, mu[k], ensemble.controls[:, k], regime,
                conditional, q[:, k], s[:, k, :],
            )
            p[:, k] = conditional + grid.h * driver
            _require_finite("adjoint", p[:, k], k)
            fits[k] = regressor.fit(x, regime, p[:, k], k)
            next_value = fits[k]

    regressor.report("solve_adjoint_lsmc")
    logger.info(f"LSMC adjoint solved on {n} particles, {m} steps, basis order {basis_order}")
    return AdjointSample(
        p=p,
        q=q,
        s=s,
        solver="lsmc",
        field=RegressionField(tuple(fits)),
        diagnostics={"basis_order": basis_order, "degraded_steps": sorted(regressor.degraded_steps)},
    )


# ---------------------------------------------------------------------------
# Riccati representation
# ---------------------------------------------------------------------------


def _as_function(value: ScalarOrFunction) -> Callable[[float], float]:
    if callable(value):
        return lambda t: float(value(t))
    constant = float(value)
    return lambda t: constant


def solve_riccati(
    a: ScalarOrFunction,
    b: ScalarOrFunction,
    rho: float,
    epsilon: float,
    beta: float,
    grid: TimeGrid,
    substeps: Optional[int] = None,
    bound: Optional[float] = None,
) -> RiccatiSolution:
    """
    eta' = b^2 eta^2 + 2 (a + b rho) eta - (epsilon - rho^2), eta(T) = beta,
    integrated backward by RK4 with ``substeps`` per grid step.
    """
    substeps = resolve("riccati_substeps", substeps)
    bound = resolve("riccati_bound", bound)
    a_of, b_of = _as_function(a), _as_function(b)
    source = epsilon - rho**2

    def rhs(t: float, eta: float) -> float:
        bt = b_of(t)
        return bt * bt * eta * eta + 2.0 * (a_of(t) + bt * rho) * eta - source

    eta = np.empty(grid.steps + 1)
    eta[-1] = beta
    dt = -grid.h / substeps
    with timed("adjoint", "solve_riccati", steps=grid.steps):
        for k in range(grid.steps, 0, -1):
            value = eta[k]
            t = grid.time(k)
            for _ in range(substeps):
                k1 = rhs(t, value)
                k2 = rhs(t + dt / 2, value + dt * k1 / 2)
                k3 = rhs(t + dt / 2, value + dt * k2 / 2)
                k4 = rhs(t + dt, value + dt * k3)
                value = value + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
                t += dt
            if not np.isfinite(value) or abs(value) > bound:
                raise RiccatiBlowUpError(f"|eta| exceeded {bound:g} at t={grid.time(k - 1):.6g}")
            eta[k - 1] = value

    residual = 0.0
    if grid.steps >= 2:
        derivative = (eta[2:] - eta[:-2]) / (2 * grid.h)
        expected = np.array([rhs(t, e) for t, e in zip(grid.times[1:-1], eta[1:-1])])
        residual = float(np.max(np.abs(derivative - expected)))
    return RiccatiSolution(times=grid.times, eta=eta, residual_norm=residual)


def _require_regime_independent(params: InterbankParams):
    if not params.is_regime_independent:
        raise UnsupportedModelClassError(
            "explicit inter-bank solution needs regime-independent a, b and c; "
            "use solve_volterra_mean for regime-dependent coefficients"
        )


def solve_adjoint_interbank_explicit(
    params: InterbankParams,
    ensemble: ParticleEnsemble,
    substeps: Optional[int] = None,
) -> Tuple[AdjointSample, RiccatiSolution]:
    """
    p = -eta(t) (X - mean X), q = -eta(t) sigma, s = 0, with the discrete
    backward-equation defect of this candidate in the diagnostics.
    """
    _require_regime_independent(params)
    grid = ensemble.grid
    riccati = solve_riccati(
        lambda t: float(params.a(t, 1)),
        lambda t: float(params.b(t, 1)),
        params.rho,
        params.epsilon,
        params.beta,
        grid,
        substeps=substeps,
    )
    eta = riccati.eta
    deviation = ensemble.states - ensemble.mean_field[None, :]
    p = -eta[None, :] * deviation
    q = np.broadcast_to(-eta[None, :-1] * params.sigma, (ensemble.particles, grid.steps)).copy()
    s = np.zeros((ensemble.particles, grid.steps, params.generator.dim))
    adjoint = AdjointSample(p=p, q=q, s=s, solver="explicit", field=LinearDeviationField(eta))

    defect = backward_defect(interbank_model(params), params.generator, ensemble, adjoint)
    adjoint.diagnostics.update(
        {"riccati_residual": riccati.residual_norm, "bsde_residual": defect.aggregate}
    )
    logger.info(f"Explicit inter-bank adjoint: eta(0)={eta[0]:.6g}, BSDE defect {defect.aggregate:.3e}")
    return adjoint, riccati


# ---------------------------------------------------------------------------
# Volterra representation for regime-dependent mean reversion
# ---------------------------------------------------------------------------


def solve_volterra_mean(
    params: InterbankParams,
    ensemble: ParticleEnsemble,
    max_iterations: Optional[int] = None,
    tol: Optional[float] = None,
    basis_order: Optional[int] = None,
) -> AdjointSample:
    """
    Inter-bank adjoint with regime-dependent a.

    On the grid, Psi_M = p_M and
        Psi_k = exp(-a_k h) Psi_{k+1} - h (rho (u_k - mean u_k) - eps Y_k - m_k),
    with Y = mean X - X and p_k = E[Psi_k | X_k, alpha_k]. The unknown
    m_k = E[a~_k Psi_{k+1}], a~ = (1 - exp(-a h)) / h, solves the Volterra
    equation
        m_k = E[a~_k G_{k+1}^M p_M]
              - h sum_{r>k} (rho Cov(a~_k G_{k+1}^r, u_r) + eps Cov(a~_k G_{k+1}^r, X_r)
                             - m_r E[a~_k G_{k+1}^r]),
    G_k^r = exp(-h sum_{l=k}^{r-1} a_l), solved by fixed-point iteration.
    With this closure mean_n Psi_k = mean_n p_M = 0 at every step.
    """
    max_iterations = resolve("volterra_max_iterations", max_iterations)
    tol = resolve("volterra_tolerance", tol)
    basis_order = resolve("basis_order", basis_order)
    grid = ensemble.grid
    n, m = ensemble.particles, grid.steps
    h = grid.h
    dim = params.generator.dim
    rho, eps, beta = params.rho, params.epsilon, params.beta

    x, mu, regimes, u = ensemble.states, ensemble.mean_field, ensemble.regimes, ensemble.controls
    with timed("adjoint", "solve_volterra_mean", particles=n, steps=m):
        rates = np.column_stack([params.a(grid.time(k), regimes[:, k]) for k in range(m)])
        # cumulative[:, r] = h * sum_{l<r} a_l, so G_k^r = exp(cumulative[:, k] - cumulative[:, r]).
        cumulative = np.concatenate([np.zeros((n, 1)), np.cumsum(rates * h, axis=1)], axis=1)
        a_tilde = -np.expm1(-rates * h) / h
        terminal = beta * (mu[m] - x[:, m])
        u_centered = u - u.mean(axis=0)
        x_centered = x - mu[None, :]

        forcing = np.zeros(m)
        kernel = np.zeros((m, m))
        for k in range(m):
            weights = a_tilde[:, k][:, None] * np.exp(cumulative[:, k + 1][:, None] - cumulative[:, k + 1:])
            # weights[:, j] = a~_k G_{k+1}^{k+1+j}, j = 0..M-k-1; the last column is G_{k+1}^M.
            forcing[k] = float(np.mean(weights[:, -1] * terminal))
            if k + 1 < m:
                inner = weights[:, :-1]
                rs = slice(k + 1, m)
                cov_u = np.mean(inner * u_centered[:, rs], axis=0)
                cov_x = np.mean(inner * x_centered[:, rs], axis=0)
                forcing[k] -= h * float(np.sum(rho * cov_u + eps * cov_x))
                kernel[k, rs] = h * inner.mean(axis=0)

        solution = np.zeros(m)
        change = np.inf
        iterations = 0
        while iterations < max_iterations:
            updated = forcing + kernel @ solution
            change = float(np.max(np.abs(updated - solution))) if m else 0.0
            solution = updated
            iterations += 1
            if change <= tol:
                break
        if change > tol:
            raise ConvergenceError("Volterra fixed point did not converge", change, iterations)
        volterra_residual = float(np.max(np.abs(solution - forcing - kernel @ solution))) if m else 0.0

        psi = np.empty((n, m + 1))
        psi[:, m] = terminal
        for k in range(m - 1, -1, -1):
            psi[:, k] = (
                np.exp(-rates[:, k] * h) * psi[:, k + 1]
                - h * (rho * u_centered[:, k] + eps * x_centered[:, k] - solution[k])
            )
        _require_finite("Volterra representation", psi, 0)

        model = interbank_model(params)
        regressor = _Regressor(dim, basis_order, IDENTITY)
        p = np.empty((n, m + 1))
        p[:, m] = terminal
        q = np.empty((n, m))
        s = np.zeros((n, m, dim))
        fits: List[_BlockFit] = [None] * m  # type: ignore[list-item]

        def terminal_value(xs, regime):
            return beta * (mu[m] - xs)

        next_value: Callable[[np.ndarray, np.ndarray], np.ndarray] = terminal_value
        for k in range(m - 1, -1, -1):
            fits[k] = regressor.fit(x[:, k], regimes[:, k], psi[:, k], k)
            p[:, k] = fits[k](x[:, k], regimes[:, k])
            _, q[:, k], s[:, k, :] = _martingale_integrands(regressor, ensemble, k, p[:, k + 1], next_value)
            next_value = fits[k]

    regressor.report("solve_volterra_mean")
    logger.info(
        f"Volterra mean solved in {iterations} iterations (change {change:.3e}, residual {volterra_residual:.3e})"
    )
    adjoint = AdjointSample(
        p=p,
        q=q,
        s=s,
        solver="volterra",
        field=RegressionField(tuple(fits)),
        diagnostics={
            "volterra_iterations": iterations,
            "volterra_residual": volterra_residual,
            "mean_rate_adjoint": solution.tolist(),
        },
    )
    adjoint.diagnostics["bsde_residual"] = backward_defect(model, params.generator, ensemble, adjoint).aggregate
    return adjoint


# ---------------------------------------------------------------------------
# Second-order adjoint
# ---------------------------------------------------------------------------


def _deterministic(name: str, values: np.ndarray, tolerance: float, regime: int, step: int) -> float:
    values = np.asarray(values, dtype=float)
    center = float(np.mean(values))
    if values.size > 1 and float(np.std(values)) > tolerance * max(1.0, abs(center)):
        raise UnsupportedModelClassError(
            f"{name} varies across particles in regime {regime} at step {step} "
            f"(std {np.std(values):.3e}); second-order solver needs per-regime deterministic coefficients"
        )
    return center


def solve_second_order(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    adjoint: Optional[AdjointSample] = None,
    tolerance: Optional[float] = None,
) -> SecondOrderField:
    """
    Backward system, per regime i,

        -dP_i/dt = (2 b_x + sigma_x^2) P_i
                   + sum_{j != i} [(gamma_x^j)^2 P_j + 2 gamma_x^j (P_j - P_i) + (P_j - P_i)] zeta_ij
                   + H_xx,
        P_i(T) = h_xx in regime i,

    with Q = 0 and S_j = P_j - P_i. Coefficients are frozen on each step
    and every step is integrated exactly with a matrix exponential.
    """
    tolerance = resolve("second_order_tolerance", tolerance)
    grid = ensemble.grid
    n, m, dim = ensemble.particles, grid.steps, gen.dim
    x, mu = ensemble.states, ensemble.mean_field
    rates = gen.off_diagonal

    P = np.empty((dim, m + 1))
    with timed("adjoint", "solve_second_order", steps=m, regimes=dim):
        for i in range(1, dim + 1):
            forced = np.full(n, i)
            P[i - 1, m] = _deterministic(
                "h_xx", model.terminal_cost.partial("dxx", x[:, m], mu[m], forced), tolerance, i, m
            )

        augmented = np.zeros((dim + 1, dim + 1))
        for k in range(m - 1, -1, -1):
            t = grid.time(k)
            u = ensemble.controls[:, k]
            if adjoint is None:
                p_k, q_k, s_k = 0.0, 0.0, np.zeros((n, dim))
            else:
                p_k, q_k, s_k = adjoint.p[:, k], adjoint.q[:, k], adjoint.s[:, k, :]
            generator = np.zeros((dim, dim))
            source = np.zeros(dim)
            for i in range(1, dim + 1):
                forced = np.full(n, i)
                args = (t, x[:, k], mu[k], u, forced)
                b_x = _deterministic("b_x", model.drift.partial("dx", *args), tolerance, i, k)
                sigma_x = _deterministic("sigma_x", model.diffusion.partial("dx", *args), tolerance, i, k)
                gamma_x = model.jump.partial("dx", *args)
                gamma_x = np.array(
                    [_deterministic(f"gamma_x^{j + 1}", gamma_x[:, j], tolerance, i, k) for j in range(dim)]
                )
                h_xx = hamiltonian_derivatives(model, t, x[:, k], mu[k], u, forced, p_k, q_k, s_k, gen)["H_xx"]
                source[i - 1] = _deterministic("H_xx", h_xx, tolerance, i, k)

                row = rates[i - 1]
                generator[i - 1, :] = (gamma_x + 1.0) ** 2 * row
                generator[i - 1, i - 1] = (
                    2.0 * b_x + sigma_x**2 - float(np.sum((2.0 * gamma_x + 1.0) * row))
                )
            # dP/dtau = L P + c in reversed time tau = T - t.
            augmented[:dim, :dim] = generator
            augmented[:dim, dim] = source
            step = expm(augmented * grid.h)
            P[:, k] = step[:dim, :dim] @ P[:, k + 1] + step[:dim, dim]
            _require_finite("second-order adjoint", P[:, k], k)

    S = P[None, :, :] - P[:, None, :]
    return SecondOrderField(P=P, Q=np.zeros_like(P), S=S)


# ---------------------------------------------------------------------------
# Backward-equation defect
# ---------------------------------------------------------------------------


def backward_defect(
    model: ModelSpec,
    gen: GeneratorMatrix,
    ensemble: ParticleEnsemble,
    adjoint: AdjointSample,
) -> DefectReport:
    """
    Per step r_k = p_{k+1} - p_k + F_k h - (q_k dB_k - mean) - sum_j (s_kj dPhi~_kj - mean),
    reported as its RMS over particles. The aggregate is the RMS over (n, k)
    of the integrated defect (xi - p_M) + sum_{l >= k} r_l, xi the terminal
    condition, so a wrong terminal value is caught even when it cancels in
    the increments.
    """
    adjoint.check_shapes(ensemble)
    grid = ensemble.grid
    m = grid.steps
    x, mu, regimes = ensemble.states, ensemble.mean_field, ensemble.regimes
    p, q, s = adjoint.p, adjoint.q, adjoint.s

    defects = np.empty((ensemble.particles, m))
    for k in range(m):
        driver = adjoint_driver(
            model, gen, grid.time(k), x[:, k], mu[k], ensemble.controls[:, k], regimes[:, k],
            p[:, k], q[:, k], s[:, k, :],
        )
        brownian = q[:, k] * ensemble.brownian[:, k]
        jumps = np.sum(s[:, k, :] * ensemble.jump_martingale[:, k, :], axis=-1)
        defects[:, k] = (
            p[:, k + 1] - p[:, k] + driver * grid.h
            - (brownian - brownian.mean())
            - (jumps - jumps.mean())
        )

    terminal_gap = terminal_adjoint(model, x[:, m], mu[m], regimes[:, m]) - p[:, m]
    integrated = np.empty((ensemble.particles, m + 1))
    integrated[:, m] = terminal_gap
    integrated[:, :m] = terminal_gap[:, None] + np.cumsum(defects[:, ::-1], axis=1)[:, ::-1]
    return DefectReport(
        per_step=np.sqrt(np.mean(defects**2, axis=0)),
        aggregate=float(np.sqrt(np.mean(integrated**2))),
        terminal_error=float(np.max(np.abs(terminal_gap))),
    )
