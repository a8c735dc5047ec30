"""
Tests for the Hamiltonian and the adjoint solvers.
"""

import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from mfsmp.adjoint import (
    AdjointSample,
    backward_defect,
    hamiltonian,
    hamiltonian_derivatives,
    solve_adjoint_interbank_explicit,
    solve_adjoint_lsmc,
    solve_riccati,
    solve_second_order,
    solve_volterra_mean,
)
from mfsmp.errors import (
    ConvergenceError,
    RiccatiBlowUpError,
    ShapeMismatchError,
    UnsupportedModelClassError,
)
from mfsmp.forward_sim import ControlPair, constant_feedback, simulate
from mfsmp.grid import TimeGrid
from mfsmp.model import InterbankParams, LinearQuadraticParams, interbank_model, linear_quadratic_model
from mfsmp.oracle import riccati_oracle

ZERO = ControlPair(constant_feedback(0.0))


def _rms(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


class TestHamiltonian:
    """H = f + b p + sigma q + jump term"""

    def test_interbank_value(self, interbank, interbank_params):
        t, x, y, u, p, q = 0.0, 1.0, 0.5, 0.3, 2.0, 0.5
        value = hamiltonian(interbank, t, x, y, u, 1, p, q, np.zeros(1), interbank_params.generator)
        f = -0.5 * u**2 + 0.5 * u * (y - x) - 0.5 * (y - x) ** 2
        assert float(value) == pytest.approx(f + ((y - x) + u) * p + 0.3 * q)

    def test_interbank_derivatives(self, interbank, interbank_params):
        t, x, y, u, p, q = 0.0, 1.0, 0.5, 0.3, 2.0, 0.5
        d = hamiltonian_derivatives(interbank, t, x, y, u, 1, p, q, np.zeros(1), interbank_params.generator)
        assert float(d["H_x"]) == pytest.approx(-0.5 * u + (y - x) - p)
        assert float(d["H_y"]) == pytest.approx(0.5 * u - (y - x) + p)
        assert float(d["H_xx"]) == pytest.approx(-1.0)

    def test_jump_term_uses_off_diagonal_rates(self, two_state):
        """sum over j != i of gamma^j s_j zeta_ij"""
        model = linear_quadratic_model(
            LinearQuadraticParams(generator=two_state, gamma_0=[[0.0, 0.4], [0.7, 0.0]])
        )
        regimes = np.array([1, 2])
        x = np.zeros(2)
        s = np.array([[5.0, 2.0], [5.0, 2.0]])
        with_jumps = hamiltonian(model, 0.0, x, 0.0, x, regimes, 0.0, 0.0, s, two_state)
        without = hamiltonian(model, 0.0, x, 0.0, x, regimes, 0.0, 0.0, np.zeros_like(s), two_state)
        assert_allclose(with_jumps - without, [0.4 * 2.0 * 1.0, 0.7 * 5.0 * 2.0])


class TestRiccati:
    """Backward RK4 integration of eta"""

    def test_long_horizon_equilibrium(self):
        """eta(0) tends to the stable root of b^2 e^2 + 2 (a + b rho) e - (eps - rho^2)"""
        solution = solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, TimeGrid(10.0, 100))
        assert solution.eta[0] == pytest.approx((-3.0 + math.sqrt(12.0)) / 2.0, abs=1e-6)
        assert solution.eta[-1] == 0.5

    def test_residual_is_small(self, grid):
        assert solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, grid).residual_norm < 0.05

    def test_time_dependent_coefficients(self, grid):
        constant = solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, grid)
        varying = solve_riccati(lambda t: 1.0, lambda t: 1.0, 0.5, 1.0, 0.5, grid)
        assert_allclose(constant.eta, varying.eta)

    def test_linear_without_drift(self):
        """a = b = 0 leaves eta' = -(eps - rho^2), so eta = T - t"""
        grid = TimeGrid(2.0, 16)
        solution = solve_riccati(0.0, 0.0, 0.0, 1.0, 0.0, grid)
        assert_allclose(solution.eta, 2.0 - grid.times, atol=1e-12)

    def test_fourth_order_convergence(self):
        grid = TimeGrid(1.0, 40)
        reference = solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, grid, substeps=64, bound=1e8).eta
        coarse = solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, grid, substeps=1, bound=1e8).eta
        fine = solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, grid, substeps=2, bound=1e8).eta
        ratio = np.max(np.abs(coarse - reference)) / np.max(np.abs(fine - reference))
        assert 12.0 <= ratio <= 20.0

    def test_blow_up(self, grid):
        with pytest.raises(RiccatiBlowUpError):
            solve_riccati(1.0, 1.0, 0.5, 1.0, 0.5, grid, bound=0.1)


class TestExplicitInterbank:
    """p = -eta (X - mean X) for the regime-independent model"""

    def test_linear_in_deviation(self, mp_run, interbank_params):
        _, ensemble, adjoint = mp_run
        _, riccati = solve_adjoint_interbank_explicit(interbank_params, ensemble)
        deviation = ensemble.states - ensemble.mean_field[None, :]
        assert_allclose(adjoint.p, -riccati.eta[None, :] * deviation)
        assert_allclose(adjoint.q, np.broadcast_to(-riccati.eta[None, :-1] * 0.3, adjoint.q.shape))
        assert np.all(np.abs(adjoint.p.mean(axis=0)) < 1e-12)

    def test_defect_is_small(self, mp_run, interbank, interbank_params):
        _, ensemble, adjoint = mp_run
        report = backward_defect(interbank, interbank_params.generator, ensemble, adjoint)
        assert report.terminal_error < 1e-12
        assert report.aggregate < 0.05
        assert report.per_step.shape == (ensemble.steps,)
        assert adjoint.diagnostics["bsde_residual"] == pytest.approx(report.aggregate)

    def test_rejects_regime_dependent(self, two_regime_params, grid):
        ensemble = simulate(interbank_model(two_regime_params), two_regime_params.generator, ZERO, grid, 20, 0)
        with pytest.raises(UnsupportedModelClassError):
            solve_adjoint_interbank_explicit(two_regime_params, ensemble)


class TestLsmc:
    """Regression-based backward Euler"""

    def test_matches_explicit(self, mp_run, interbank, interbank_params):
        _, ensemble, explicit = mp_run
        lsmc = solve_adjoint_lsmc(interbank, interbank_params.generator, ensemble)
        lsmc.check_shapes(ensemble)
        assert _rms(lsmc.p, explicit.p) < 0.05
        assert lsmc.solver == "lsmc"

    def test_mean_is_preserved(self, mp_run, interbank, interbank_params):
        """Intercept regression keeps mean p = 0 when H_x + H_y vanishes"""
        _, ensemble, _ = mp_run
        lsmc = solve_adjoint_lsmc(interbank, interbank_params.generator, ensemble)
        assert np.all(np.abs(lsmc.p.mean(axis=0)) < 1e-10)

    def test_field_matches_samples(self, mp_run, interbank, interbank_params):
        _, ensemble, _ = mp_run
        lsmc = solve_adjoint_lsmc(interbank, interbank_params.generator, ensemble)
        k = 5
        fitted = lsmc.field(k, ensemble.states[:, k], ensemble.mean_field[k], ensemble.regimes[:, k])
        assert_allclose(fitted, lsmc.p[:, k], atol=1e-8)

    def test_driver_free_adjoint_is_constant(self, two_state):
        """Nothing depends on x, so p stays at h_x and both integrands vanish"""
        model = linear_quadratic_model(LinearQuadraticParams(generator=two_state, s0=0.2, hx=0.7))
        ensemble = simulate(model, two_state, ZERO, TimeGrid(1.0, 10), 200, 6)
        adjoint = solve_adjoint_lsmc(model, two_state, ensemble)
        assert_allclose(adjoint.p, 0.7, atol=1e-10)
        assert_allclose(adjoint.q, 0.0, atol=1e-10)
        assert_allclose(adjoint.s, 0.0, atol=1e-10)

    def test_two_regime_jump_integrands(self, two_regime_params):
        grid = TimeGrid(1.0, 10)
        model = interbank_model(two_regime_params)
        ensemble = simulate(model, two_regime_params.generator, ZERO, grid, 300, 4)
        adjoint = solve_adjoint_lsmc(model, two_regime_params.generator, ensemble)
        assert adjoint.s.shape == (300, 10, 2)
        own = adjoint.s[np.arange(300), 3, ensemble.regimes[:, 3] - 1]
        assert_allclose(own, 0.0, atol=1e-12)
        assert np.all(np.isfinite(adjoint.p))


class TestVolterra:
    """Integrating-factor representation with a Volterra closure"""

    def test_matches_explicit_when_rates_agree(self, two_state, grid):
        params = InterbankParams(
            a=1.0, b=1.0, c=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5, kappa=0.5, generator=two_state
        )
        model = interbank_model(params)
        control = ControlPair(riccati_oracle(params, grid).feedback)
        ensemble = simulate(model, two_state, control, grid, 500, 3)
        volterra = solve_volterra_mean(params, ensemble, basis_order=1)
        explicit, _ = solve_adjoint_interbank_explicit(params, ensemble)
        assert _rms(volterra.p, explicit.p) < 0.05
        assert volterra.diagnostics["volterra_residual"] < 1e-9

    def test_regime_dependent(self, two_regime_params, grid):
        ensemble = simulate(
            interbank_model(two_regime_params), two_regime_params.generator, ZERO, grid, 300, 6
        )
        adjoint = solve_volterra_mean(two_regime_params, ensemble)
        adjoint.check_shapes(ensemble)
        assert adjoint.solver == "volterra"
        assert len(adjoint.diagnostics["mean_rate_adjoint"]) == grid.steps

    def test_no_convergence(self, two_regime_params, grid):
        ensemble = simulate(
            interbank_model(two_regime_params), two_regime_params.generator, ZERO, grid, 100, 6
        )
        with pytest.raises(ConvergenceError) as info:
            solve_volterra_mean(two_regime_params, ensemble, max_iterations=1, tol=1e-300)
        assert info.value.iterations == 1


class TestSecondOrder:
    """Per-regime linear system for P"""

    def test_single_regime_closed_form(self):
        """-dP/dt = -2 a P - eps with P(T) = -beta"""
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=2.0)
        model = interbank_model(params)
        grid = TimeGrid(1.0, 50)
        ensemble = simulate(model, params.generator, ZERO, grid, 5, 0)
        second = solve_second_order(model, params.generator, ensemble)
        tau = grid.horizon - grid.times
        expected = -0.5 - 1.5 * np.exp(-2.0 * tau)
        assert_allclose(second.P[0], expected, rtol=1e-9, atol=1e-12)
        assert_allclose(second.Q, 0.0)

    def test_regime_coupling(self, two_regime_params):
        """Constant coefficients: P(0) is one matrix exponential of the whole system"""
        grid = TimeGrid(1.0, 40)
        gen = two_regime_params.generator
        model = interbank_model(two_regime_params)
        ensemble = simulate(model, gen, ZERO, grid, 5, 1)
        second = solve_second_order(model, gen, ensemble)

        system = np.zeros((3, 3))
        system[:2, :2] = np.diag([-2.0, -4.0]) + gen.rates
        system[:2, 2] = -1.0
        whole = expm(system * grid.horizon)
        expected = whole[:2, :2] @ np.array([-0.5, -0.5]) + whole[:2, 2]
        assert_allclose(second.P[:, 0], expected, rtol=1e-9)
        assert_allclose(second.S[0, 1], second.P[1] - second.P[0])
        assert_allclose(second.S[1, 0], -second.S[0, 1])

    def test_rejects_stochastic_coefficients(self, interbank, interbank_params, grid):
        running = dataclasses.replace(interbank.running_cost, dxx=lambda t, x, y, u, r: -1.0 - x**2)
        model = dataclasses.replace(interbank, running_cost=running)
        ensemble = simulate(interbank, interbank_params.generator, ZERO, grid, 5, 2)
        with pytest.raises(UnsupportedModelClassError):
            solve_second_order(model, interbank_params.generator, ensemble)

    def test_at(self, two_regime_params):
        grid = TimeGrid(1.0, 10)
        gen = two_regime_params.generator
        model = interbank_model(two_regime_params)
        second = solve_second_order(model, gen, simulate(model, gen, ZERO, grid, 5, 1))
        P, row = second.at(3, np.array([2, 1]))
        assert_allclose(P, [second.P[1, 3], second.P[0, 3]])
        assert row.shape == (2, 2)


class TestBackwardDefect:
    """Discrete defect of the first-order equation"""

    def test_wrong_terminal_value(self, mp_run, interbank, interbank_params):
        _, ensemble, adjoint = mp_run
        shifted = AdjointSample(p=adjoint.p.copy(), q=adjoint.q, s=adjoint.s, solver="shifted")
        shifted.p[:, -1] += 1.0
        report = backward_defect(interbank, interbank_params.generator, ensemble, shifted)
        assert report.terminal_error > 0.99
        assert report.aggregate > 0.2

    def test_shape_check(self, mp_run, interbank, interbank_params):
        _, ensemble, adjoint = mp_run
        bad = AdjointSample(p=adjoint.p[:, :-1], q=adjoint.q, s=adjoint.s, solver="bad")
        with pytest.raises(ShapeMismatchError):
            backward_defect(interbank, interbank_params.generator, ensemble, bad)

    def test_to_dict(self, mp_run, interbank, interbank_params):
        _, ensemble, adjoint = mp_run
        payload = backward_defect(interbank, interbank_params.generator, ensemble, adjoint).to_dict()
        assert set(payload) == {"per_step", "aggregate", "terminal_error"}
        assert len(payload["per_step"]) == ensemble.steps

