"""
Acceptance suites at full particle counts.

Run with ``pytest tests/benchmarks -m slow``. Each suite is timed once
through pytest-benchmark so regressions in runtime show up next to the
numerical results.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mfsmp.adjoint import (
    backward_defect,
    solve_adjoint_interbank_explicit,
    solve_adjoint_lsmc,
    solve_second_order,
)
from mfsmp.forward_sim import (
    Atom,
    ControlPair,
    SingularControl,
    constant_feedback,
    estimate_cost,
    hamiltonian_feedback,
    interbank_mp_feedback,
    simulate,
    simulate_coupled,
)
from mfsmp.grid import TimeGrid
from mfsmp.model import ControlSet, InterbankParams, LinearQuadraticParams, interbank_model, linear_quadratic_model
from mfsmp.mp_check import (
    check_singular_conditions,
    check_sufficient,
    check_variational_inequality,
    compare_costs,
    random_perturbations,
)
from mfsmp.oracle import WITHIN_SE, CoarseInstance, brute_force_open_loop, riccati_oracle, verdict
from mfsmp.regime_chain import GeneratorMatrix, compensated_increments, sample_regime_paths

pytest.importorskip("pytest_benchmark")

pytestmark = [pytest.mark.slow, pytest.mark.benchmark]


def _once(benchmark, fn, *args, **kwargs):
    return benchmark.pedantic(fn, args=args, kwargs=kwargs, rounds=1, iterations=1)


def _riccati_run(params, grid, particles, seed):
    model = interbank_model(params)
    control = ControlPair(riccati_oracle(params, grid).feedback)
    return model, simulate(model, params.generator, control, grid, particles, seed)


class TestMartingales:
    def test_compensated_jumps_have_zero_mean(self, benchmark):
        gen = GeneratorMatrix.two_state(1.0, 2.0)
        grid = TimeGrid(1.0, 1)

        def terminal_values():
            paths = sample_regime_paths(gen, 1, grid, seed=11, count=100_000)
            return np.array([compensated_increments(path, gen).terminal_values() for path in paths])

        values = _once(benchmark, terminal_values)
        mean = values.mean(axis=0)
        stderr = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
        assert np.all(np.abs(mean) <= 4 * stderr)


class TestForwardConsistency:
    def test_mean_reverting_moments(self, benchmark):
        """u = 0: mean stays at x0, deviations follow an OU process"""
        sigma, particles = 0.3, 10_000
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=sigma, rho=0.0, epsilon=0.0, beta=0.0, x0=1.0)
        model = interbank_model(params)
        grid = TimeGrid(1.0, 200)
        ensemble = _once(
            benchmark, simulate, model, params.generator, ControlPair(constant_feedback(0.0)), grid, particles, 3
        )
        terminal = ensemble.states[:, -1]
        # The empirical mean moves only with the averaged Brownian motion: its sd
        # is sigma sqrt(T / N), not the sample SE of X(T).
        assert abs(terminal.mean() - 1.0) <= 4 * sigma / np.sqrt(particles)

        variance = terminal.var(ddof=1)
        target = sigma**2 * (1.0 - np.exp(-2.0)) / 2.0
        stderr = variance * np.sqrt(2.0 / (particles - 1))
        assert abs(variance - target) <= 0.05 * sigma**2 + 3 * stderr

    def test_mean_field_error_halves_with_four_times_the_particles(self, benchmark):
        """RMS of mu_T - x0 over seeds scales like 1 / sqrt(N)"""
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.0, epsilon=0.0, beta=0.0, x0=1.0)
        model = interbank_model(params)
        grid = TimeGrid(1.0, 5)
        control = ControlPair(constant_feedback(0.0))

        def rms(particles, first_seed):
            errors = [
                simulate(model, params.generator, control, grid, particles, seed).mean_field[-1] - 1.0
                for seed in range(first_seed, first_seed + 200)
            ]
            return float(np.sqrt(np.mean(np.square(errors))))

        coarse, fine = _once(benchmark, lambda: (rms(1000, 0), rms(4000, 1000)))
        assert 0.35 <= fine / coarse <= 0.65


class TestAdjointIdentity:
    """E[p(t)] = 0 on the inter-bank model"""

    @pytest.fixture(scope="class")
    def run(self):
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5, x0=1.0)
        model, ensemble = _riccati_run(params, TimeGrid(1.0, 100), 10_000, 5)
        return params, model, ensemble

    @staticmethod
    def _assert_zero_mean(p):
        stderr = p.std(axis=0, ddof=1) / np.sqrt(p.shape[0])
        assert np.all(np.abs(p.mean(axis=0)) <= 3 * stderr + 1e-12)

    def test_explicit(self, benchmark, run):
        params, _, ensemble = run
        adjoint, _ = _once(benchmark, solve_adjoint_interbank_explicit, params, ensemble)
        self._assert_zero_mean(adjoint.p)

    def test_lsmc(self, benchmark, run):
        params, model, ensemble = run
        lsmc = _once(benchmark, solve_adjoint_lsmc, model, params.generator, ensemble)
        self._assert_zero_mean(lsmc.p)
        explicit, _ = solve_adjoint_interbank_explicit(params, ensemble)
        assert np.sqrt(np.mean((lsmc.p - explicit.p) ** 2)) <= 0.05


class TestDefectConvergence:
    def test_defect_halves_with_step(self, benchmark):
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5, x0=1.0)

        def defect(steps):
            model, ensemble = _riccati_run(params, TimeGrid(1.0, steps), 2000, 9)
            adjoint, _ = solve_adjoint_interbank_explicit(params, ensemble)
            return backward_defect(model, params.generator, ensemble, adjoint).aggregate

        coarse = defect(100)
        fine = _once(benchmark, defect, 200)
        assert 0.35 <= fine / coarse <= 0.65


class TestSufficientSuite:
    def test_maximum_principle_candidate(self, benchmark, interbank, interbank_params, explicit_solver):
        grid = TimeGrid(1.0, 50)
        gen = interbank_params.generator
        candidate = ControlPair(interbank_mp_feedback(interbank_params))

        def suite():
            ensemble, adjoint = simulate_coupled(interbank, gen, candidate, grid, 2000, 7, explicit_solver)
            report = check_sufficient(interbank, gen, ensemble, candidate, adjoint)
            perturbations = random_perturbations(candidate, grid, 20, 0.5, seed=8, control_set=interbank.control_set)
            comparison = compare_costs(
                interbank, gen, grid, 2000, 7, candidate, perturbations, solver=explicit_solver
            )
            return report, comparison

        report, comparison = _once(benchmark, suite)
        assert report.passed
        assert all(child.passed for child in report.children)
        assert comparison.flagged == []


class TestNecessarySuite:
    @pytest.fixture
    def tracking(self):
        gen = GeneratorMatrix.single()
        params = LinearQuadraticParams(
            generator=gen, B=1.0, R=1.0, s0=0.2, hx=0.3, hy=0.2, G=1.0, kappa=-0.6,
            control_set=ControlSet(-1.0, 1.0, 5),
        )
        return linear_quadratic_model(params), gen

    def test_enumerated_optimum_and_candidate(self, benchmark, tracking):
        model, gen = tracking
        instance = CoarseInstance(
            model=model, generator=gen, grid=TimeGrid(1.0, 4), control_values=(-1.0, -0.5, 0.0, 0.5, 1.0),
            atom_times=(0.5,), atom_sizes=(0.0, 0.5), particles=2000, seed=3,
        )
        result = _once(benchmark, brute_force_open_loop, instance)
        assert len(result.rows) == 5**4 * 2
        best = result.best_row
        assert best["regular"] == [0.5] * 4

        control = instance.control(best["regular"], best["atoms"])
        ensemble = simulate(model, gen, control, instance.grid, instance.particles, instance.seed)
        adjoint = solve_adjoint_lsmc(model, gen, ensemble)
        second = solve_second_order(model, gen, ensemble, adjoint)
        report = check_variational_inequality(model, gen, ensemble, control, adjoint, second)
        assert report.passed
        assert report.details["auto_tolerance"] is True

        candidate = ControlPair(hamiltonian_feedback(model))
        coupled, _ = simulate_coupled(
            model, gen, candidate, instance.grid, instance.particles, instance.seed,
            lambda e: solve_adjoint_lsmc(model, gen, e),
        )
        outcome = verdict(estimate_cost(model, coupled), result)
        assert outcome.outcome == WITHIN_SE


class TestSingularComplementarity:
    def test_zero_and_manufactured_atom(self, benchmark, interbank, interbank_params, explicit_solver):
        grid = TimeGrid(1.0, 20)
        gen = interbank_params.generator
        regular = interbank_mp_feedback(interbank_params)

        ensemble, adjoint = _once(
            benchmark, simulate_coupled, interbank, gen, ControlPair(regular), grid, 2000, 7, explicit_solver
        )
        assert check_singular_conditions(interbank, ensemble, adjoint).passed

        singular = SingularControl(atoms=(Atom(0.5, 0.2),))
        ensemble, adjoint = simulate_coupled(
            interbank, gen, ControlPair(regular, singular), grid, 2000, 7, explicit_solver
        )
        report = check_singular_conditions(interbank, ensemble, adjoint, singular)
        assert not report.children[1].passed


class TestSecondOrderOracle:
    def test_fine_grid(self, benchmark):
        """-dP/dt = -2 a P - eps with P(T) = -beta"""
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=2.0)
        model = interbank_model(params)
        grid = TimeGrid(1.0, 1000)
        ensemble = simulate(model, params.generator, ControlPair(constant_feedback(0.0)), grid, 5, 0)
        second = _once(benchmark, solve_second_order, model, params.generator, ensemble)
        tau = grid.horizon - grid.times
        assert_allclose(second.P[0], -0.5 - 1.5 * np.exp(-2.0 * tau), rtol=1e-6)
