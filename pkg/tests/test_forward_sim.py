"""
Tests for the interacting-particle simulator and reward estimation.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mfsmp.errors import ControlError, PreconditionError, ShapeMismatchError, SimulationError
from mfsmp.forward_sim import (
    Atom,
    ControlPair,
    OpenLoop,
    PerturbedFeedback,
    SingularControl,
    constant_feedback,
    draw_noise,
    estimate_cost,
    hamiltonian_feedback,
    mean_and_stderr,
    particle_costs,
    shifted_feedback,
    simulate,
)
from mfsmp.grid import TimeGrid
from mfsmp.model import (
    InterbankParams,
    LinearQuadraticParams,
    PiecewiseConstant,
    interbank_cost,
    interbank_model,
    linear_quadratic_model,
)
from mfsmp.oracle import riccati_oracle
from mfsmp.regime_chain import GeneratorMatrix

ZERO = ControlPair(constant_feedback(0.0))


class TestSimulate:
    """Euler scheme with a synchronous mean field"""

    def test_shapes_and_consistency(self, interbank, interbank_params, grid):
        ensemble = simulate(interbank, interbank_params.generator, ZERO, grid, 50, 1)
        ensemble.check_consistency(interbank)
        assert ensemble.states.shape == (50, 21)
        assert ensemble.controls.shape == (50, 20)
        assert ensemble.jump_martingale.shape == (50, 20, 1)
        assert_array_equal(ensemble.states[:, 0], 0.0)
        assert_allclose(ensemble.mean_field, ensemble.states.mean(axis=0))

    def test_reproducible_across_threads(self, two_regime_params, grid):
        model = interbank_model(two_regime_params)
        gen = two_regime_params.generator
        serial = simulate(model, gen, ZERO, grid, 64, 5, threads=1)
        parallel = simulate(model, gen, ZERO, grid, 64, 5, threads=8)
        assert_array_equal(serial.states, parallel.states)
        assert_array_equal(serial.regimes, parallel.regimes)

    def test_particle_offset(self, two_state, grid):
        """Particle n draws the same noise whatever block it is simulated in"""
        whole = draw_noise(two_state, grid, 10, 4)
        tail = draw_noise(two_state, grid, 5, 4, particle_offset=5)
        assert_array_equal(whole.brownian[5:], tail.brownian)
        assert_array_equal(whole.regimes[5:], tail.regimes)

    def test_particles_decouple_without_mean_field(self, two_state, grid):
        """With no y terms a particle simulated alone follows the same path as inside the ensemble"""
        params = LinearQuadraticParams(
            generator=two_state, A=-1.0, B=1.0, s0=0.3, gamma_0=[[0.0, 0.2], [0.1, 0.0]]
        )
        model = linear_quadratic_model(params)
        control = ControlPair(constant_feedback(0.4))
        ensemble = simulate(model, two_state, control, grid, 6, 11)
        for n in range(6):
            single = simulate(model, two_state, control, grid, 1, 11, particle_offset=n)
            assert_allclose(ensemble.states[n], single.states[0], rtol=1e-12, atol=1e-14)
            assert_array_equal(ensemble.regimes[n], single.regimes[0])

    def test_regimes_switch(self, two_regime_params):
        grid = TimeGrid(5.0, 50)
        ensemble = simulate(interbank_model(two_regime_params), two_regime_params.generator, ZERO, grid, 200, 2)
        assert np.any(ensemble.regimes == 2)
        assert np.any(ensemble.jump_martingale != 0.0)

    def test_mean_preserved_without_control(self):
        """Mean reversion to the empirical mean leaves the mean driven by noise only"""
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5, x0=1.0)
        grid = TimeGrid(1.0, 100)
        ensemble = simulate(interbank_model(params), params.generator, ZERO, grid, 4000, 3)
        increments = ensemble.brownian.mean(axis=0)
        assert_allclose(ensemble.mean_field[-1], 1.0 + 0.3 * increments.sum(), atol=1e-12)

    def test_weak_moments(self):
        """Mean and variance of the mean-reverting state at T"""
        params = InterbankParams.single_regime(a=1.0, b=1.0, sigma=0.3, rho=0.5, epsilon=1.0, beta=0.5, x0=1.0)
        grid = TimeGrid(1.0, 100)
        ensemble = simulate(interbank_model(params), params.generator, ZERO, grid, 4000, 3)
        final = ensemble.states[:, -1]
        # The mean moves only with the averaged Brownian motion, so its sd is
        # sigma sqrt(T / N) rather than the sample SE of X(T); 4 sd keeps the
        # fixed-seed check well clear of a one-in-370 tail.
        assert abs(final.mean() - 1.0) <= 4 * 0.3 / math.sqrt(final.size)
        expected = 0.09 * (1 - math.exp(-2.0)) / 2
        var_stderr = final.var() * math.sqrt(2.0 / final.size)
        assert abs(final.var() - expected) <= 0.05 * 0.09 + 3 * var_stderr


class TestControls:
    """Admissibility and the singular increment record"""

    def test_open_loop_outside_control_set(self, interbank, interbank_params, grid):
        table = np.zeros(grid.steps)
        table[3] = 7.0
        with pytest.raises(ControlError):
            simulate(interbank, interbank_params.generator, ControlPair(OpenLoop(table)), grid, 5, 0)

    def test_open_loop_wrong_length(self, interbank, interbank_params, grid):
        with pytest.raises(ShapeMismatchError):
            simulate(interbank, interbank_params.generator, ControlPair(OpenLoop(np.zeros(3))), grid, 5, 0)

    def test_feedback_is_projected(self, interbank, interbank_params, grid, caplog):
        ensemble = simulate(interbank, interbank_params.generator, ControlPair(constant_feedback(10.0)), grid, 5, 0)
        assert_array_equal(ensemble.controls, 5.0)
        assert "projected onto A1" in caplog.text

    def test_adjoint_feedback_needs_adjoint(self, interbank, interbank_params, grid):
        with pytest.raises(PreconditionError):
            simulate(interbank, interbank_params.generator, ControlPair(hamiltonian_feedback(interbank)), grid, 5, 0)

    def test_hamiltonian_feedback_rejects_control_in_noise(self):
        params = LinearQuadraticParams(generator=GeneratorMatrix.single(), B=1.0, Dsig=1.0, s0=0.2)
        with pytest.raises(ControlError, match="sigma and gamma free of u"):
            hamiltonian_feedback(linear_quadratic_model(params))

    def test_hamiltonian_feedback_accepts_control_free_noise(self):
        params = LinearQuadraticParams(generator=GeneratorMatrix.single(), B=1.0, s0=0.2)
        feedback = hamiltonian_feedback(linear_quadratic_model(params))
        assert feedback.needs_adjoint

    def test_generator_mismatch(self, interbank, two_state, grid):
        with pytest.raises(ShapeMismatchError):
            simulate(interbank, two_state, ZERO, grid, 5, 0)

    def test_noise_mismatch(self, interbank, interbank_params, grid):
        noise = draw_noise(interbank_params.generator, grid, 6, 0)
        with pytest.raises(ShapeMismatchError):
            simulate(interbank, interbank_params.generator, ZERO, grid, 5, 0, noise=noise)

    def test_singular_increments(self):
        grid = TimeGrid(1.0, 4)
        singular = SingularControl(
            atoms=(Atom(0.3, 0.5), Atom(1.0, 0.25)), density=PiecewiseConstant(np.array([[2.0]]))
        )
        dxi = singular.increments(grid, 3)
        assert_allclose(dxi[0], [0.0, 0.5, 1.0, 0.5, 0.75])
        assert_array_equal(dxi[:, 0], 0.0)

    def test_per_particle_atom(self):
        grid = TimeGrid(1.0, 4)
        dxi = SingularControl(atoms=(Atom(0.5, np.array([0.0, 1.0])),)).increments(grid, 2)
        assert_allclose(dxi[:, 2], [0.0, 1.0])
        with pytest.raises(ShapeMismatchError):
            SingularControl(atoms=(Atom(0.5, np.array([0.0, 1.0])),)).increments(grid, 3)

    @pytest.mark.parametrize(
        "atoms",
        [
            (Atom(0.3, -1.0),),
            (Atom(0.6, 1.0), Atom(0.3, 1.0)),
            (Atom(0.3, float("nan")),),
        ],
    )
    def test_invalid_atoms(self, atoms):
        with pytest.raises(ControlError):
            SingularControl(atoms=atoms)

    @pytest.mark.parametrize("time", [0.0, 1.5])
    def test_atom_outside_horizon(self, time):
        with pytest.raises(ControlError):
            SingularControl(atoms=(Atom(time, 1.0),)).increments(TimeGrid(1.0, 4), 2)

    def test_atom_moves_state(self):
        """With a = 0 an atom of size s lowers the reserves by c s from its grid point on"""
        params = InterbankParams.single_regime(a=0.0, b=1.0, c=1.0, sigma=0.3, rho=0.0, epsilon=1.0, beta=0.5)
        model = interbank_model(params)
        grid = TimeGrid(1.0, 4)
        noise = draw_noise(params.generator, grid, 20, 9)
        plain = simulate(model, params.generator, ZERO, grid, 20, 9, noise=noise)
        atom = ControlPair(constant_feedback(0.0), SingularControl(atoms=(Atom(0.3, 0.4),)))
        moved = simulate(model, params.generator, atom, grid, 20, 9, noise=noise)
        assert_allclose(moved.states - plain.states, np.outer(np.ones(20), [0, 0, -0.4, -0.4, -0.4]), atol=1e-12)

    def test_non_finite_state(self, interbank, interbank_params, grid):
        with pytest.raises(SimulationError) as info:
            simulate(interbank, interbank_params.generator, ControlPair(constant_feedback(float("nan"))), grid, 4, 0)
        assert info.value.step == 1

    def test_shifted_feedback(self):
        shifted = shifted_feedback(constant_feedback(1.0), 0.5)
        assert_allclose(shifted(0.0, np.zeros(3), 0.0, np.ones(3, dtype=int)), 1.5)

    def test_perturbed_feedback(self, grid):
        offsets = np.linspace(0.0, 1.0, grid.steps)
        perturbed = PerturbedFeedback.around(constant_feedback(0.0), offsets, grid, "bumped")
        assert_allclose(perturbed(grid.time(3), np.zeros(2), 0.0, np.ones(2, dtype=int)), offsets[3])
        with pytest.raises(ShapeMismatchError):
            PerturbedFeedback.around(constant_feedback(0.0), offsets[:-1], grid, "bumped")


class TestCost:
    """Monte Carlo reward"""

    def test_matches_minimization_form(self, interbank, interbank_params, grid):
        """The maximized reward is minus the inter-bank cost"""
        control = ControlPair(constant_feedback(0.2), SingularControl(atoms=(Atom(0.5, 0.3),)))
        ensemble = simulate(interbank, interbank_params.generator, control, grid, 30, 2)
        costs = interbank_cost(
            interbank_params, ensemble.states, ensemble.mean_field, ensemble.controls, ensemble.singular, grid
        )
        assert_allclose(-particle_costs(interbank, ensemble), costs, rtol=1e-10, atol=1e-12)

    def test_estimate_and_stderr(self, interbank, interbank_params, grid):
        ensemble = simulate(interbank, interbank_params.generator, ZERO, grid, 200, 2)
        value, stderr = estimate_cost(interbank, ensemble)
        samples = particle_costs(interbank, ensemble)
        assert value == pytest.approx(samples.mean())
        assert stderr == pytest.approx(samples.std(ddof=1) / math.sqrt(200))
        assert value < 0.0

    def test_control_record_is_checked(self, interbank, interbank_params, grid):
        control = ControlPair(constant_feedback(0.2), SingularControl(atoms=(Atom(0.5, 0.3),)))
        ensemble = simulate(interbank, interbank_params.generator, control, grid, 30, 2)
        assert estimate_cost(interbank, ensemble, control) == estimate_cost(interbank, ensemble)
        other = ControlPair(constant_feedback(0.2), SingularControl(atoms=(Atom(0.5, 0.1),)))
        with pytest.raises(ShapeMismatchError, match="did not produce"):
            estimate_cost(interbank, ensemble, other)

    def test_single_sample(self):
        assert mean_and_stderr(np.array([2.5])) == (2.5, 0.0)

    def test_riccati_beats_zero(self, interbank, interbank_params, grid):
        """Closed-form feedback is no worse than u = 0 under common noise"""
        noise = draw_noise(interbank_params.generator, grid, 1000, 4)
        riccati = ControlPair(riccati_oracle(interbank_params, grid).feedback)
        j_riccati, se_riccati = estimate_cost(
            interbank, simulate(interbank, interbank_params.generator, riccati, grid, 1000, 4, noise=noise)
        )
        j_zero, _ = estimate_cost(
            interbank, simulate(interbank, interbank_params.generator, ZERO, grid, 1000, 4, noise=noise)
        )
        assert j_riccati >= j_zero - 2 * se_riccati


class TestDrivingNoise:
    def test_single_regime_has_no_jumps(self, grid):
        noise = draw_noise(GeneratorMatrix.single(), grid, 8, 0)
        assert_array_equal(noise.jump_martingale, 0.0)
        assert_array_equal(noise.regimes, 1)

    def test_brownian_scale(self):
        grid = TimeGrid(1.0, 4)
        noise = draw_noise(GeneratorMatrix.single(), grid, 5000, 1)
        assert noise.brownian.std() == pytest.approx(math.sqrt(grid.h), rel=0.03)

    def test_needs_particles(self, grid):
        with pytest.raises(PreconditionError):
            draw_noise(GeneratorMatrix.single(), grid, 0, 0)
