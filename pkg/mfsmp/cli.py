"""
Command-line entry point.

    mfsmp simulate       --config run.json [--out DIR] [--threads K]
    mfsmp adjoint        --config run.json ...
    mfsmp check          --config run.json ...
    mfsmp oracle         --config run.json ...
    mfsmp validate-model --config run.json ...

Everything except the output directory, thread count and log level comes
from the JSON config. Exit codes: 0 pass, 1 check failure, 2 configuration
error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import AdjointSample, solve_second_order
from .config import (
    AdjointSolver,
    ExperimentConfig,
    build_control,
    build_generator,
    build_grid,
    build_model,
    build_solver,
    load_config,
    solver_name,
    tolerance_value,
)
from .errors import ConfigurationError, MfsmpError, ModelValidationError, error_payload
from .export import (
    ensure_directory,
    write_adjoint,
    write_brute_force,
    write_cost_table,
    write_ensemble,
    write_eta,
    write_json,
    write_manifest,
    write_mean_adjoint,
    write_residuals,
    write_second_order,
    write_timings,
)
from .forward_sim import ControlPair, ParticleEnsemble, draw_noise, estimate_cost, simulate, simulate_coupled
from .grid import TimeGrid
from .model import ModelSpec, validate_model
from .mp_check import (
    CheckReport,
    check_singular_conditions,
    check_sufficient,
    check_variational_inequality,
    compare_costs,
    random_perturbations,
)
from .oracle import CoarseInstance, brute_force_open_loop, bsde_residual, riccati_oracle, verdict
from .performance_monitor import reset_performance_data
from .regime_chain import GeneratorMatrix
from .settings import SETTING_SPECS, override_settings

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass
class Experiment:
    """A config resolved into the objects every command needs."""

    config: ExperimentConfig
    generator: GeneratorMatrix
    grid: TimeGrid
    model: ModelSpec
    params: Any
    control: ControlPair
    solver: AdjointSolver
    out: str

    @classmethod
    def from_config(cls, config: ExperimentConfig, out: Optional[str] = None) -> "Experiment":
        generator = build_generator(config)
        grid = build_grid(config)
        model, params = build_model(config, generator)
        return cls(
            config=config,
            generator=generator,
            grid=grid,
            model=model,
            params=params,
            control=build_control(config, model, params, grid),
            solver=build_solver(config, model, generator, params),
            out=ensure_directory(out or config.output.directory),
        )

    def simulate(self) -> Tuple[ParticleEnsemble, Optional[AdjointSample]]:
        """Forward run; feedback reading p is coupled with the configured solver."""
        c = self.config
        if self.control.needs_adjoint:
            return simulate_coupled(
                self.model, self.generator, self.control, self.grid, c.N, c.seed, self.solver,
                sweeps=c.adjoint.sweeps, initial_regime=c.initial_regime,
            )
        ensemble = simulate(
            self.model, self.generator, self.control, self.grid, c.N, c.seed, initial_regime=c.initial_regime
        )
        return ensemble, None

    def simulate_with_adjoint(self) -> Tuple[ParticleEnsemble, AdjointSample]:
        ensemble, adjoint = self.simulate()
        if adjoint is None:
            adjoint = self.solver(ensemble)
        return ensemble, adjoint

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def finish(self, command: str, files: List[str]):
        if self.config.output.record_timings:
            write_timings(self.out)
            files = files + ["timings.json"]
        write_manifest(self.out, command, self.config, files + ["manifest.json"])
        logger.info(f"Wrote {len(files)} files to {self.out}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def run_simulate(experiment: Experiment) -> int:
    ensemble, _ = experiment.simulate()
    write_ensemble(experiment.out, ensemble, experiment.generator.dim, paths=experiment.config.output.write_paths)
    value, stderr = estimate_cost(experiment.model, ensemble, experiment.control)
    write_json(experiment.path("cost.json"), {"J": value, "SE": stderr, "control": experiment.control.name})
    files = ["summary.csv", "cost.json"]
    if experiment.config.output.write_paths:
        files += ["paths.csv", "jumps.csv"]
    experiment.finish("simulate", files)
    print(f"J = {value:.10g} (SE {stderr:.3g})")
    return 0


def run_adjoint(experiment: Experiment) -> int:
    ensemble, adjoint = experiment.simulate_with_adjoint()
    files = ["summary.csv", "adjoint.csv", "adjoint_mean.csv", "residuals.json"]
    write_ensemble(experiment.out, ensemble, experiment.generator.dim, paths=False)
    write_adjoint(experiment.out, adjoint, ensemble)
    write_mean_adjoint(experiment.out, adjoint, ensemble)
    defect = bsde_residual(experiment.model, experiment.generator, ensemble, adjoint)
    write_residuals(experiment.out, defect, adjoint.diagnostics)

    if solver_name(experiment.config, experiment.params) == "explicit":
        write_eta(experiment.out, riccati_oracle(experiment.params, experiment.grid).solution)
        files.append("eta.csv")
    if experiment.config.adjoint.second_order:
        second = solve_second_order(experiment.model, experiment.generator, ensemble, adjoint)
        write_second_order(experiment.out, second, experiment.grid.times)
        files.append("second_order.csv")

    experiment.finish("adjoint", files)
    print(f"adjoint solver {adjoint.solver}: BSDE residual {defect.aggregate:.3e}")
    return 0


def _control_grid(experiment: Experiment) -> Optional[np.ndarray]:
    points = experiment.config.checks.control_points
    control_set = experiment.model.control_set
    if points is None or not control_set.is_interval:
        return None
    return np.linspace(control_set.low, control_set.high, points)


def run_check(experiment: Experiment) -> int:
    checks = experiment.config.checks
    model, gen = experiment.model, experiment.generator
    ensemble, adjoint = experiment.simulate_with_adjoint()
    control_grid = _control_grid(experiment)
    singular_tol = tolerance_value(checks.singular_tolerance)
    reports: List[CheckReport] = []

    if checks.variational:
        second = solve_second_order(model, gen, ensemble, adjoint)
        reports.append(
            check_variational_inequality(
                model, gen, ensemble, experiment.control, adjoint, second, control_grid,
                tol=tolerance_value(checks.vi_tolerance), cap=checks.cap,
            )
        )
    if checks.singular:
        reports.append(
            check_singular_conditions(
                model, ensemble, adjoint, experiment.control.singular,
                tol=1e-9 if singular_tol is None else singular_tol, cap=checks.cap,
            )
        )
    if checks.sufficient:
        reports.append(
            check_sufficient(
                model, gen, ensemble, experiment.control, adjoint, control_grid,
                tol=tolerance_value(checks.sufficient_tolerance), cap=checks.cap,
            )
        )
    files = ["checks.json"]
    if checks.compare_costs:
        perturbations = random_perturbations(
            experiment.control, experiment.grid, checks.perturbations, checks.amplitude,
            experiment.config.seed + 1, model.control_set,
        )
        comparison = compare_costs(
            model, gen, experiment.grid, experiment.config.N, experiment.config.seed, experiment.control,
            perturbations, solver=experiment.solver, initial_regime=experiment.config.initial_regime,
        )
        write_cost_table(experiment.out, comparison.rows)
        files.append("costs.csv")
        reports.append(comparison.to_report())

    overall = CheckReport.composite("all_checks", reports, candidate=experiment.control.name)
    write_json(experiment.path("checks.json"), overall.to_dict())
    experiment.finish("check", files)
    print(overall.render())
    return 0 if overall.passed else 1


def run_oracle(experiment: Experiment) -> int:
    c = experiment.config
    if c.oracle is None:
        raise ConfigurationError("the oracle command needs an 'oracle' block")
    particles = c.oracle.particles or c.N
    instance = CoarseInstance(
        model=experiment.model,
        generator=experiment.generator,
        grid=experiment.grid,
        control_values=tuple(c.oracle.control_values),
        atom_times=tuple(c.oracle.atom_times),
        atom_sizes=tuple(c.oracle.atom_sizes),
        particles=particles,
        seed=c.seed,
        initial_regime=c.initial_regime,
    )
    result = brute_force_open_loop(instance)
    write_brute_force(experiment.out, result)

    noise = draw_noise(experiment.generator, experiment.grid, particles, c.seed, c.initial_regime)
    if experiment.control.needs_adjoint:
        ensemble, _ = simulate_coupled(
            experiment.model, experiment.generator, experiment.control, experiment.grid, particles, c.seed,
            experiment.solver, sweeps=c.adjoint.sweeps, noise=noise,
        )
    else:
        ensemble = simulate(
            experiment.model, experiment.generator, experiment.control, experiment.grid, particles, c.seed,
            noise=noise,
        )
    outcome = verdict(estimate_cost(experiment.model, ensemble, experiment.control), result)
    write_json(
        experiment.path("oracle.json"),
        {"verdict": outcome.to_dict(), "best": result.best_row, "candidate": experiment.control.name},
    )
    experiment.finish("oracle", ["bruteforce.csv", "oracle.json"])
    print(outcome.line())
    return 0 if outcome.consistent else 1


def run_validate_model(experiment: Experiment) -> int:
    report = validate_model(experiment.model, seed=experiment.config.seed, strict=False)
    write_json(experiment.path("validation.json"), report.to_dict())
    experiment.finish("validate-model", ["validation.json"])
    if not report.passed:
        raise ModelValidationError(f"derivative checks failed: {', '.join(report.failures)}", report)
    print(f"{report.model}: {len(report.checks)} derivative checks passed")
    return 0


HELP = {
    "simulate": "simulate the particle system and write ensemble CSVs",
    "adjoint": "solve the first- and second-order adjoints",
    "check": "check the maximum-principle conditions for the configured control",
    "oracle": "brute-force the coarse instance and compare with the configured control",
    "validate-model": "compare analytic partials with finite differences",
}

COMMANDS: Dict[str, Callable[[Experiment], int]] = {
    "simulate": run_simulate,
    "adjoint": run_adjoint,
    "check": run_check,
    "oracle": run_oracle,
    "validate-model": run_validate_model,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfsmp",
        description="Simulate and verify the stochastic maximum principle for mean-field regime-switching control.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=HELP[name])
        sub.add_argument("--config", required=True, help="experiment JSON file")
        sub.add_argument("--out", default=None, help="output directory (default: output.directory of the config)")
        sub.add_argument("--threads", type=int, default=None, help="worker threads; outputs do not depend on it")
        sub.add_argument(
            "--log-level",
            default="WARNING",
            choices=["DEBUG", "INFO", "WARNING", "ERROR"],
            help="log level for messages on stderr",
        )
    return parser


def _settings_for(config: ExperimentConfig, threads: Optional[int]):
    values = dict(config.settings)
    if threads is not None:
        values["threads"] = threads
    for name, value in values.items():
        try:
            SETTING_SPECS[name].coerce(value)
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"invalid setting {name}: {e}") from None
    return override_settings(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)
    reset_performance_data()
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigurationError(f"--threads must be at least 1, got {args.threads}")
        config = load_config(args.config)
        with _settings_for(config, args.threads):
            experiment = Experiment.from_config(config, args.out)
            return COMMANDS[args.command](experiment)
    except MfsmpError as e:
        logger.error(f"{args.command} failed: {e}")
        print(json.dumps(error_payload(e)), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
