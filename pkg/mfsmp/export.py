"""
CSV and JSON writers for run outputs.

Floats are written with 17 significant digits so files round-trip exactly
and identical runs produce byte-identical files. Nothing here records wall
clock times except ``write_timings``.
"""

import csv
import json
import logging
import math
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .adjoint import AdjointSample, DefectReport, RiccatiSolution, SecondOrderField
from .config import ExperimentConfig, canonical_json, config_digest
from .diagnostics import get_version_info, health_check
from .forward_sim import ParticleEnsemble
from .oracle import BruteForceResult
from .performance_monitor import export_performance_data
from .regime_chain import jumps_to_rows

logger = logging.getLogger(__name__)


def fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    return value


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    logger.debug(f"Wrote {path}")


def write_json(path: str, payload: Any):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(jsonable(payload), indent=2, sort_keys=True))
        f.write("\n")
    logger.debug(f"Wrote {path}")


def ensure_directory(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


def write_summary(directory: str, ensemble: ParticleEnsemble, dim: int):
    """summary.csv: one row per grid point."""
    summary = ensemble.summary()
    occupancy = [(ensemble.regimes == i).mean(axis=0) for i in range(1, dim + 1)]
    singular_mass = ensemble.singular.mean(axis=0)
    mean_u = np.append(ensemble.controls.mean(axis=0), np.nan)
    header = ["k", "t", "mu", "mean_x", "var_x", "mean_u", "mean_dxi"] + [f"regime_{i}" for i in range(1, dim + 1)]
    rows = (
        [k, *summary[k], mean_u[k] if k < ensemble.steps else "", singular_mass[k], *(o[k] for o in occupancy)]
        for k in range(ensemble.steps + 1)
    )
    write_csv(os.path.join(directory, "summary.csv"), header, rows)


def write_paths(directory: str, ensemble: ParticleEnsemble):
    """paths.csv: one row per particle and grid point; jumps.csv: exact jump times."""
    times = ensemble.grid.times

    def rows():
        for n in range(ensemble.particles):
            for k in range(ensemble.steps + 1):
                u = ensemble.controls[n, k] if k < ensemble.steps else ""
                yield [n, k, times[k], ensemble.states[n, k], ensemble.regimes[n, k], u, ensemble.singular[n, k]]

    write_csv(os.path.join(directory, "paths.csv"), ["particle", "k", "t", "x", "regime", "u", "dxi"], rows())
    jumps = (row for n, path in enumerate(ensemble.paths) for row in jumps_to_rows(path, particle=n))
    write_csv(os.path.join(directory, "jumps.csv"), ["particle", "time", "from", "to"], jumps)


def write_ensemble(directory: str, ensemble: ParticleEnsemble, dim: int, paths: bool = True):
    write_summary(directory, ensemble, dim)
    if paths:
        write_paths(directory, ensemble)


# ---------------------------------------------------------------------------
# Adjoint outputs
# ---------------------------------------------------------------------------


def write_adjoint(directory: str, adjoint: AdjointSample, ensemble: ParticleEnsemble):
    """adjoint.csv: p per grid point, q and s per step (blank at the terminal point)."""
    dim = adjoint.s.shape[2]
    times = ensemble.grid.times
    m = ensemble.steps

    def rows():
        for n in range(ensemble.particles):
            for k in range(m + 1):
                if k < m:
                    tail = [adjoint.q[n, k], *adjoint.s[n, k, :]]
                else:
                    tail = [""] * (dim + 1)
                yield [n, k, times[k], adjoint.p[n, k], *tail]

    header = ["particle", "k", "t", "p", "q"] + [f"s_{j}" for j in range(1, dim + 1)]
    write_csv(os.path.join(directory, "adjoint.csv"), header, rows())


def write_mean_adjoint(directory: str, adjoint: AdjointSample, ensemble: ParticleEnsemble):
    """adjoint_mean.csv: mean of p and its standard error per grid point."""
    p = adjoint.p
    stderr = p.std(axis=0, ddof=1) / np.sqrt(p.shape[0]) if p.shape[0] > 1 else np.zeros(p.shape[1])
    rows = ([k, t, p[:, k].mean(), stderr[k]] for k, t in enumerate(ensemble.grid.times))
    write_csv(os.path.join(directory, "adjoint_mean.csv"), ["k", "t", "mean_p", "se_p"], rows)


def write_eta(directory: str, riccati: RiccatiSolution):
    rows = ([k, t, eta] for k, (t, eta) in enumerate(zip(riccati.times, riccati.eta)))
    write_csv(os.path.join(directory, "eta.csv"), ["k", "t", "eta"], rows)


def write_second_order(directory: str, second: SecondOrderField, times: np.ndarray):
    dim = second.P.shape[0]
    rows = ([k, t, *second.P[:, k]] for k, t in enumerate(times))
    write_csv(os.path.join(directory, "second_order.csv"), ["k", "t"] + [f"P_{i}" for i in range(1, dim + 1)], rows)


def write_residuals(directory: str, defect: DefectReport, diagnostics: Optional[Dict[str, Any]] = None):
    payload = defect.to_dict()
    payload["solver_diagnostics"] = diagnostics or {}
    write_json(os.path.join(directory, "residuals.json"), payload)


# ---------------------------------------------------------------------------
# Oracle and checks
# ---------------------------------------------------------------------------


def write_brute_force(directory: str, result: BruteForceResult):
    """bruteforce.csv: control-id, u-sequence, atoms, J, SE."""
    rows = (
        [row["index"], ";".join(fmt(u) for u in row["regular"]), ";".join(fmt(a) for a in row["atoms"]), row["J"], row["SE"]]
        for row in result.rows
    )
    write_csv(os.path.join(directory, "bruteforce.csv"), ["control_id", "u_sequence", "atoms", "J", "SE"], rows)


def write_cost_table(directory: str, rows: List[Dict[str, Any]]):
    write_csv(
        os.path.join(directory, "costs.csv"),
        ["control", "J", "SE", "margin", "flagged"],
        ([row["name"], row["J"], row["SE"], row["margin"], row["flagged"]] for row in rows),
    )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def write_manifest(directory: str, command: str, config: ExperimentConfig, files: Sequence[str]):
    """
    manifest.json plus config.json: everything needed to rerun bit-exactly.
    """
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as f:
        f.write(json.dumps(json.loads(canonical_json(config)), indent=2, sort_keys=True))
        f.write("\n")
    versions = get_version_info()
    health = health_check()
    for name, component in health["components"].items():
        if component.get("status") != "ok":
            logger.warning(f"environment check failed for {name}: {component.get('error', component)}")
    write_json(
        os.path.join(directory, "manifest.json"),
        {
            "command": command,
            "config_sha256": config_digest(config),
            "seed": config.seed,
            "version": versions["mfsmp_version"],
            "versions": versions,
            "healthy": health["overall_healthy"],
            "files": sorted(set(files) | {"config.json"}),
        },
    )


def write_timings(directory: str):
    """timings.json: per-component statistics, the slowest stages and every recorded timing."""
    with open(os.path.join(directory, "timings.json"), "w", encoding="utf-8") as f:
        f.write(export_performance_data(format="json", include_raw_metrics=True))
        f.write("\n")
