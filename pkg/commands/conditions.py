# commands/conditions.py
import logging

import click
import numpy as np
from flask import Blueprint

from commands import Table, experiment_options, run_experiment
from errors import ConfigError
from models import GalerkinDrift, StatePair
from services import condition_service, coupling_service

logger = logging.getLogger(__name__)

conditions_bp = Blueprint("conditions", __name__, cli_group=None)

HEADER = ("condition_id", "holds", "witness_name", "witness_value")


def _named_conditions(named):
    """`named` is a list of {"id": ..., "params": {...}} entries."""
    if not isinstance(named, list):
        raise ConfigError("named must be a list of {id, params} entries")
    for entry in named:
        if not isinstance(entry, dict) or "id" not in entry:
            raise ConfigError(f"bad named condition entry: {entry}")
        yield entry["id"], dict(entry.get("params") or {})


def check_conditions_table(config, spec) -> Table:
    p = config.params
    reports = condition_service.audit_spec(spec, config.seed, int(p["n_pairs"]), float(p["radius"]))
    for condition_id, params in _named_conditions(p["named"]):
        reports.append(condition_service.check_named_condition(condition_id, params))
    if int(p["sync_pairs"]) > 0:
        reports.append(coupling_service.sync_contraction_audit(
            spec, int(p["sync_pairs"]), float(p["sync_T"]), float(p["sync_dt"]), config.seed,
            p["sync_r"], config.threads,
        ))
    if isinstance(spec.drift, GalerkinDrift):
        t_grid = np.linspace(0.0, float(p["galerkin_t_max"]), int(p["galerkin_points"]))
        delta0 = StatePair(np.ones(spec.m), np.ones(spec.d))
        reports.append(coupling_service.galerkin_contraction(spec, delta0, t_grid))

    rows = [row for report in reports for row in report.rows()]
    logger.info(f"check-conditions: {condition_service.summarize(reports)}")
    # Condition verdicts are results; only the simulation audits fail the run.
    failures = [r.condition_id for r in reports
                if r.condition_id in ("sync_contraction", "galerkin_contraction") and not r.holds]
    return Table(HEADER, rows, failures)


@conditions_bp.cli.command("check-conditions")
@experiment_options
@click.option("--n-pairs", type=int, default=None, help="State pairs for sampled (A3).")
def check_conditions(config_path, seed, out, threads, n_pairs):
    """Audit every condition that applies to the configured system."""
    run_experiment("check-conditions", check_conditions_table, config_path,
                   {"n_pairs": n_pairs}, seed, out, threads)
