# commands/operator_lab.py
import json
import logging

import click
from flask import Blueprint

from commands import Table, experiment_options, run_experiment
from errors import ConfigError, PreconditionError
from models import FiniteMarkovOperator
from services import operator_service

logger = logging.getLogger(__name__)

operator_lab_bp = Blueprint("operator_lab", __name__, cli_group=None)

HEADER = (
    "chain_index", "n", "norm_2_gap", "delta", "bound", "n_power", "gap_sq_le_bound",
    "entropy_audit_holds", "worst_entropy_margin", "worst_variance_margin", "norm_pq",
)
BOUND_SLACK = 1e-9


def load_operator(source) -> FiniteMarkovOperator:
    """An inline {"P": rows, "mu": vector} mapping or a path to a JSON file holding one."""
    if isinstance(source, str):
        try:
            with open(source, "r", encoding="utf-8") as fh:
                source = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read operator file: {e}") from e
    if not isinstance(source, dict) or set(source) != {"P", "mu"}:
        raise ConfigError("operator must be a mapping with exactly the keys P and mu")
    try:
        op = FiniteMarkovOperator(P=source["P"], mu=source["mu"])
    except (PreconditionError, ValueError, TypeError) as e:
        raise ConfigError(f"bad operator: {e}") from e
    report = operator_service.validate_operator(op)
    if not report.holds:
        raise ConfigError(f"operator is not a Markov operator with invariant mu: {report.witnesses}")
    return op


def operator_row(index: int, op: FiniteMarkovOperator, p: dict, seed: int):
    report = operator_service.norm_report(op, int(p["n_max"]), seed)
    gap_ok = None if report.bound is None else report.norm_2_gap ** 2 <= report.bound + BOUND_SLACK
    try:
        audit = operator_service.entropy_contraction_audit(op, float(p["p"]), float(p["q"]),
                                                           int(p["audit_trials"]), seed)
    except PreconditionError as e:
        logger.info(f"chain {index}: entropy audit skipped ({e})")
        audit = None
    w = audit.witnesses if audit else {}
    return [
        index, op.n, report.norm_2_gap, report.delta, report.bound, report.n_power, gap_ok,
        audit.holds if audit else None, w.get("worst_entropy_margin"), w.get("worst_variance_margin"),
        w.get("norm_pq"),
    ]


def operator_table(config, spec) -> Table:
    p = config.params
    if p["operator"] is not None:
        operators = [load_operator(p["operator"])]
    else:
        operators = [operator_service.random_reversible_chain(int(p["n"]), config.seed, i)
                     for i in range(int(p["trials"]))]
    rows = [operator_row(i, op, p, config.seed) for i, op in enumerate(operators)]
    failures = []
    if any(row[6] is False for row in rows):
        failures.append("gap_bound")
    if any(row[7] is False for row in rows):
        failures.append("entropy_contraction")
    return Table(HEADER, rows, failures)


@operator_lab_bp.cli.command("operator-lab")
@experiment_options
@click.option("--n", "n_states", type=int, default=None, help="States per random chain.")
@click.option("--trials", type=int, default=None, help="Number of random reversible chains.")
def operator_lab(config_path, seed, out, threads, n_states, trials):
    """Exact norm, gap-bound and entropy-contraction checks on finite chains."""
    run_experiment("operator-lab", operator_table, config_path, {"n": n_states, "trials": trials},
                   seed, out, threads)
