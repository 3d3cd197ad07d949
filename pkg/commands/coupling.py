# commands/coupling.py
import logging

import click
import numpy as np
from flask import Blueprint

from commands import Table, experiment_options, run_experiment, state_pair
from services import coupling_service
from services.coupling_service import weight_diagnostics

logger = logging.getLogger(__name__)

coupling_bp = Blueprint("coupling", __name__, cli_group=None)


def coupling_table(config, spec) -> Table:
    p = config.params
    # default: a unit gap in the first X coordinate
    xi = state_pair(p["xi"], spec, np.zeros(spec.dim), "xi")
    eta = state_pair(p["eta"], spec, np.eye(spec.dim)[0], "eta")
    batch = coupling_service.coupling_batch(spec, xi, eta, float(p["t0"]), float(p["dt"]), int(p["paths"]),
                                            config.seed, config.threads)
    diag = weight_diagnostics(batch["log_weight"])
    logger.info(f"coupling-demo: max terminal gap {batch['terminal_gap'].max():.3g}, "
                f"ESS fraction {diag['ess_fraction']:.3g}")
    rows = [[i, float(g), float(w)] for i, (g, w) in enumerate(zip(batch["terminal_gap"], batch["log_weight"]))]
    return Table(("path_index", "terminal_gap", "log_weight"), rows)


@coupling_bp.cli.command("coupling-demo")
@experiment_options
@click.option("--t0", type=float, default=None, help="Meeting time.")
@click.option("--dt", type=float, default=None)
@click.option("--paths", type=int, default=None)
def coupling_demo(config_path, seed, out, threads, t0, dt, paths):
    """Control coupling from xi and eta that meets exactly at t0."""
    run_experiment("coupling-demo", coupling_table, config_path, {"t0": t0, "dt": dt, "paths": paths},
                   seed, out, threads)
