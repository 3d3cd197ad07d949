# commands/simulate.py
import click
import numpy as np
from flask import Blueprint

from commands import Table, experiment_options, run_experiment, state_pair
from services import coupling_service

simulate_bp = Blueprint("simulate", __name__, cli_group=None)


def simulate_table(config, spec) -> Table:
    p = config.params
    start = state_pair(p["start"], spec, np.zeros(spec.dim), "start")
    path = coupling_service.integrate_path(spec, start, float(p["dt"]), float(p["T"]), config.seed, int(p["index"]))
    header = ["t"] + [f"x{i}" for i in range(spec.m)] + [f"y{j}" for j in range(spec.d)]
    rows = [[float(t)] + [float(v) for v in u] for t, u in zip(path.grid, path.states)]
    return Table(header, rows)


@simulate_bp.cli.command("simulate")
@experiment_options
@click.option("--dt", type=float, default=None)
@click.option("--T", "T", type=float, default=None, help="Horizon.")
def simulate(config_path, seed, out, threads, dt, T):
    """One Euler-Maruyama path from the configured start (origin by default)."""
    run_experiment("simulate", simulate_table, config_path, {"dt": dt, "T": T}, seed, out, threads)
