# commands/estimate.py
"""
Monte Carlo estimator commands. Every row carries the estimate, its
standard error, the sample count, the master seed and the meta fields.
"""

import logging

import click
import numpy as np
from flask import Blueprint

from commands import Table, experiment_options, run_experiment, state_pair
from errors import NotHurwitzError
from services import estimate_service, model_service

logger = logging.getLogger(__name__)

estimate_bp = Blueprint("estimate", __name__, cli_group=None)

HEADER = ("name", "value", "stderr", "n", "seed", "meta")


def _rows(reports):
    return [[r.name, r.value, r.stderr, r.n, r.seed, r.meta] for r in reports]


def stationary_table(config, spec) -> Table:
    p = config.params
    reports = estimate_service.ergodic_moments(spec, float(p["dt"]), float(p["T"]), float(p["burn_in"]), config.seed)
    rows = _rows(reports)
    if model_service.is_linear(spec):
        try:
            S = estimate_service.stationary_covariance_linear(spec)
            mean = estimate_service.stationary_mean_linear(spec)
        except NotHurwitzError as e:
            logger.warning(f"No exact stationary law: {e}")
        else:
            meta = {"source": "lyapunov"}
            rows.extend([f"lyapunov_mean_{i}", float(mean[i]), 0.0, 0, config.seed, meta] for i in range(spec.dim))
            rows.extend([f"lyapunov_cov_{i}_{j}", float(S[i, j]), 0.0, 0, config.seed, meta]
                        for i in range(spec.dim) for j in range(spec.dim))
    return Table(HEADER, rows)


def decay_table(config, spec) -> Table:
    p = config.params
    report = estimate_service.decay_fit(
        spec, p["f"], p["t_grid"], int(p["outer_n"]), int(p["inner_n"]), float(p["dt"]), config.seed,
        mode=p["mode"], burn_in=float(p["burn_in"]), thin=int(p["thin"]), sampler=p["sampler"],
        bins=int(p["bins"]), f_params=p["f_params"], threads=config.threads,
    )
    return Table(HEADER, _rows([report]))


def exp_moment_table(config, spec) -> Table:
    p = config.params
    reports, summary = estimate_service.exp_moment_curve(
        spec, float(p["eps"]), float(p["dt"]), float(p["T"]), int(p["paths"]), config.seed, config.threads,
    )
    rows = _rows(reports)
    rows.append(["largest_safe_eps", summary["largest_safe_eps"], 0.0, int(p["paths"]), config.seed, summary])
    return Table(HEADER, rows)


def harnack_table(config, spec) -> Table:
    p = config.params
    xi = state_pair(p["xi"], spec, np.zeros(spec.dim), "xi")
    direction = p["direction"] if p["direction"] is not None else np.eye(spec.dim)[0].tolist()
    reports, summary = estimate_service.harnack_constant_fit(
        spec, p["f"], xi, direction, p["gaps"], float(p["t0"]), int(p["paths"]), float(p["dt"]),
        config.seed, p["f_params"], config.threads,
    )
    rows = _rows(reports)
    rows.append(["c0_ratio", summary["ratio"], 0.0, int(p["paths"]), config.seed, summary])
    failures = [] if summary["chains_hold"] else ["cauchy_schwarz_chain"]
    return Table(HEADER, rows, failures)


@estimate_bp.cli.command("estimate-stationary")
@experiment_options
def estimate_stationary(config_path, seed, out, threads):
    """Ergodic mean and covariance, with the exact Lyapunov values for linear systems."""
    run_experiment("estimate-stationary", stationary_table, config_path, {}, seed, out, threads)


@estimate_bp.cli.command("estimate-decay")
@experiment_options
@click.option("--mode", type=click.Choice(["variance", "entropy"]), default=None)
def estimate_decay(config_path, seed, out, threads, mode):
    """Fitted exponential decay rate of the variance or entropy of P_t f."""
    run_experiment("estimate-decay", decay_table, config_path, {"mode": mode}, seed, out, threads)


@estimate_bp.cli.command("exp-moment")
@experiment_options
@click.option("--eps", type=float, default=None)
def exp_moment(config_path, seed, out, threads, eps):
    """E exp(eps |u_t|^2) along the horizon, with the largest safe eps."""
    run_experiment("exp-moment", exp_moment_table, config_path, {"eps": eps}, seed, out, threads)


@estimate_bp.cli.command("harnack-audit")
@experiment_options
def harnack_audit(config_path, seed, out, threads):
    """Harnack constant per gap and the sample Cauchy-Schwarz chain."""
    run_experiment("harnack-audit", harnack_table, config_path, {}, seed, out, threads)
