# commands/__init__.py
"""
Shared plumbing for the CLI blueprints: common options, the run wrapper
that writes CSV + manifest and maps errors to exit statuses.
"""

import functools
import logging
import time
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence

import click
import numpy as np

from artifacts import emit_error, write_csv, write_manifest
from errors import AuditFailure, ConfigError, LabError
from models import ExperimentConfig, StatePair, SystemSpec
from services import model_service
from utils.config_loader import load_config, resolve_system, to_dict

logger = logging.getLogger(__name__)


class Table(NamedTuple):
    header: Sequence[str]
    rows: List[Sequence[Any]]
    failures: List[str] = []


def experiment_options(fn: Callable) -> Callable:
    """--config, --seed, --out and --threads, shared by every experiment command."""
    @click.option("--config", "config_path", type=click.Path(), default=None, help="Experiment JSON file or run manifest.")
    @click.option("--seed", type=int, default=None, help="Master seed (unsigned 64-bit).")
    @click.option("--out", type=click.Path(), default=None, help="Output CSV path.")
    @click.option("--threads", type=int, default=None, help="Worker threads (results do not depend on it).")
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)
    return wrapper


def run_experiment(command: str, body: Callable[[ExperimentConfig, Optional[SystemSpec]], Table],
                   config_path: Optional[str], overrides: Dict[str, Any], seed: Optional[int],
                   out: Optional[str], threads: Optional[int]) -> None:
    """
    Load and validate the config, run `body`, write the CSV and manifest.
    Exit statuses: 0 ok, 2 config error, 3 numerical failure, 4 failed audit.
    """
    started = time.perf_counter()
    try:
        config = load_config(command, config_path, overrides, seed, out, threads)
        spec = resolve_system(model_service, config.system)
        logger.info(f"Running {command} (seed={config.seed}, threads={config.threads})")
        table = body(config, spec)
        write_csv(config.out, table.header, table.rows)
        write_manifest(config.out, to_dict(config, model_service, spec), time.perf_counter() - started, config.seed)
        if table.failures:
            raise AuditFailure(f"{command}: failed audits {table.failures}")
    except LabError as e:
        logger.error(f"{command} failed: {e}")
        click.get_current_context().exit(emit_error(command, e))


def state_param(value: Any, size: int, default: np.ndarray, label: str) -> np.ndarray:
    if value is None:
        return default
    arr = np.asarray(value, dtype=float)
    if arr.shape != (size,):
        raise ConfigError(f"{label} must have {size} entries, got shape {arr.shape}")
    return arr


def state_pair(value: Any, spec: SystemSpec, default: np.ndarray, label: str) -> StatePair:
    return StatePair.from_vector(state_param(value, spec.dim, default, label), spec.m)
