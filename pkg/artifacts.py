# artifacts.py
"""
Single source of truth for run outputs: CSV tables, the run manifest written
beside them and machine-readable error records.
"""

import csv
import json
import logging
import os
from typing import Any, Dict, Iterable, Sequence

import click

from errors import LabError
from utils.parallel import default_block_size
from utils.rng import describe_split

logger = logging.getLogger(__name__)

TOOLKIT_VERSION = "0.1.0"


def format_value(value: Any) -> str:
    """Deterministic text for a CSV cell; floats use the shortest round-trip repr."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item") and not isinstance(value, (list, dict, str)):
        return format_value(value.item())
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value, sort_keys=True, default=_plain)
    return str(value)


def _plain(value: Any) -> Any:
    """numpy scalars and arrays inside meta mappings."""
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return count


def manifest_path(out: str) -> str:
    return f"{out}.manifest.json"


def write_manifest(out: str, config: Dict[str, Any], wall_time: float, seed: int) -> str:
    """Resolved config, toolkit version, wall time and the seed split, beside `out`."""
    manifest = {
        "config": config,
        "toolkit_version": TOOLKIT_VERSION,
        "wall_time_s": wall_time,
        "block_size": default_block_size(),
        "rng": describe_split(seed),
    }
    path = manifest_path(out)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def error_record(command: str, error: Exception) -> Dict[str, Any]:
    status = "assertion_failure" if getattr(error, "exit_code", 1) == 4 else (
        "config_error" if getattr(error, "exit_code", 1) == 2 else "numerical_failure"
    )
    return {
        "status": status,
        "error_type": type(error).__name__,
        "message": str(error),
        "command": command,
    }


def emit_error(command: str, error: LabError) -> int:
    """Write the JSON error record to stderr and return the exit status."""
    click.echo(json.dumps(error_record(command, error), sort_keys=True), err=True)
    return error.exit_code
