# utils/config_loader.py
"""
Experiment files: JSON with the flat keys `command`, `system`, `params`,
`seed`, `out` and optionally `threads`. A run manifest is accepted as well;
its `config` entry is used as-is. Unknown keys fail before anything runs.
"""

import copy
import json
import logging
import math
from typing import Any, Dict, Optional, Tuple

from errors import ConfigError, LabError
from models import ExperimentConfig, SystemSpec
from utils.parallel import default_threads
from utils.rng import check_seed

logger = logging.getLogger(__name__)

CONFIG_KEYS = {"command", "system", "params", "seed", "out", "threads"}

# Defaults per command; anything not listed here is rejected.
COMMAND_PARAMS: Dict[str, Dict[str, Any]] = {
    "check-conditions": {
        "n_pairs": 2000, "radius": 5.0, "named": [],
        "sync_pairs": 0, "sync_T": 5.0, "sync_dt": 1e-3, "sync_r": None,
        "galerkin_t_max": 10.0, "galerkin_points": 201,
    },
    "simulate": {"dt": 0.01, "T": 10.0, "start": None, "index": 0},
    "coupling-demo": {"t0": 1.0, "dt": 1e-3, "paths": 1000, "xi": None, "eta": None},
    "estimate-stationary": {"dt": 1e-3, "T": 200.0, "burn_in": 20.0},
    "estimate-decay": {
        "f": "coord_x", "f_params": {}, "t_grid": [1.2 + 0.4 * j for j in range(10)],
        "outer_n": 400, "inner_n": 500, "dt": 0.01, "mode": "variance", "burn_in": 20.0,
        "thin": 1000, "sampler": "thinned", "bins": 64,
    },
    "exp-moment": {"eps": 0.1, "dt": 0.01, "T": 20.0, "paths": 2000},
    "harnack-audit": {
        "f": "bounded_tanh", "f_params": {}, "xi": None, "direction": None,
        "gaps": [0.25, 0.5, 1.0, 2.0], "t0": 1.0, "dt": 0.01, "paths": 20000,
    },
    "operator-lab": {"n": 4, "trials": 200, "operator": None, "n_max": 50, "audit_trials": 500, "p": 2.0, "q": 4.0},
    "list-presets": {},
}

NO_SYSTEM_COMMANDS = {"operator-lab", "list-presets"}

# Params whose default is None, with the types a value may take.
OPTIONAL_PARAM_TYPES: Dict[str, Tuple[type, ...]] = {
    "sync_r": (float,), "start": (list,), "xi": (list,), "eta": (list,), "direction": (list,),
    "operator": (dict, str),
}
NUMBER_LISTS = {"t_grid", "gaps", "start", "xi", "eta", "direction"}


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def coerce_param(command: str, key: str, value: Any) -> Any:
    """Check `value` against the type of the declared default and normalise numbers."""
    default = COMMAND_PARAMS[command][key]
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{command}: param {key} may not be null")
    kinds = OPTIONAL_PARAM_TYPES.get(key, (type(default),))
    if float in kinds and _is_number(value):
        if not math.isfinite(value):
            raise ConfigError(f"{command}: param {key} must be finite, got {value}")
        return float(value)
    if int in kinds and _is_number(value):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{command}: param {key} must be an integer, got {value}")
        return int(value)
    if key in NUMBER_LISTS and isinstance(value, list):
        if not all(_is_number(v) and math.isfinite(v) for v in value):
            raise ConfigError(f"{command}: param {key} must be a list of finite numbers, got {value}")
        return [float(v) for v in value]
    if isinstance(value, kinds) and not isinstance(value, bool):
        return value
    expected = " or ".join(k.__name__ for k in kinds)
    raise ConfigError(f"{command}: param {key} must be {expected}, got {type(value).__name__} {value!r}")


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    if "config" in data and "toolkit_version" in data:
        logger.info(f"Re-running from manifest {path}")
        data = data["config"]
    return data


def resolve_params(command: str, params: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    if command not in COMMAND_PARAMS:
        raise ConfigError(f"unknown command '{command}', expected one of {sorted(COMMAND_PARAMS)}")
    params = dict(params or {})
    unknown = set(params) - set(COMMAND_PARAMS[command])
    if unknown:
        raise ConfigError(f"unknown params for {command}: {sorted(unknown)}")
    resolved = copy.deepcopy(COMMAND_PARAMS[command])
    resolved.update({key: coerce_param(command, key, value) for key, value in params.items()})
    return resolved


def resolve_system(model_service, system: Any) -> Optional[SystemSpec]:
    """A preset reference {"preset": name, "params": {...}} or a full SystemSpec mapping."""
    if system is None:
        return None
    if not isinstance(system, dict):
        raise ConfigError("system must be a mapping")
    if "preset" in system:
        if set(system) - {"preset", "params"}:
            raise ConfigError(f"unknown keys in preset reference: {sorted(set(system) - {'preset', 'params'})}")
        try:
            return model_service.build_preset(system["preset"], system.get("params"))
        except LabError as e:
            raise ConfigError(str(e)) from e
        except TypeError as e:
            raise ConfigError(f"bad preset parameters: {e}") from e
    return model_service.from_config(system)


def load_config(command: str, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                seed: Optional[int] = None, out: Optional[str] = None,
                threads: Optional[int] = None) -> ExperimentConfig:
    """
    Merge a config file (if any) with command-line values; command-line
    values win. Raises ConfigError for anything malformed.
    """
    data = read_json(path) if path else {}
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if data.get("command", command) != command:
        raise ConfigError(f"config is for '{data['command']}', not '{command}'")

    params = dict(data.get("params") or {})
    params.update({k: v for k, v in (overrides or {}).items() if v is not None})
    params = resolve_params(command, params)

    system = data.get("system")
    if command not in NO_SYSTEM_COMMANDS and system is None:
        raise ConfigError(f"{command} needs a system (preset reference or full description)")

    seed = seed if seed is not None else data.get("seed", 0)
    try:
        seed = check_seed(seed)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    out = out or data.get("out")
    if not out and command != "list-presets":
        raise ConfigError("no output path given (--out or `out` in the config)")
    threads = threads or data.get("threads") or default_threads()
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError(f"threads must be a positive integer, got {threads}")
    return ExperimentConfig(command=command, system=system, params=params, seed=seed, out=out or "", threads=threads)


def to_dict(config: ExperimentConfig, model_service=None, spec: Optional[SystemSpec] = None) -> Dict[str, Any]:
    """Resolved config in the file schema; the system is written out in full when known."""
    system = model_service.to_config(spec) if (model_service and spec is not None) else config.system
    return {
        "command": config.command,
        "system": system,
        "params": config.params,
        "seed": config.seed,
        "out": config.out,
        "threads": config.threads,
    }
