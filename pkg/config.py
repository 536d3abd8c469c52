#!/usr/bin/env python3
"""
Run Configuration
=================

Loads the JSON configuration file, merges it over built-in defaults and the
command-line flags, and validates the result. The effective settings of every
command are echoed into a metadata block so a run can be reproduced from its
outputs alone.

Precedence: defaults < config file section < explicit flags.
"""

import copy
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

from errors import InputError
from kernels import KERNEL_NAMES

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
FORMAT_VERSION = 1
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "simulate": {
        "kernel": "normal",
        "sigma": [0.2],
        "radius": [0.3],
        "alpha": [0.7],
        "rho": [3.0],
        "states": 1,
        "stay": 0.9,
        "beta": [3.0, 2.0, 1.0, 0.0],
        "T": 1000,
        "K": 200,
        "seed": 1,
        "init": "target",
        "require_all_categories": False,
    },
    "fit": {
        "kernel": "normal",
        "states": 1,
        "starts": 10,
        "seed": 0,
        "reference_category": [],
        "workers": 1,
        "hessian": True,
        "max_iter": 2000,
    },
    "mc": {
        # None: 50 for the normal and fixed-radius kernels, 30 for the gamma radius
        "nc": None,
        "nz": None,
        "nr": 30,
        "mc_seed": 0,
        "lhs": True,
    },
    "gof": {
        "sim_length": 10000,
        "bin_width": 0.05,
        "seed": 0,
    },
    "experiment": {
        "scenario": 1,
        "reps": 10,
        "T": 500,
        "starts": 3,
        "seed": 0,
        "workers": 1,
        "hessian": False,
    },
    "landscape": {
        "rows": 100,
        "cols": 100,
        "cell_size": 0.3,
        "categories": ["G", "BG", "B", "W"],
        "smoothness": 4.0,
        "seed": 0,
    },
    "folders": {
        "output": "output",
    },
    "logging": {
        "level": "INFO",
    },
}

# Sections whose keys double as flags of a command
COMMAND_SECTIONS = {
    "simulate": ("simulate",),
    "fit": ("fit", "mc"),
    "decode": ("mc",),
    "gof": ("gof",),
    "experiment": ("experiment", "mc"),
    "landscape": ("landscape",),
}


def deep_merge(base: Dict, override: Dict) -> Dict:
    """Recursively merge override into a copy of base"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: Optional[Union[str, Path]] = None) -> Dict:
    """
    Load a JSON config file merged over the defaults

    Args:
        path: Config file; None (or a missing default config.json) gives the defaults

    Raises:
        InputError: explicitly named file missing or not valid JSON
    """
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON in config file {path}: {e}")
    if not isinstance(user, dict):
        raise InputError(f"config file {path} must contain a JSON object")
    logger.debug(f"Loaded config from {path}")
    config = deep_merge(DEFAULT_CONFIG, user)
    validate_config(config)
    return config


def _positive_int(section: str, key: str, value, allow_none: bool = False):
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise InputError(f"config '{section}.{key}' must be a positive integer, got {value!r}")


def validate_config(config: Dict) -> bool:
    """Check section types, kernel names, sizes and the log level"""
    for section in DEFAULT_CONFIG:
        if not isinstance(config.get(section), dict):
            raise InputError(f"config section '{section}' must be an object")

    for section in ("simulate", "fit"):
        kernel = config[section].get("kernel")
        if kernel not in KERNEL_NAMES:
            raise InputError(f"config '{section}.kernel' must be one of {list(KERNEL_NAMES)}, got {kernel!r}")
        _positive_int(section, "states", config[section].get("states"))

    for key in ("nc", "nz", "nr"):
        _positive_int("mc", key, config["mc"].get(key), allow_none=True)
    for key in ("T", "K"):
        _positive_int("simulate", key, config["simulate"].get(key))
    for key in ("starts", "workers"):
        _positive_int("fit", key, config["fit"].get(key))
    _positive_int("gof", "sim_length", config["gof"].get("sim_length"))

    level = str(config["logging"].get("level", "INFO")).upper()
    if level not in LOG_LEVELS:
        raise InputError(f"config 'logging.level' must be one of {list(LOG_LEVELS)}, got {level!r}")

    for name, folder in config["folders"].items():
        if folder and os.path.exists(folder) and not os.path.isdir(folder):
            raise InputError(f"config 'folders.{name}' is not a directory: {folder}")
    return True


def resolve_settings(config: Dict, command: str, flags: Dict[str, Any]) -> Dict[str, Any]:
    """
    Effective settings of a command

    Flags left at None fall back to the config sections of the command, which
    already carry the defaults.
    """
    settings: Dict[str, Any] = {}
    for section in COMMAND_SECTIONS.get(command, ()):
        settings.update(copy.deepcopy(config[section]))
    for key, value in flags.items():
        if value is not None or key not in settings:
            settings[key] = value
    return settings


def mc_sizes(settings: Dict[str, Any], kernel: str) -> Dict[str, int]:
    """Monte Carlo sizes with the kernel-dependent defaults filled in"""
    default = 30 if kernel == "gamma-radius" else 50
    return {
        "n_c": int(settings.get("nc") or default),
        "n_z": int(settings.get("nz") or default),
        "n_r": int(settings.get("nr") or 30),
    }


def metadata(command: str, settings: Dict[str, Any], format_version: int = FORMAT_VERSION) -> Dict[str, Any]:
    return {
        "tool_version": TOOL_VERSION,
        "format_version": format_version,
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "settings": {k: (str(v) if isinstance(v, Path) else v) for k, v in settings.items()},
    }


def write_metadata(path: Union[str, Path], meta: Dict[str, Any]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
