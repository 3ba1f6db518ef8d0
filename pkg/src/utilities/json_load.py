import copy
import json
import os

from .scenario_config import ConfigError

DEFAULT_SETTINGS = {
    "solver": {
        "power_tolerance": 1e-9,
        "bracket_growth": 2.0,
        "max_iterations": 200,
    },
    "sp_precoding": {"condition_cap": 1e8, "zf_singular_policy": "abort"},
    "reporting": {
        "steady_state_fraction": 0.25,
        "power_prefixes": [1, 10, 100, 1000],
        "log_every": 100,
    },
    "debug": {"matrix_format": "csv"},
    "execution": {"max_workers": 1},
    "reuse_existing_outputs": False,
}


def load_json(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")

    fd = os.open(path, os.O_RDONLY)
    try:
        raw = os.read(fd, os.path.getsize(path)).decode("utf-8")
    finally:
        os.close(fd)
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in {path}: {e}") from e


def _merge_known(defaults, values, path):
    merged = copy.deepcopy(defaults)
    for key, value in values.items():
        qualified = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(qualified, "unknown key")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(qualified, "expected a section object")
            merged[key] = _merge_known(defaults[key], value, qualified)
        else:
            merged[key] = value
    return merged


def load_settings(config_path="config.json"):
    """Technical settings from config.json, filled in with defaults."""
    settings = _merge_known(DEFAULT_SETTINGS, load_json(config_path), "")

    if settings["sp_precoding"]["zf_singular_policy"] not in ("abort", "mrt"):
        raise ConfigError("sp_precoding.zf_singular_policy", "expected 'abort' or 'mrt'")
    if settings["debug"]["matrix_format"] not in ("csv", "npy"):
        raise ConfigError("debug.matrix_format", "expected 'csv' or 'npy'")
    if not 0 < settings["reporting"]["steady_state_fraction"] <= 1:
        raise ConfigError("reporting.steady_state_fraction", "must lie in (0, 1]")
    if int(settings["execution"]["max_workers"]) < 1:
        raise ConfigError("execution.max_workers", "must be >= 1")
    return settings
