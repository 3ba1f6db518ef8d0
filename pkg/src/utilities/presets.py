"""
Named scenarios. PRESETS are single runs; SWEEPS expand into the groups of
runs behind each reproduced figure, every run under both all-MRT and all-ZF.
"""

import copy
import itertools
from typing import Any, Dict, List

URBAN_LTE_DEFAULT: Dict[str, Any] = {
    "name": "urban-lte-default",
    "preset": "urban-lte-default",
    "topology": {
        "cell_count": 7,
        "radius_m": 500.0,
        "antennas_per_bs": 32,
        "sp_count": 4,
        "users_per_sp": 2,
    },
    "channel": {
        "shadowing_std_db": 8.0,
        "min_distance_m": 10.0,
        "csi_error_std": 0.15,
    },
    "power": {
        "p_max_dbm": 39.0,
        "p_bar_dbm": 37.0,
        "n0_dbm_per_hz": -174.0,
        "noise_figure_db": 10.0,
        "bandwidth_hz": 60e3,
    },
    "service_providers": {"scheme": "mrt"},
    "algorithm": {"theta": 1e-4, "horizon": 1000, "seed": 0, "weighting": "cell"},
    "output": {"directory": "output", "approach": "spatial", "baseline": False, "dump_matrices": False},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "urban-lte-default": URBAN_LTE_DEFAULT,
}

SCHEMES = ("mrt", "zf")


def _theta_sweep() -> List[Dict[str, Any]]:
    runs = []
    for theta, scheme, e_H in itertools.product((1e-2, 1e-3, 1e-4), SCHEMES, (0.15, 0.0)):
        tag = "perfect" if e_H == 0 else "imperfect"
        runs.append({
            "name": f"fig2-{scheme}-theta{theta:g}-{tag}",
            "algorithm": {"theta": theta},
            "service_providers": {"scheme": scheme},
            "channel": {"csi_error_std": e_H},
        })
    return runs


def _p_bar_sweep() -> List[Dict[str, Any]]:
    return [
        {
            "name": f"fig3-{scheme}-pbar{p_bar}",
            "power": {"p_bar_dbm": p_bar},
            "service_providers": {"scheme": scheme},
        }
        for p_bar, scheme in itertools.product((36.0, 37.0, "inf"), SCHEMES)
    ]


def _csi_error_sweep() -> List[Dict[str, Any]]:
    return [
        {
            "name": f"fig4-{scheme}-eH{int(round(e_H * 100))}",
            "channel": {"csi_error_std": e_H},
            "service_providers": {"scheme": scheme},
        }
        for e_H, scheme in itertools.product((0.05, 0.10, 0.15), SCHEMES)
    ]


def _approach_sweep() -> List[Dict[str, Any]]:
    # Both approaches of one scheme share the default seed.
    return [
        {
            "name": f"fig5-{scheme}-{approach}",
            "output": {"approach": approach},
            "service_providers": {"scheme": scheme},
        }
        for scheme, approach in itertools.product(SCHEMES, ("spatial", "fd"))
    ]


SWEEPS = {
    "fig2": _theta_sweep,
    "fig3": _p_bar_sweep,
    "fig4": _csi_error_sweep,
    "fig5": _approach_sweep,
}


def preset_dict(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise KeyError(f"Unknown preset: {name}")
    return copy.deepcopy(PRESETS[name])


def expand_sweep(name: str, overrides: Dict[str, Any] = None):
    """List of ScenarioConfig for a sweep (or a one-element list for a plain preset)."""
    from .scenario_config import ConfigError, load_config

    if name in PRESETS:
        return [load_config(name, overrides)]
    if name not in SWEEPS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS) + sorted(SWEEPS)}")
    configs = []
    for run in SWEEPS[name]():
        merged = copy.deepcopy(run)
        merged["preset"] = "urban-lte-default"
        for key, value in (overrides or {}).items():
            if isinstance(value, dict):
                merged.setdefault(key, {}).update(value)
            else:
                merged[key] = value
        configs.append(load_config("urban-lte-default", merged))
    return configs
