"""
Scenario configuration: the per-run description read from input.json or a
named preset. Powers are given in dBm here and converted to watts on access.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional, Tuple, Union

logger = logging.getLogger(__name__)

SCHEMES = ("mrt", "zf")
APPROACHES = ("spatial", "fd")
WEIGHTINGS = ("cell", "network")


class ConfigError(ValueError):
    """Invalid configuration value; `path` is the dot-qualified field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def dbm_to_watt(dbm: float) -> float:
    if math.isinf(dbm) and dbm > 0:
        return math.inf
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watt_to_dbm(watt: float) -> float:
    if watt <= 0:
        raise ValueError(f"Power must be positive to convert to dBm, got {watt}")
    if math.isinf(watt):
        return math.inf
    return 10.0 * math.log10(watt) + 30.0


@dataclass(frozen=True)
class TopologyConfig:
    cell_count: int = 7
    radius_m: float = 500.0
    antennas_per_bs: Union[int, Tuple[int, ...]] = 32
    sp_count: int = 4
    users_per_sp: Union[int, Tuple[int, ...]] = 2


@dataclass(frozen=True)
class ChannelConfig:
    shadowing_std_db: float = 8.0
    min_distance_m: float = 10.0
    csi_error_std: float = 0.15


@dataclass(frozen=True)
class PowerConfig:
    p_max_dbm: float = 39.0
    p_bar_dbm: float = 37.0
    n0_dbm_per_hz: float = -174.0
    noise_figure_db: float = 10.0
    bandwidth_hz: float = 60e3


@dataclass(frozen=True)
class ServiceProviderConfig:
    scheme: Union[str, Tuple[str, ...]] = "mrt"
    power_fractions: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class AlgorithmConfig:
    theta: float = 1e-4
    horizon: int = 1000
    seed: int = 0
    weighting: str = "cell"


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "output"
    approach: str = "spatial"
    baseline: bool = False
    dump_matrices: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "urban-lte-default"
    preset: Optional[str] = None
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    power: PowerConfig = field(default_factory=PowerConfig)
    service_providers: ServiceProviderConfig = field(default_factory=ServiceProviderConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def p_max_w(self) -> float:
        return dbm_to_watt(self.power.p_max_dbm)

    @property
    def p_bar_w(self) -> float:
        return dbm_to_watt(self.power.p_bar_dbm)

    @property
    def schemes(self) -> Tuple[str, ...]:
        scheme = self.service_providers.scheme
        return (scheme,) * self.topology.sp_count if isinstance(scheme, str) else tuple(scheme)

    @property
    def power_fractions(self) -> Tuple[float, ...]:
        fractions = self.service_providers.power_fractions
        M = self.topology.sp_count
        return (1.0 / M,) * M if fractions is None else tuple(fractions)

    def users_per_sp_list(self) -> Tuple[int, ...]:
        users = self.topology.users_per_sp
        return (users,) * self.topology.sp_count if isinstance(users, int) else tuple(users)

    def antennas_list(self) -> Tuple[int, ...]:
        antennas = self.topology.antennas_per_bs
        return (antennas,) * self.topology.cell_count if isinstance(antennas, int) else tuple(antennas)

    def with_overrides(self, overrides: Dict[str, Any]) -> "ScenarioConfig":
        return parse_config(_deep_merge(emit(self), overrides))


SECTIONS = {
    "topology": TopologyConfig,
    "channel": ChannelConfig,
    "power": PowerConfig,
    "service_providers": ServiceProviderConfig,
    "algorithm": AlgorithmConfig,
    "output": OutputConfig,
}


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _number(value: Any, path: str, integer: bool = False) -> Union[int, float]:
    if isinstance(value, bool):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity"):
        value = math.inf
    if integer:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    value = float(value)
    if math.isnan(value):
        raise ConfigError(path, "must not be NaN")
    return value


def _int_or_list(value: Any, path: str, length: int) -> Union[int, Tuple[int, ...]]:
    if isinstance(value, (list, tuple)):
        if len(value) != length:
            raise ConfigError(path, f"expected {length} entries, got {len(value)}")
        items = tuple(_number(v, f"{path}[{i}]", integer=True) for i, v in enumerate(value))
        for i, v in enumerate(items):
            if v < 1:
                raise ConfigError(f"{path}[{i}]", "must be >= 1")
        return items
    number = _number(value, path, integer=True)
    if number < 1:
        raise ConfigError(path, "must be >= 1")
    return number


def _section_values(cls, data: Any, path: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a section object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    return dict(data)


def parse_config(data: Dict[str, Any]) -> ScenarioConfig:
    """Validates a raw config dict and builds the typed ScenarioConfig."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    allowed = {"name", "preset"} | set(SECTIONS)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")

    raw = {name: _section_values(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()}

    t = raw["topology"]
    cell_count = _number(t.get("cell_count", TopologyConfig.cell_count), "topology.cell_count", integer=True)
    sp_count = _number(t.get("sp_count", TopologyConfig.sp_count), "topology.sp_count", integer=True)
    if cell_count < 1:
        raise ConfigError("topology.cell_count", "must be >= 1")
    if sp_count < 1:
        raise ConfigError("topology.sp_count", "must be >= 1")
    radius = _number(t.get("radius_m", TopologyConfig.radius_m), "topology.radius_m")
    if not 0 < radius < math.inf:
        raise ConfigError("topology.radius_m", "must be a positive finite distance")
    topology = TopologyConfig(
        cell_count=cell_count,
        radius_m=radius,
        antennas_per_bs=_int_or_list(t.get("antennas_per_bs", TopologyConfig.antennas_per_bs), "topology.antennas_per_bs", cell_count),
        sp_count=sp_count,
        users_per_sp=_int_or_list(t.get("users_per_sp", TopologyConfig.users_per_sp), "topology.users_per_sp", sp_count),
    )

    c = raw["channel"]
    channel = ChannelConfig(**{k: _number(v, f"channel.{k}") for k, v in c.items()})
    if channel.csi_error_std < 0 or math.isinf(channel.csi_error_std):
        raise ConfigError("channel.csi_error_std", "must be a finite value >= 0")
    if channel.shadowing_std_db < 0:
        raise ConfigError("channel.shadowing_std_db", "must be >= 0")
    if channel.min_distance_m <= 0:
        raise ConfigError("channel.min_distance_m", "must be positive")

    p = dict(raw["power"])
    if "p_bar_dbm" in p and p["p_bar_dbm"] is None:
        p["p_bar_dbm"] = math.inf
    power = PowerConfig(**{k: _number(v, f"power.{k}") for k, v in p.items()})
    if math.isinf(power.p_max_dbm):
        raise ConfigError("power.p_max_dbm", "must be finite")
    if power.p_bar_dbm > power.p_max_dbm and not math.isinf(power.p_bar_dbm):
        raise ConfigError("power.p_bar_dbm", f"must not exceed p_max_dbm ({power.p_max_dbm} dBm)")
    if power.p_bar_dbm == -math.inf:
        raise ConfigError("power.p_bar_dbm", "must be a finite dBm value or inf")
    if not 0 < power.bandwidth_hz < math.inf:
        raise ConfigError("power.bandwidth_hz", "must be positive")

    s = raw["service_providers"]
    scheme = s.get("scheme", ServiceProviderConfig.scheme)
    if isinstance(scheme, (list, tuple)):
        if len(scheme) != sp_count:
            raise ConfigError("service_providers.scheme", f"expected {sp_count} entries, got {len(scheme)}")
        scheme = tuple(str(x).lower() for x in scheme)
        bad = [x for x in scheme if x not in SCHEMES]
    else:
        scheme = str(scheme).lower()
        bad = [] if scheme in SCHEMES else [scheme]
    if bad:
        raise ConfigError("service_providers.scheme", f"unknown scheme {bad[0]!r}, expected one of {SCHEMES}")
    fractions = s.get("power_fractions")
    if fractions is not None:
        if not isinstance(fractions, (list, tuple)) or len(fractions) != sp_count:
            raise ConfigError("service_providers.power_fractions", f"expected a list of {sp_count} fractions")
        fractions = tuple(_number(f, f"service_providers.power_fractions[{i}]") for i, f in enumerate(fractions))
        if any(f <= 0 for f in fractions):
            raise ConfigError("service_providers.power_fractions", "every fraction must be positive")
        if sum(fractions) > 1.0 + 1e-12:
            raise ConfigError("service_providers.power_fractions", "fractions must sum to at most 1")
    service_providers = ServiceProviderConfig(scheme=scheme, power_fractions=fractions)

    schemes = (scheme,) * sp_count if isinstance(scheme, str) else scheme
    users = (topology.users_per_sp,) * sp_count if isinstance(topology.users_per_sp, int) else topology.users_per_sp
    antennas = (topology.antennas_per_bs,) * cell_count if isinstance(topology.antennas_per_bs, int) else topology.antennas_per_bs
    for m, (sch, k) in enumerate(zip(schemes, users)):
        if sch == "zf" and k > min(antennas):
            raise ConfigError("topology.users_per_sp", f"SP {m} uses ZF with {k} users but a BS has only {min(antennas)} antennas")

    a = raw["algorithm"]
    algorithm = AlgorithmConfig(
        theta=_number(a.get("theta", AlgorithmConfig.theta), "algorithm.theta"),
        horizon=_number(a.get("horizon", AlgorithmConfig.horizon), "algorithm.horizon", integer=True),
        seed=_number(a.get("seed", AlgorithmConfig.seed), "algorithm.seed", integer=True),
        weighting=str(a.get("weighting", AlgorithmConfig.weighting)).lower(),
    )
    if not 0 < algorithm.theta < math.inf:
        raise ConfigError("algorithm.theta", "must be positive")
    if algorithm.horizon < 1:
        raise ConfigError("algorithm.horizon", "must be >= 1")
    if algorithm.seed < 0:
        raise ConfigError("algorithm.seed", "must be >= 0")
    if algorithm.weighting not in WEIGHTINGS:
        raise ConfigError("algorithm.weighting", f"expected one of {WEIGHTINGS}, got {algorithm.weighting!r}")

    o = raw["output"]
    output = OutputConfig(
        directory=str(o.get("directory", OutputConfig.directory)),
        approach=str(o.get("approach", OutputConfig.approach)).lower(),
        baseline=bool(o.get("baseline", OutputConfig.baseline)),
        dump_matrices=bool(o.get("dump_matrices", OutputConfig.dump_matrices)),
    )
    if output.approach not in APPROACHES:
        raise ConfigError("output.approach", f"expected one of {APPROACHES}, got {output.approach!r}")

    name = data.get("name", data.get("preset") or ScenarioConfig.name)
    return ScenarioConfig(
        name=str(name),
        preset=data.get("preset"),
        topology=topology,
        channel=channel,
        power=power,
        service_providers=service_providers,
        algorithm=algorithm,
        output=output,
    )


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def emit(config: ScenarioConfig) -> Dict[str, Any]:
    """JSON-ready dict; parse_config(emit(c)) == c."""
    return _jsonable(asdict(config))


def load_config(source: str, overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    """Loads a scenario from a preset name or a JSON file (which may itself name a preset)."""
    from .presets import PRESETS, SWEEPS, preset_dict

    if source in SWEEPS and source not in PRESETS:
        raise ConfigError("preset", f"{source!r} is a sweep; expand it with expand_sweep()")
    if source in PRESETS:
        data = preset_dict(source)
    else:
        if not os.path.exists(source):
            raise FileNotFoundError(f"Scenario file not found: {source}")
        try:
            with open(source, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("<root>", f"invalid JSON in {source}: {e}") from e
        preset = data.get("preset") if isinstance(data, dict) else None
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError("preset", f"unknown preset {preset!r}")
            data = _deep_merge(preset_dict(preset), data)
    if overrides:
        data = _deep_merge(data, overrides)
    config = parse_config(data)
    logger.info(f"Loaded scenario '{config.name}' (seed {config.algorithm.seed}, T={config.algorithm.horizon})")
    return config
