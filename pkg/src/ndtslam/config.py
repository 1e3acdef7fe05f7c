"""Flat ``section.key = value`` configuration files.

One file drives every subcommand. Unknown keys, malformed lines and values
outside their bounds are errors that name the line and key. :func:`echo`
writes every key so that ``parse(echo(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .ndt import RegistrationConfig
from .posegraph import OptimizerConfig
from .simulator import LidarModel, ScenarioConfig, ScenarioError
from .uncertainty import UncertaintyCoefficients, UncertaintyError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoopPolicy:
    """Synthetic loop edges for exercising the optimizer.

    ``mode = truth`` adds, every ``interval`` nodes, an edge from node
    ``i - span`` to node ``i`` measured from the ground-truth trajectory.
    """

    mode: str = "none"  # none | truth
    interval: int = 50
    span: int = 50
    translation_weight: float = 100.0
    rotation_weight: float = 2500.0


@dataclass(frozen=True)
class PipelineSettings:
    max_failure_fraction: float = 0.2
    std_formula: str = "population"  # population | sample
    join_tolerance: float = 0.05  # s


@dataclass(frozen=True)
class PipelineConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    uncertainty: UncertaintyCoefficients = field(default_factory=UncertaintyCoefficients)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loops: LoopPolicy = field(default_factory=LoopPolicy)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    @property
    def ddof(self) -> int:
        return 0 if self.pipeline.std_formula == "population" else 1


# section name -> (owning attribute path, dataclass)
SECTIONS = {
    "scenario": (("scenario",), ScenarioConfig),
    "lidar": (("scenario", "lidar"), LidarModel),
    "registration": (("registration",), RegistrationConfig),
    "uncertainty": (("uncertainty",), UncertaintyCoefficients),
    "optimizer": (("optimizer",), OptimizerConfig),
    "loops": (("loops",), LoopPolicy),
    "pipeline": (("pipeline",), PipelineSettings),
}

_POSITIVE = "positive"
_NONNEG = "non-negative"
BOUNDS = {
    "scenario.duration": (0.0, 3600.0),
    "scenario.speed": (0.0, 40.0),
    "scenario.ramp_time": (0.0, 600.0),
    "scenario.body_sway": (0.0, 10.0),
    "scenario.street_width": (4.0, 100.0),
    "scenario.vehicle_count": (0, 50),
    "scenario.lane_change_amplitude": (0.0, 5.0),
    "scenario.lane_change_period": (1.0, 3600.0),
    "lidar.beams": (1, 256),
    "lidar.horizontal_resolution": (0.05, 45.0),
    "lidar.max_range": (1.0, 500.0),
    "lidar.noise": (0.0, 1.0),
    "lidar.rate": (0.1, 100.0),
    "lidar.sensor_height": (0.0, 10.0),
    "registration.cell_size": (0.1, 20.0),
    "registration.min_points_per_cell": (3, 1000),
    "registration.floor_ratio": (0.0, 1.0),
    "registration.step_tolerance": (1e-12, 1.0),
    "registration.max_iterations": (1, 1000),
    "registration.downsample": (0.0, 10.0),
    "registration.max_step": (1e-6, 100.0),
    "registration.work_unit": (1e-15, 1.0),
    "optimizer.initial_damping": (1e-15, 1e6),
    "optimizer.damping_factor": (1.0 + 1e-9, 1e3),
    "optimizer.relative_tolerance": (0.0, 1.0),
    "optimizer.max_iterations": (1, 100000),
    "optimizer.fd_step": (1e-12, 1e-2),
    "loops.interval": (1, 10**6),
    "loops.span": (1, 10**6),
    "loops.translation_weight": (1e-12, 1e12),
    "loops.rotation_weight": (1e-12, 1e12),
    "pipeline.max_failure_fraction": (0.0, 1.0),
    "pipeline.join_tolerance": (0.0, 10.0),
}
CHOICES = {
    "registration.clock": ("work", "wall"),
    "loops.mode": ("none", "truth"),
    "pipeline.std_formula": ("population", "sample"),
}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _base_type(tp):
    """(python type, optional?) for a field annotation like ``float | None``."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _convert(text: str, tp, key: str, where: str):
    base, optional = _base_type(tp)
    low = text.lower()
    if optional and low == "none":
        return None
    try:
        if base is bool:
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError
        if base is int:
            return int(text)
        if base is float:
            v = float(text)
            if math.isnan(v):
                raise ValueError
            return v
        if base is str:
            return text
    except ValueError:
        raise ConfigError(f"{where}: invalid value {text!r} for {key}") from None
    raise ConfigError(f"{where}: {key} cannot be set from a config file")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar_fields(cls):
    hints = _hints(cls)
    return [(f.name, hints[f.name]) for f in dataclasses.fields(cls)
            if not dataclasses.is_dataclass(_base_type(hints[f.name])[0])]


def _check(key: str, value, where: str) -> None:
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{where}: {key} must be one of {', '.join(CHOICES[key])}, got {value!r}")
    if key in BOUNDS and value is not None:
        lo, hi = BOUNDS[key]
        if not (lo <= value <= hi):
            raise ConfigError(f"{where}: {key} = {value!r} outside [{lo:g}, {hi:g}]")


def parse_text(text: str, source: str = "<config>") -> PipelineConfig:
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key or not val:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        fields_ = dict(_scalar_fields(SECTIONS[section][1]))
        if name not in fields_:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        v = _convert(val, fields_[name], key, where)
        _check(key, v, where)
        values[section][name] = v
    return _build(values, source)


def _build(values: dict, source: str) -> PipelineConfig:
    try:
        lidar = LidarModel(**values["lidar"])
        scenario = ScenarioConfig(lidar=lidar, **values["scenario"])
        return PipelineConfig(
            scenario=scenario,
            registration=RegistrationConfig(**values["registration"]),
            uncertainty=UncertaintyCoefficients(**values["uncertainty"]),
            optimizer=OptimizerConfig(**values["optimizer"]),
            loops=LoopPolicy(**values["loops"]),
            pipeline=PipelineSettings(**values["pipeline"]),
        )
    except ScenarioError as exc:
        key = "scenario.urbanization" if "urbanization" in str(exc) else (
            "scenario.traffic" if "traffic" in str(exc) else "scenario")
        raise ConfigError(f"{source}: {key}: {exc}") from None
    except UncertaintyError as exc:
        raise ConfigError(f"{source}: uncertainty: {exc}") from None


def load(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def echo(cfg: PipelineConfig) -> str:
    """Every key with its effective value, one per line, in a fixed order."""
    lines = []
    for section, (attrs, cls) in SECTIONS.items():
        obj = cfg
        for a in attrs:
            obj = getattr(obj, a)
        for name, _ in _scalar_fields(cls):
            lines.append(f"{section}.{name} = {_format(getattr(obj, name))}")
    return "\n".join(lines) + "\n"
