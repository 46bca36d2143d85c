"""One plain-text configuration file describing a complete run.

The YAML layout mirrors the dataclass tree below: one mapping per section
plus the top-level scalars ``seed``, ``threads`` and ``out_dir``.  Every
field has a default, so an empty file (or no file at all) is a valid
configuration.  Dumps are sorted and fully explicit, which makes the
resolved-config echo reproducible: loading a dump and dumping again yields
the identical bytes.

Validation happens in two layers.  This module checks shape -- unknown
keys, wrong YAML types -- and reports the dotted path of the offender; the
section dataclasses then check values and their ``ValueError``s are
re-raised as :class:`ConfigError` so the CLI maps them to exit code 2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import yaml

from .dataio import Intrinsics
from .errors import ConfigError
from .field import HashGridConfig
from .losses import EdgeLossCfg, LossWeights, TruncationSpec
from .motionmask import MotionMaskCfg
from .slam import SystemConfig, TrackerConfig

_DATASET_KINDS = ("tum", "synthetic")


@dataclass(frozen=True)
class DatasetCfg:
    """Where the frames come from and how rgb/depth lists are associated."""

    root: str = ""
    kind: str = "tum"       # "synthetic" roots also carry an intrinsics.yaml
    max_dt: float = 0.02    # rgb/depth timestamp association tolerance (s)
    use_seg: bool = False   # feed per-frame segmentation masks when present

    def __post_init__(self):
        if self.kind not in _DATASET_KINDS:
            raise ValueError(
                f"dataset kind must be one of {_DATASET_KINDS}, got {self.kind!r}")
        if self.max_dt <= 0.0:
            raise ValueError(f"max_dt must be positive, got {self.max_dt}")


@dataclass(frozen=True)
class MlpCfg:
    """Decoder head sizes (hidden layer width, geometry feature length)."""

    hidden: int = 32
    h_dim: int = 15

    def __post_init__(self):
        if self.hidden < 1 or self.h_dim < 1:
            raise ValueError("mlp sizes must be >= 1")


@dataclass(frozen=True)
class MeshCfg:
    voxel_size: float = 0.02
    cull_margin: float = 0.05  # depth-visibility slack when culling triangles

    def __post_init__(self):
        if self.voxel_size <= 0.0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.cull_margin < 0.0:
            raise ValueError(f"cull_margin must be >= 0, got {self.cull_margin}")


def _default_intrinsics() -> Intrinsics:
    return Intrinsics(**_INTRINSICS_DEFAULTS)


@dataclass(frozen=True)
class RunConfig:
    """Fully-resolved settings for one run; sections mirror the YAML file."""

    dataset: DatasetCfg = dc_field(default_factory=DatasetCfg)
    intrinsics: Intrinsics = dc_field(default_factory=_default_intrinsics)
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    mlp: MlpCfg = dc_field(default_factory=MlpCfg)
    tracker: TrackerConfig = dc_field(default_factory=TrackerConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    truncation: TruncationSpec = dc_field(default_factory=TruncationSpec)
    edge: EdgeLossCfg = dc_field(default_factory=EdgeLossCfg)
    mask: MotionMaskCfg = dc_field(default_factory=MotionMaskCfg)
    mesh: MeshCfg = dc_field(default_factory=MeshCfg)
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"


_SECTIONS: dict[str, type] = {
    "dataset": DatasetCfg,
    "intrinsics": Intrinsics,
    "grid": HashGridConfig,
    "mlp": MlpCfg,
    "tracker": TrackerConfig,
    "weights": LossWeights,
    "truncation": TruncationSpec,
    "edge": EdgeLossCfg,
    "mask": MotionMaskCfg,
    "mesh": MeshCfg,
}

_SCALAR_DEFAULTS = {"seed": 0, "threads": 1, "out_dir": "out"}

# Intrinsics declares no defaults of its own (a camera model should be
# explicit at call sites); the config layer supplies VGA pinhole values so
# partial [intrinsics] sections still resolve.
_INTRINSICS_DEFAULTS = {
    "fx": 525.0, "fy": 525.0, "cx": 319.5, "cy": 239.5,
    "width": 640, "height": 480, "depth_scale": 5000.0,
}


def _section_defaults(cls) -> dict:
    out = dict(_INTRINSICS_DEFAULTS) if cls is Intrinsics else {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


def _coerce(path: str, value, default):
    """Match a YAML scalar to the field's type, naming the dotted path."""
    want = type(default)
    if want is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(
                f"{path} must be a list of {len(default)} numbers, got {value!r}")
        try:
            return tuple(float(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path} must hold numbers, got {value!r}") from exc
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false, got {value!r}")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{path} has unsupported type {want.__name__}")


def _build_section(name: str, cls, mapping: dict):
    defaults = _section_defaults(cls)
    unknown = sorted(set(mapping) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key {name}.{unknown[0]}")
    kwargs = dict(defaults)
    for key, value in mapping.items():
        kwargs[key] = _coerce(f"{name}.{key}", value, defaults[key])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid [{name}] config: {exc}") from exc


def config_from_dict(raw: dict | None) -> RunConfig:
    """Build a RunConfig from a parsed YAML mapping; unknown keys fail."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(_SECTIONS) - set(_SCALAR_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        kwargs[name] = _build_section(name, cls, section)
    for name, default in _SCALAR_DEFAULTS.items():
        kwargs[name] = _coerce(name, raw.get(name, default), default)
    if kwargs["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {kwargs['threads']}")
    if kwargs["seed"] < 0:
        raise ConfigError(f"seed must be >= 0, got {kwargs['seed']}")
    return RunConfig(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain YAML-ready mapping with every field explicit."""
    out: dict = {}
    for name, cls in _SECTIONS.items():
        section = getattr(cfg, name)
        d = {}
        for f in dataclasses.fields(cls):
            v = getattr(section, f.name)
            d[f.name] = [float(x) for x in v] if isinstance(v, tuple) else v
        out[name] = d
    for name in _SCALAR_DEFAULTS:
        out[name] = getattr(cfg, name)
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``section.key=value`` pairs; values parse as YAML scalars."""
    raw = config_to_dict(cfg)
    for item in assignments:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(
                f"override must look like section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from exc
        head, dot, tail = key.partition(".")
        if dot:
            if head not in _SECTIONS:
                raise ConfigError(f"unknown config section {head!r}")
            raw[head][tail] = value
        else:
            if head not in _SCALAR_DEFAULTS:
                raise ConfigError(f"unknown config key {head!r}")
            raw[head] = value
    return config_from_dict(raw)


def system_config(cfg: RunConfig) -> SystemConfig:
    """The subset the tracking/mapping loop consumes."""
    return SystemConfig(
        tracker=cfg.tracker, grid=cfg.grid, weights=cfg.weights,
        truncation=cfg.truncation, edge=cfg.edge, mask=cfg.mask,
        mlp_hidden=cfg.mlp.hidden, mlp_h_dim=cfg.mlp.h_dim,
        seed=cfg.seed, threads=cfg.threads,
    )


def intrinsics_from_dict(d: dict) -> Intrinsics:
    """Camera model from a plain mapping (e.g. a dataset's intrinsics.yaml)."""
    if not isinstance(d, dict):
        raise ConfigError("intrinsics must be a mapping")
    return _build_section("intrinsics", Intrinsics, d)


def grid_from_dict(d: dict) -> HashGridConfig:
    """Hash-grid settings from a plain mapping (e.g. a checkpoint header)."""
    if not isinstance(d, dict):
        raise ConfigError("grid config must be a mapping")
    return _build_section("grid", HashGridConfig, d)
