"""Pipeline configuration: one YAML file, every default visible.

Blocks map onto the per-module config dataclasses.  Unknown keys and type
mismatches raise :class:`ConfigError` naming the dotted key path.  Relative
paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .conflicts import DEFAULT_BANDS, ConflictConfig
from .dedup import FilterConfig
from .kinematics import RefineConfig, SmootherConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    tracks: str = "tracks.csv"
    signals: str | None = "signals.csv"
    gcps: str = "gcps.csv"
    flight_log: str | None = None
    rulers: str | None = None
    map: str = "map.geojson"
    out_dir: str = "out"


@dataclass(frozen=True)
class CameraConfig:
    fx: float = 2600.0
    fy: float = 2600.0
    cx: float = 1920.0
    cy: float = 1080.0
    width_px: int = 3840
    height_px: int = 2160
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    altitude_m: float | None = None
    refine_distortion: bool = True


@dataclass(frozen=True)
class SignalConfig:
    clock_offset_s: float = 0.0
    reference_movement: str | None = None
    yellow_is_violation: bool = False


@dataclass(frozen=True)
class MetricsConfig:
    cell_size_m: float = 1.0
    heatmap_margin_m: float = 10.0
    duration_s: float | None = None


@dataclass(frozen=True)
class PipelineConfig:
    config_version: int = CONFIG_VERSION
    scene_id: str = ""
    frame_rate_hz: float = 10.0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    signal: SignalConfig = field(default_factory=SignalConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    conflict: ConflictConfig = field(default_factory=ConflictConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    base_dir: str = field(default=".", compare=False)

    def path(self, name: str) -> Path | None:
        v = getattr(self.paths, name)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.path("out_dir")

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            d[f.name] = _plain(getattr(self, f.name))
        d["conflict"]["bands"] = {k: [lo, hi] for lo, hi, k in self.conflict.bands}
        return d

    def config_hash(self) -> str:
        """Hash of every setting that can change outputs (not threads or out_dir)."""
        d = self.to_dict()
        d.pop("threads")
        d["paths"].pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _coerce(value, default, key: str, annotation: str):
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: value required")
    kind = annotation.replace("| None", "").strip()
    try:
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "tuple":
            return tuple(float(x) for x in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return value


def _build(cls, data, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names or key == "base_dir":
            raise ConfigError(f"{path}: unknown key")
        f = names[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path)
        elif key == "bands" and cls is ConflictConfig:
            kwargs[key] = _bands(value, path)
        else:
            kwargs[key] = _coerce(value, default, path, str(f.type))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def _bands(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected mapping kind -> [lo, hi]")
    try:
        return tuple(sorted(((float(lo), float(hi), str(k)) for k, (lo, hi) in value.items())))
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: each band must be [lo, hi]") from None


def _validate(cfg: PipelineConfig):
    if cfg.config_version != CONFIG_VERSION:
        raise ConfigError(f"config_version: unsupported version {cfg.config_version}")
    checks = {
        "frame_rate_hz": cfg.frame_rate_hz,
        "threads": cfg.threads,
        "filter.min_duration_s": cfg.filter.min_duration_s,
        "filter.min_displacement_m": cfg.filter.min_displacement_m,
        "filter.min_confidence": cfg.filter.min_confidence,
        "filter.k_overlap": cfg.filter.k_overlap,
        "filter.min_overlap_ratio": cfg.filter.min_overlap_ratio,
        "filter.pair_radius_m": cfg.filter.pair_radius_m,
        "conflict.ttc_max_s": cfg.conflict.ttc_max_s,
        "conflict.dgt_max_s": cfg.conflict.dgt_max_s,
        "conflict.episode_gap_s": cfg.conflict.episode_gap_s,
        "conflict.dgt_window_s": cfg.conflict.dgt_window_s,
        "conflict.pair_radius_m": cfg.conflict.pair_radius_m,
        "conflict.assoc_radius_m": cfg.conflict.assoc_radius_m,
        "refine.speed_gate": cfg.refine.speed_gate,
        "refine.max_dev_deg": cfg.refine.max_dev_deg,
        "refine.k_stable": cfg.refine.k_stable,
        "refine.tol_stable_deg": cfg.refine.tol_stable_deg,
        "refine.tol_outlier_deg": cfg.refine.tol_outlier_deg,
        "metrics.cell_size_m": cfg.metrics.cell_size_m,
    }
    for key, v in checks.items():
        if not v > 0:
            raise ConfigError(f"{key}: must be positive, got {v}")
    if len(cfg.camera.dist) != 5:
        raise ConfigError("camera.dist: expected 5 coefficients [k1, k2, p1, p2, k3]")


def default_config() -> PipelineConfig:
    return PipelineConfig()


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping at top level")
    if "config_version" not in data:
        raise ConfigError("config_version: required")
    cfg = _build(PipelineConfig, data, "")
    cfg = dataclasses.replace(cfg, base_dir=str(base_dir))
    _validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(data or {}, path.parent)


__all__ = ["CONFIG_VERSION", "ConfigError", "PipelineConfig", "PathsConfig", "CameraConfig",
           "SignalConfig", "MetricsConfig", "load_config", "config_from_dict", "default_config",
           "DEFAULT_BANDS"]
