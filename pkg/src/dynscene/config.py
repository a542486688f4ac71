"""Pipeline configuration and scene-spec files (INI syntax, strictly validated).

Config file sections and keys mirror the parameter dataclasses::

    [segmentation]   SegmentationParams   (theta, lam, hypothesis_count, ...)
    [tracking]       TrackerConfig        (window, ransac_threshold, coast_limit, ...)
    [superpixels]    SuperpixelParams     (target_count, N_u, N_s, N_d, knn_k, ...)
    [reconstruction] ReconParams          (static_voxel, object_voxel, map_max_depth, feature_gate)
    [pipeline]       dense (run the superpixel and reconstruction stages)

Scene-spec files hold one ``[scene]`` section: ``preset`` (corridor or
multi_object) plus any keyword argument of that preset's factory.

Unknown sections or keys, unparsable values and out-of-range values all raise
:class:`ConfigError`.
"""
from __future__ import annotations

import configparser
import inspect
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .masks import SuperpixelParams
from .scenes import PRESETS
from .segmentation import SegmentationParams
from .tracking import TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReconParams:
    static_voxel: float = 0.05
    object_voxel: float = 0.02
    map_max_depth: float = math.inf
    feature_gate: float = 0.1  # dense object points must lie this close to a tracked feature

    def __post_init__(self):
        if min(self.static_voxel, self.object_voxel, self.map_max_depth, self.feature_gate) <= 0:
            raise ValueError("voxel sizes, map_max_depth and feature_gate must be positive")


@dataclass
class PipelineOptions:
    dense: bool = True


@dataclass
class PipelineConfig:
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    tracking: TrackerConfig = field(default_factory=TrackerConfig)
    superpixels: SuperpixelParams = field(default_factory=SuperpixelParams)
    reconstruction: ReconParams = field(default_factory=ReconParams)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)

    def tracker_config(self) -> TrackerConfig:
        return replace(self.tracking, segmentation=self.segmentation)


_SECTIONS = {
    "segmentation": SegmentationParams,
    "tracking": TrackerConfig,
    "superpixels": SuperpixelParams,
    "reconstruction": ReconParams,
    "pipeline": PipelineOptions,
}


def _convert(raw: str, annotation: str, where: str):
    ann = annotation.replace(" ", "")
    text = raw.strip()
    optional = "None" in ann.split("|")
    if optional and text.lower() == "none":
        return None
    base = [a for a in ann.split("|") if a != "None"][0]
    try:
        if base == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "str":
            return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unsupported parameter type {annotation}")


def _build(cls, items: dict, where: str, skip=()):
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[key] = _convert(raw, str(known[key].type), f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cp


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return _from_parser(cp, source)


def _from_parser(cp: configparser.ConfigParser, source: str) -> PipelineConfig:
    parts = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        skip = ("segmentation",) if sec == "tracking" else ()
        parts[sec] = _build(_SECTIONS[sec], dict(cp.items(sec)), f"{source}[{sec}]", skip)
    cfg = PipelineConfig(**parts)
    cfg.tracking = replace(cfg.tracking, segmentation=cfg.segmentation)
    return cfg


def load_config(path) -> PipelineConfig:
    return _from_parser(_read_ini(path), str(path))


def config_to_text(cfg: PipelineConfig) -> str:
    lines = []
    for sec, cls in _SECTIONS.items():
        obj = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        for f in fields(cls):
            if sec == "tracking" and f.name == "segmentation":
                continue
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# scene specs


@dataclass
class SceneConfig:
    preset: str
    options: dict

    def build(self):
        return PRESETS[self.preset](**self.options)


def load_scene_spec(path) -> SceneConfig:
    cp = _read_ini(path)
    if cp.sections() != ["scene"]:
        raise ConfigError(f"{path}: expected exactly one [scene] section")
    items = dict(cp.items("scene"))
    preset = items.pop("preset", None)
    if preset not in PRESETS:
        raise ConfigError(f"{path}: preset must be one of {sorted(PRESETS)}, got {preset!r}")
    sig = inspect.signature(PRESETS[preset])
    opts = {}
    for key, raw in items.items():
        if key not in sig.parameters:
            raise ConfigError(f"{path}: unknown scene key {key!r}")
        opts[key] = _convert(raw, str(sig.parameters[key].annotation), f"{path}[scene].{key}")
    scene = SceneConfig(preset, opts)
    try:
        scene.build()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scene


def scene_spec_text(preset: str, **options) -> str:
    lines = ["[scene]", f"preset = {preset}"] + [f"{k} = {v}" for k, v in options.items()]
    return "\n".join(lines) + "\n"
