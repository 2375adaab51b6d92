"""Flat INI-style configuration for scenes, sampling, fusion, and training.

Files use key=value lines under the sections grid, camera, scene, augment,
sampler, fusion, and train. Any value can be overridden on the command line
with section.key=value strings.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .fusion import FusionConfig
from .geometry import GridSpec


@dataclass
class GridCfg:
    x0: float = 2.0
    y0: float = -3.2
    z0: float = -3.2
    sx: float = 0.4
    sy: float = 0.4
    sz: float = 0.4
    nx: int = 16
    ny: int = 16
    nz: int = 16

    def spec(self):
        return GridSpec((self.x0, self.y0, self.z0), (self.sx, self.sy, self.sz), (self.nx, self.ny, self.nz))


@dataclass
class CameraCfg:
    fx: float = 50.0
    fy: float = 50.0
    cx: float = 32.0
    cy: float = 32.0
    image_h: int = 64
    image_w: int = 64
    stride: int = 4
    tx: float = 0.05
    ty: float = -0.05
    tz: float = 0.1


@dataclass
class SceneCfg:
    objects: int = 2
    points_per_object: int = 40
    background_points: int = 12
    channels: int = 16
    feature_source: str = "random"  # random (smoothed seeded noise) | pattern
    seed: int = 7


@dataclass
class AugmentCfg:
    enabled: bool = False
    flip: bool = False
    rescale: float = 1.0
    rotate: float = 0.0
    sample_db: str = ""  # directory of stored objects for copy-paste
    reproject_only: bool = False  # asymmetric-rig mode: no image-level ops


@dataclass
class SamplerCfg:
    mode: str = "density"  # uniformity | density | sparsity | importance
    window: int = 16
    rays: int = 48


@dataclass
class TrainCfg:
    steps: int = 200
    lr: float = 0.2
    scenes: int = 4
    threads: int = 1


@dataclass
class PipelineConfig:
    grid: GridCfg = field(default_factory=GridCfg)
    camera: CameraCfg = field(default_factory=CameraCfg)
    scene: SceneCfg = field(default_factory=SceneCfg)
    augment: AugmentCfg = field(default_factory=AugmentCfg)
    sampler: SamplerCfg = field(default_factory=SamplerCfg)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainCfg = field(default_factory=TrainCfg)


_SECTIONS = ("grid", "camera", "scene", "augment", "sampler", "fusion", "train")


def _coerce(current, raw):
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        return float(raw)  # optional numeric knobs (e.g. fusion sigma)
    return raw


def _set_key(cfg, section, key, raw):
    part = getattr(cfg, section, None)
    if part is None or section not in _SECTIONS:
        raise KeyError(f"unknown config section {section!r}")
    if key not in {f.name for f in fields(part)}:
        raise KeyError(f"unknown key {key!r} in section [{section}]")
    setattr(part, key, _coerce(getattr(part, key), raw))


def load_config(path=None, overrides=()):
    """Build a PipelineConfig from an optional INI file plus overrides."""
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(path)
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set_key(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        _set_key(cfg, section.strip(), key.strip(), raw)
    cfg.fusion.__post_init__()
    return cfg


def dump_config(cfg):
    """Render the config back to INI text."""
    lines = []
    for section in _SECTIONS:
        part = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(part):
            value = getattr(part, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
