"""Pipeline configuration: defaults, JSON loading, strict validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .features import FeatureConfig
from .robust import RansacConfig
from .stereo import StereoConfig

DEFAULT_MESH_SIZE = 2 ** 12
DEFAULT_DISH_AREA_PX = 2 ** 17


@dataclass
class CardConfig:
    pattern_path: str | None = None
    physical_width_mm: float = 85.6

    def __post_init__(self):
        if self.physical_width_mm <= 0:
            raise ValueError("physical_width_mm must be positive")


@dataclass
class PipelineConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    stereo: StereoConfig = field(default_factory=StereoConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    reference_card: CardConfig = field(default_factory=CardConfig)
    mesh_size: int = DEFAULT_MESH_SIZE
    dish_area_px: int = DEFAULT_DISH_AREA_PX
    distinctiveness_ratio: float = 1.1
    dish_bottom_height_mm: float = 10.0
    margin_px: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.mesh_size < 16:
            raise ValueError("mesh_size must be at least 16")
        if self.dish_area_px < 1024:
            raise ValueError("dish_area_px must be at least 1024")
        if self.distinctiveness_ratio < 1.0:
            raise ValueError("distinctiveness_ratio must be >= 1")
        if self.dish_bottom_height_mm < 0:
            raise ValueError("dish_bottom_height_mm must be >= 0")
        if self.margin_px < 0:
            raise ValueError("margin_px must be >= 0")

    def to_json_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(
            f"unknown config key(s) {sorted(unknown)} under '{path}'")
    return cls(**data)


def config_from_dict(data: dict) -> PipelineConfig:
    """Strict construction: unknown keys anywhere are rejected."""
    data = dict(data)
    sub = {}
    for key, cls in (("ransac", RansacConfig), ("stereo", StereoConfig),
                     ("features", FeatureConfig),
                     ("reference_card", CardConfig)):
        if key in data:
            block = data.pop(key)
            if not isinstance(block, dict):
                raise ValueError(f"config key '{key}' must be an object")
            sub[key] = _build(cls, block, key)
    cfg = _build(PipelineConfig, data, "<root>")
    for key, value in sub.items():
        setattr(cfg, key, value)
    return cfg


def load_config(path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text()))
