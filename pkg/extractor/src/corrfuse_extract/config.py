"""Extraction configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEDULE_STEPS = 1000

SD_LAYER_STRIDES = {"2": 32, "5": 16, "8": 8}  # image-space stride per hook
SD_LAYER_CHANNELS = {"2": 1280, "5": 960, "8": 480}
DINO_PATCH = 14


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExtractConfig:
    model: str = "sd_unet"  # sd_unet | dino_vit
    backend: str = "procedural"  # procedural | torch
    sd_timestep: int = 100
    sd_layers: tuple[str, ...] = ("2", "5", "8")
    sd_input: int = 960
    dino_input: int = 840
    dino_layer: int = 11
    dino_facet: str = "token"
    device: str = "cpu"
    seed: int = 0
    weights_dir: str | None = None

    def __post_init__(self):
        if self.model not in ("sd_unet", "dino_vit"):
            raise ConfigError(f"model must be sd_unet or dino_vit, got {self.model!r}")
        if not 0 <= self.sd_timestep < SCHEDULE_STEPS:
            raise ConfigError(
                f"sd_timestep {self.sd_timestep} outside schedule range "
                f"[0, {SCHEDULE_STEPS})"
            )
        for tag in self.sd_layers:
            if tag not in SD_LAYER_STRIDES:
                raise ConfigError(f"unknown sd layer tag {tag!r}")
        max_stride = max(SD_LAYER_STRIDES[t] for t in self.sd_layers)
        if self.sd_input % max_stride:
            raise ConfigError(
                f"sd_input {self.sd_input} not divisible by the deepest "
                f"layer stride {max_stride}"
            )
        if self.dino_input % DINO_PATCH:
            raise ConfigError(
                f"dino_input {self.dino_input} not divisible by patch size {DINO_PATCH}"
            )
        if not 0 <= self.dino_layer < 12:
            raise ConfigError(f"dino_layer {self.dino_layer} outside [0, 12)")
        if self.dino_facet != "token":
            raise ConfigError(f"only the 'token' facet is supported, got {self.dino_facet!r}")

    @classmethod
    def from_json_file(cls, path) -> "ExtractConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        known = {
            "model", "backend", "sd_timestep", "sd_layers", "sd_input",
            "dino_input", "dino_layer", "dino_facet", "device", "seed",
            "weights_dir",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config fields {sorted(unknown)}")
        if "sd_layers" in obj:
            obj["sd_layers"] = tuple(str(t) for t in obj["sd_layers"])
        return cls(**obj)
