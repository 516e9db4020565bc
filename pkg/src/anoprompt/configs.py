"""Run configuration: schema, validation, presets, hashing.

Defaults reproduce the reference training recipe (60 epochs, batch 1,
SGD momentum 0.9 / weight decay 1e-5, prompt lr 0.001, decoder lr 0.0002,
warmup from zero, prompt depth 9, context lengths 3/3, 480 -> 4x240 crop
scheme, memory layers 7-10). A YAML file maps onto :class:`RunConfig`
fields one-to-one; unknown keys are schema errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .prompting import COUPLING_MODES

DATASET_ROOT_ENV = "ANOPROMPT_DATA_ROOT"

ALIGNMENT_MODES = ("weighted", "mean", "off")
BACKBONE_PRESETS = ("tiny", "vit_b16_plus_240")


@dataclass
class RunConfig:
    # data
    dataset_root: str | None = None
    categories: list | None = None
    k: int = 1
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # view geometry
    base_size: int = 480
    view_size: int = 240
    # backbone
    backbone: str = "vit_b16_plus_240"
    weights_path: str | None = None
    merges_path: str | None = None
    tiny_text_dim: int = 48
    tiny_vision_dim: int = 64
    tiny_text_layers: int = 3
    tiny_vision_layers: int = 4
    tiny_heads: int = 4
    tiny_patch_size: int = 8
    tiny_backbone_seed: int = 0
    # prompts
    text_len: int = 3
    vision_len: int = 3
    prompt_depth: int = 9
    n_views: int = 4
    coupling: str = "bidirectional"
    use_view_signal: bool = True
    state_word: str = "abnormal"
    per_class: bool = False
    # anomaly simulation
    enable_pixel_anomalies: bool = True
    enable_latent_anomalies: bool = True
    latent_mu: float = 0.0
    latent_sigma: float = 0.015
    latent_smoothing: float = 0.003
    texture_dir: str | None = None
    # training
    epochs: int = 60
    batch_size: int = 1
    lr_prompts: float = 1e-3
    lr_decoder: float = 2e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.1
    # losses
    dice_smooth: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    align_temperature: float = 2.0
    alignment: str = "weighted"
    # memory / scoring
    memory_layers: list = field(default_factory=lambda: [7, 8, 9, 10])
    use_memory: bool = True
    memory_pre_prompt: bool = False
    # output
    output_dir: str = "runs/run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONE_PRESETS:
            raise ConfigError(f"backbone must be one of {BACKBONE_PRESETS}, got {self.backbone!r}")
        if self.coupling not in COUPLING_MODES:
            raise ConfigError(f"coupling must be one of {COUPLING_MODES}, got {self.coupling!r}")
        if self.alignment not in ALIGNMENT_MODES:
            raise ConfigError(f"alignment must be one of {ALIGNMENT_MODES}, got {self.alignment!r}")
        if self.base_size != 2 * self.view_size:
            raise ConfigError(
                f"base_size ({self.base_size}) must be twice view_size ({self.view_size})"
            )
        if self.backbone == "vit_b16_plus_240" and self.view_size != 240:
            raise ConfigError("the ViT-B/16+ backbone expects view_size 240")
        if self.backbone == "tiny" and self.view_size % self.tiny_patch_size != 0:
            raise ConfigError(
                f"view_size {self.view_size} must be a multiple of the tiny patch size "
                f"{self.tiny_patch_size}"
            )
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported (the reference recipe)")
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.prompt_depth < 1:
            raise ConfigError(f"prompt_depth must be >= 1, got {self.prompt_depth}")
        if self.n_views != 4:
            raise ConfigError("the quadrant tiling scheme fixes n_views at 4")
        if not self.seeds:
            raise ConfigError("seeds list must be non-empty")
        if not self.memory_layers and self.use_memory:
            raise ConfigError("memory_layers must be non-empty when use_memory is set")

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with path.open() as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file must hold a mapping: {path}")
        return cls.from_dict(data)

    def resolved_dataset_root(self) -> str | None:
        return self.dataset_root or os.environ.get(DATASET_ROOT_ENV)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings on top of a config (values parsed as YAML)."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in data:
            raise ConfigError(f"unknown config key in override: {key}")
        data[key] = yaml.safe_load(raw)
    return RunConfig.from_dict(data)


def tiny_run_config(**kwargs) -> RunConfig:
    """Desk-scale preset: tiny backbone, 64px views, shallow prompts."""
    base = dict(
        backbone="tiny",
        view_size=64,
        base_size=128,
        text_len=2,
        vision_len=2,
        prompt_depth=2,
        memory_layers=[3, 4],
        epochs=60,
        seeds=[0],
        warmup_fraction=0.1,
    )
    base.update(kwargs)
    return RunConfig(**base)
