"""Dataclass configs with strict JSON round-tripping (unknown keys are rejected)."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any

ATTENTION_ORDERS = ("temporal_first", "spatial_first", "spatial_only", "temporal_plain")
TEMPORAL_ADAPTERS = ("fusion", "crossframe", "bifurcated", "conv3d")
KERNEL_TYPES = ("gaussian", "bilateral", "laplacian")
FFM_TRANSFORMS = ("wavelet", "fourier", "none")


class ConfigError(ValueError):
    pass


@dataclass
class KernelConfig:
    type: str = "gaussian"
    sigma: float = 1.0
    window: int = 5
    normalized: bool = True
    sigma_intensity: float = 0.1  # bilateral only

    def validate(self) -> None:
        if self.type not in KERNEL_TYPES:
            raise ConfigError(f"kernel.type must be one of {KERNEL_TYPES}, got {self.type!r}")
        if self.sigma <= 0 or self.sigma_intensity <= 0:
            raise ConfigError("kernel sigmas must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"kernel.window must be odd and >= 1, got {self.window}")


@dataclass
class FacTConfig:
    enabled: bool = True
    rank: int = 4
    shared: bool = True


@dataclass
class ModelConfig:
    embed_dim: int = 32
    depth: int = 4
    patch_size: int = 8
    num_classes: int = 3
    in_channels: int = 1
    frames: int = 8
    image_size: tuple[int, int] = (64, 64)
    heads: int = 1
    mlp_ratio: int = 4
    adapter_dim: int = 4
    cross_dim: int = 8
    ffm_enabled: bool = True
    ffm_transform: str = "wavelet"
    ffm_channels: tuple[int, int, int, int] = (8, 8, 8, 8)
    attention_order: str = "temporal_first"
    temporal_adapter: str = "fusion"
    multiscale: bool = True
    kernel: KernelConfig = field(default_factory=KernelConfig)
    fact: FacTConfig = field(default_factory=FacTConfig)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def decoder_widths(self) -> tuple[int, int, int, int]:
        d = self.embed_dim
        return (d, max(d // 2, 1), max(d // 4, 1), max(d // 8, 1))

    def validate(self) -> None:
        h, w = self.image_size
        if self.depth < 4 or self.depth % 4:
            raise ConfigError(f"depth must be a positive multiple of 4, got {self.depth}")
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image {h}x{w} not divisible by patch_size {self.patch_size}")
        up = math.log2(self.patch_size)
        if up != int(up) or not 0 <= up <= 4:
            raise ConfigError(f"patch_size must be a power of two <= 16, got {self.patch_size}")
        if h % 2 or w % 2:
            raise ConfigError(f"image size must be even, got {h}x{w}")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.attention_order not in ATTENTION_ORDERS:
            raise ConfigError(f"attention_order must be one of {ATTENTION_ORDERS}")
        if self.temporal_adapter not in TEMPORAL_ADAPTERS:
            raise ConfigError(f"temporal_adapter must be one of {TEMPORAL_ADAPTERS}")
        if self.ffm_transform not in FFM_TRANSFORMS:
            raise ConfigError(f"ffm_transform must be one of {FFM_TRANSFORMS}")
        if len(self.ffm_channels) != 4:
            raise ConfigError("ffm_channels needs four entries")
        if self.fact.rank < 1 or self.fact.rank > self.embed_dim:
            raise ConfigError(f"fact.rank must lie in [1, embed_dim], got {self.fact.rank}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        self.kernel.validate()


@dataclass
class AugmentConfig:
    flip: bool = True
    scale: bool = True
    contrast: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.8, 1.25)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    pretrain_epochs: int = 0
    batch_size: int = 2
    clip_len: int = 8
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    val_every: int = 1

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("batch_size >= 1 and non-negative epoch counts required")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    out: str = ""

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.model.frames != self.train.clip_len:
            raise ConfigError(
                f"model.frames ({self.model.frames}) must equal train.clip_len ({self.train.clip_len})"
            )


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def from_dict(cls, data: dict[str, Any]):
    """Build dataclass ``cls`` from ``data``; unknown keys raise ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = from_dict(type(current), value)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def set_key(cfg, dotted: str, raw: str) -> None:
    """Override ``a.b.c`` on a config tree from a string, parsed as JSON when possible."""
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not hasattr(node, p):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = getattr(node, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(node) or leaf not in {f.name for f in dataclasses.fields(node)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        value = raw
    current = getattr(node, leaf)
    if dataclasses.is_dataclass(current):
        value = from_dict(type(current), value)
    elif isinstance(current, tuple):
        value = tuple(value)
    elif isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, float) and isinstance(value, int):
        value = float(value)
    setattr(node, leaf, value)


def load_run_config(path: str) -> RunConfig:
    with open(path) as fh:
        return from_dict(RunConfig, json.load(fh))


def dump_run_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
