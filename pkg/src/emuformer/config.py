"""Dataclass configuration tree, YAML loading and ``--set key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


PRESETS: dict[str, dict[str, Any]] = {
    "ref-tiny": dict(widths=(16, 32, 48, 64), depths=(1, 1, 1, 1), embed_dim=32),
    "ref-small": dict(widths=(32, 64, 160, 256), depths=(2, 2, 2, 2), embed_dim=128),
}


@dataclass
class ModelConfig:
    preset: str = "ref-tiny"
    widths: tuple[int, ...] = (16, 32, 48, 64)
    depths: tuple[int, ...] = (1, 1, 1, 1)
    mlp_ratio: int = 2
    dropout: float = 0.0
    num_classes: int = 4
    embed_dim: int = 32
    tasks: str = "both"  # seg | depth | both
    num_heads: int = 1  # decoder heads per task; >1 builds a deep sub-ensemble

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ConfigError("encoder needs exactly 4 stages")
        if self.tasks not in ("seg", "depth", "both"):
            raise ConfigError(f"unknown tasks {self.tasks!r}")
        if self.has_seg and self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 with a segmentation head")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.num_heads < 1:
            raise ConfigError("num_heads must be >= 1")

    @property
    def has_seg(self) -> bool:
        return self.tasks in ("seg", "both")

    @property
    def has_depth(self) -> bool:
        return self.tasks in ("depth", "both")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(preset=name, **{**PRESETS[name], **overrides})


@dataclass
class DataConfig:
    root: str | None = None  # None -> synthetic data
    depth_scale: float = 1000.0
    n_train: int = 160
    n_val: int = 48
    image_size: tuple[int, int] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)


@dataclass
class AugmentConfig:
    enabled: bool = True
    scale_min: float = 0.5
    scale_max: float = 2.0
    crop_h: int = 32
    crop_w: int = 32
    hflip_prob: float = 0.5
    rescale_depth: bool = True

    def __post_init__(self):
        if self.scale_min > self.scale_max or self.scale_min <= 0:
            raise ConfigError("need 0 < scale_min <= scale_max")
        if self.crop_h % 4 or self.crop_w % 4:
            raise ConfigError("crop size must be divisible by 4")


@dataclass
class OptimConfig:
    base_lr: float = 6e-5
    power: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class LossConfig:
    depth_loss: str = "gnll"  # gnll | mse | huber
    huber_delta: float = 1.0
    w1: float = 1.0

    def __post_init__(self):
        if self.depth_loss not in ("gnll", "mse", "huber"):
            raise ConfigError(f"unknown depth loss {self.depth_loss!r}")


@dataclass
class UQConfig:
    method: str = "none"  # none | mcd | dse | de
    samples: int = 10
    members: int = 10
    dropout: float | None = None
    head_selection: str = "round_robin"  # DSE training: round_robin | random
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("none", "mcd", "dse", "de"):
            raise ConfigError(f"unknown uq method {self.method!r}")
        if self.head_selection not in ("round_robin", "random"):
            raise ConfigError(f"unknown head selection {self.head_selection!r}")


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 10.0
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class JitterConfig:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.hue <= 0.5:
            raise ConfigError("hue must lie in [0, 0.5]")


@dataclass
class DistillConfig:
    teacher: list[str] = field(default_factory=list)  # checkpoint paths
    teacher_method: str = "de"  # de | mcd | dse
    teacher_samples: int = 10
    student_init: str = "fresh"  # "fresh" or a checkpoint path
    epochs: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    cache_targets: bool = False
    early_stopping: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.teacher_method not in ("de", "mcd", "dse"):
            raise ConfigError(f"unknown teacher method {self.teacher_method!r}")


@dataclass
class MetricsConfig:
    ece_bins: int = 15
    patch: int | None = None
    eps_depth: float = 1e-3


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    uq: UQConfig = field(default_factory=UQConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0
    dtype: str = "float32"
    threads: int | None = 1


def to_dict(obj) -> dict:
    def convert(v):
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        if isinstance(v, (tuple, list)):
            return [convert(x) for x in v]
        return v

    return convert(dataclasses.asdict(obj))


def from_dict(cls, data: dict | None):
    """Build dataclass ``cls`` from a (possibly partial) nested dict."""
    data = dict(data or {})
    if cls is ModelConfig and "preset" in data:
        data = {**PRESETS.get(data["preset"], {}), **data}
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        sub = _dataclass_type(fields[key])
        kwargs[key] = from_dict(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


def _dataclass_type(f):
    default_factory = f.default_factory
    if default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(default_factory):
        return default_factory
    return None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML) to a nested dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {p!r} of {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> Config:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    data = apply_overrides(data, list(overrides))
    return from_dict(Config, data)


def dump_config(cfg: Config, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)
