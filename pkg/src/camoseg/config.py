"""Dataclass configuration tree, YAML loading and hashing.

Field defaults follow the full-size model; :meth:`Config.desk` returns the
CPU-sized preset that the CLI starts from.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class BackboneConfig:
    kind: str = "toy"
    weights_path: str | None = None
    seed: int = 0
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    decoder_channels: int = 64
    text_dim: int = 64
    num_steps: int = 1000
    # None means num_steps // 2
    timestep: int | None = None
    adapter_layers: list[str] = field(default_factory=list)

    @property
    def feature_timestep(self) -> int:
        return self.num_steps // 2 if self.timestep is None else self.timestep


@dataclass
class MSFFConfig:
    gate_activation: str = "sigmoid"
    # denominator of the fusion scale, 32 -> 1/32
    fusion_scale: int = 32


@dataclass
class MaskGenConfig:
    num_queries: int = 100
    layers: int = 9
    heads: int = 8
    embed_dim: int = 64
    hidden_dim: int = 64
    ffn_dim: int = 256


@dataclass
class CINConfig:
    hidden_factor: int = 2
    confidence_threshold: float = 0.5


@dataclass
class LossConfig:
    alpha: float = 0.4
    noobj_weight: float = 0.1
    dice_smooth: float = 1.0
    tau_init: float = 0.07


@dataclass
class DataConfig:
    root: str = "data"
    image_size: int = 512
    jitter: tuple[float, float] = (0.1, 2.0)
    augment: bool = True
    repeat_threshold: float = 0.001
    min_instances: int = 5
    prompt_ensemble: bool = True


@dataclass
class SynthConfig:
    num_train: int = 8
    num_val: int = 8
    num_categories: int = 3
    instances_per_image: tuple[int, int] = (1, 3)
    image_size: int = 128
    contrast: float = 0.35


DROP_FRACTIONS = (81 / 90, 86 / 90)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    iterations: int = 90_000
    # None scales the published 81k / 86k of 90k to the run length
    lr_drop_points: list[int] | None = None
    lr_drop_factor: float = 0.1
    batch_size: int = 64
    grad_clip: float = 1.0
    seed: int = 0

    def drop_points(self) -> list[int]:
        if self.lr_drop_points is not None:
            return list(self.lr_drop_points)
        return [int(round(self.iterations * f)) for f in DROP_FRACTIONS]


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    msff: MSFFConfig = field(default_factory=MSFFConfig)
    maskgen: MaskGenConfig = field(default_factory=MaskGenConfig)
    cin: CINConfig = field(default_factory=CINConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def desk(cls) -> "Config":
        cfg = cls()
        cfg.maskgen.num_queries = 20
        cfg.maskgen.layers = 6
        cfg.maskgen.heads = 1
        cfg.maskgen.ffn_dim = 128
        cfg.backbone.timestep = 0
        cfg.data.image_size = 128
        cfg.data.augment = False
        cfg.data.min_instances = 1
        cfg.train.iterations = 2000
        cfg.train.batch_size = 4
        cfg.train.learning_rate = 1e-3
        return cfg

    def validate(self) -> "Config":
        if self.backbone.kind not in ("toy", "adapter"):
            raise ConfigError(f"backbone.kind must be 'toy' or 'adapter', got {self.backbone.kind!r}")
        if not 0 <= self.backbone.feature_timestep < self.backbone.num_steps:
            raise ConfigError("backbone.timestep outside the diffusion schedule")
        if self.msff.gate_activation not in ("sigmoid", "identity"):
            raise ConfigError(f"unknown msff.gate_activation {self.msff.gate_activation!r}")
        if self.msff.fusion_scale not in (8, 16, 32):
            raise ConfigError("msff.fusion_scale must be one of 8, 16, 32")
        if self.maskgen.layers < 1:
            raise ConfigError("maskgen.layers must be >= 1")
        if self.maskgen.num_queries < 1:
            raise ConfigError("maskgen.num_queries must be >= 1")
        if self.maskgen.hidden_dim % self.maskgen.heads:
            raise ConfigError("maskgen.hidden_dim must be divisible by maskgen.heads")
        if self.maskgen.embed_dim != self.backbone.text_dim:
            raise ConfigError("maskgen.embed_dim must equal backbone.text_dim (mask embeddings are scored against text)")
        if self.cin.hidden_factor < 1:
            raise ConfigError("cin.hidden_factor must be >= 1")
        if not 0.0 <= self.cin.confidence_threshold <= 1.0:
            raise ConfigError("cin.confidence_threshold must lie in [0, 1]")
        if self.loss.dice_smooth <= 0 or self.loss.tau_init <= 0:
            raise ConfigError("loss.dice_smooth and loss.tau_init must be positive")
        if self.data.image_size % 32:
            raise ConfigError("data.image_size must be divisible by 32")
        lo, hi = self.data.jitter
        if not 0 < lo <= hi:
            raise ConfigError("data.jitter must satisfy 0 < low <= high")
        if not 0 < self.data.repeat_threshold <= 1:
            raise ConfigError("data.repeat_threshold must lie in (0, 1]")
        t = self.train
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        # proportional defaults may coincide on very short runs; explicit points may not
        if t.lr_drop_points is not None:
            drops = list(t.lr_drop_points)
            if any(b <= a for a, b in zip(drops, drops[1:])):
                raise ConfigError("train.lr_drop_points must be strictly increasing")
            if any(d >= t.iterations for d in drops):
                raise ConfigError("train.lr_drop_points must be < train.iterations")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


def _merge(obj: Any, overrides: dict[str, Any], path: str) -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            _merge(current, value, where)
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)


def config_from_dict(overrides: dict[str, Any], base: Config | None = None) -> Config:
    cfg = base if base is not None else Config.desk()
    _merge(cfg, overrides or {}, "")
    return cfg.validate()


def load_config(path: str | Path | None, base: Config | None = None) -> Config:
    if path is None:
        return (base if base is not None else Config.desk()).validate()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {}, base)
