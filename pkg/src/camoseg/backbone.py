"""Frozen feature backbone: diffusion noising, implicit captions, feature pyramids.

Tensors are NCHW throughout. A :class:`FeaturePyramid` holds the encoder
levels keyed by their scale denominator (8, 16, 32) plus the decoder-final
map at 1/8.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import BackboneConfig
from .errors import ConfigError, DomainError, ShapeError

SCALES = (8, 16, 32)


@dataclass(frozen=True)
class DiffusionSchedule:
    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        if len(self.alphas) != len(self.sigmas):
            raise ShapeError("alphas and sigmas must have equal length")

    @property
    def num_steps(self) -> int:
        return len(self.alphas)

    @classmethod
    def linear(cls, num_steps: int) -> "DiffusionSchedule":
        """Variance-preserving schedule with alpha falling linearly from 1 to 0."""
        if num_steps < 1:
            raise DomainError("num_steps must be >= 1")
        alphas = np.linspace(1.0, 0.0, num_steps) if num_steps > 1 else np.ones(1)
        sigmas = np.sqrt(np.clip(1.0 - alphas**2, 0.0, 1.0))
        return cls(alphas, sigmas)


def noise_latent(z, t: int, eps, schedule: DiffusionSchedule):
    """Return ``alpha_t * z + sigma_t * eps`` without touching the inputs."""
    if not 0 <= t < schedule.num_steps:
        raise DomainError(f"timestep {t} outside [0, {schedule.num_steps})")
    if tuple(np.shape(z)) != tuple(np.shape(eps)):
        raise ShapeError(f"latent shape {tuple(np.shape(z))} != noise shape {tuple(np.shape(eps))}")
    return float(schedule.alphas[t]) * z + float(schedule.sigmas[t]) * eps


@dataclass
class FeaturePyramid:
    encoder_levels: dict[int, torch.Tensor]
    decoder_final: torch.Tensor

    def map(self, fn) -> "FeaturePyramid":
        return FeaturePyramid({s: fn(x) for s, x in self.encoder_levels.items()}, fn(self.decoder_final))


def _seed_for(*parts) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


class CaptionCrossAttention(nn.Module):
    """One single-head cross-attention step: pixels query a caption token and a learned null token."""

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(text_dim, channels)
        self.v = nn.Linear(text_dim, channels)
        self.out = nn.Linear(channels, channels)
        self.null = nn.Parameter(torch.zeros(text_dim))

    def forward(self, x: torch.Tensor, caption: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = torch.stack([caption, self.null.expand_as(caption)], dim=1)  # B, 2, D
        q = self.q(x.flatten(2).transpose(1, 2))  # B, HW, C
        k, v = self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) / c**0.5, dim=-1)
        y = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + y


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ToyBackbone(nn.Module):
    """Seeded, frozen strided-conv stand-in for the diffusion U-Net and captioner."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        c8, c16, c32 = cfg.encoder_channels
        d = cfg.text_dim
        self.schedule = DiffusionSchedule.linear(cfg.num_steps)
        self.caption_proj = nn.Linear(3 * 8 * 8, d)
        self.stem = nn.Sequential(_conv(3, 16, 2), nn.GELU(), _conv(16, c8, 2), nn.GELU(), _conv(c8, c8, 2), nn.GELU())
        self.down16 = nn.Sequential(_conv(c8, c16, 2), nn.GELU())
        self.down32 = nn.Sequential(_conv(c16, c32, 2), nn.GELU())
        self.xattn = nn.ModuleList([CaptionCrossAttention(c, d) for c in (c8, c16, c32)])
        self.dec_lateral = nn.Conv2d(c8, cfg.decoder_channels, 1)
        self.dec_top = nn.Conv2d(c32, cfg.decoder_channels, 1)
        self.dec_out = _conv(cfg.decoder_channels, cfg.decoder_channels, 1)
        self._init_weights(cfg.seed)
        self.requires_grad_(False)
        self.eval()

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("null"):
                p.data.normal_(0.0, 1.0, generator=gen)
            elif p.dim() > 1:
                fan_in = p[0].numel()
                p.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            else:
                p.data.uniform_(-0.1, 0.1, generator=gen)

    @property
    def channel_spec(self) -> dict[str, int]:
        c8, c16, c32 = self.cfg.encoder_channels
        return {"8": c8, "16": c16, "32": c32, "decoder": self.cfg.decoder_channels}

    @staticmethod
    def _check_image(image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-1] == 0 or image.shape[-2] == 0:
            raise ShapeError(f"expected a (B, 3, H, W) image, got {tuple(image.shape)}")
        return image

    def implicit_caption(self, image: torch.Tensor) -> torch.Tensor:
        """Unit-norm text-space embedding computed from the image itself."""
        image = self._check_image(image)
        pooled = F.adaptive_avg_pool2d(image * 2.0 - 1.0, 8).flatten(1)
        return F.normalize(torch.tanh(self.caption_proj(pooled)), dim=-1, eps=1e-12)

    def _noise(self, shape) -> torch.Tensor:
        gen = torch.Generator().manual_seed(_seed_for(self.cfg.seed, "eps", *shape))
        return torch.randn(shape, generator=gen)

    def extract_features(self, image: torch.Tensor, caption: torch.Tensor, t: int | None = None) -> FeaturePyramid:
        image = self._check_image(image)
        t = self.cfg.feature_timestep if t is None else t
        if caption.dim() == 1:
            caption = caption.expand(image.shape[0], -1)
        z = image * 2.0 - 1.0
        z = noise_latent(z, t, self._noise(tuple(z.shape)).to(z.dtype), self.schedule)
        x8 = self.xattn[0](self.stem(z), caption)
        x16 = self.xattn[1](self.down16(x8), caption)
        x32 = self.xattn[2](self.down32(x16), caption)
        top = F.interpolate(self.dec_top(x32), size=x8.shape[-2:], mode="bilinear", align_corners=False)
        dec = self.dec_out(F.gelu(top + self.dec_lateral(x8)))
        return FeaturePyramid({8: x8, 16: x16, 32: x32}, dec)

    def forward(self, image: torch.Tensor, zero_caption: bool = False):
        caption = self.implicit_caption(image)
        if zero_caption:
            caption = torch.zeros_like(caption)
        return self.extract_features(image, caption)


class AdapterBackbone(nn.Module):
    """Wraps an external TorchScript module exposing ``implicit_caption`` and ``extract_features``.

    The scripted ``extract_features(image, caption, t)`` must return the three
    encoder maps (1/8, 1/16, 1/32) followed by the decoder-final map.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if not cfg.weights_path:
            raise ConfigError("backbone.kind 'adapter' requires backbone.weights_path")
        self.cfg = cfg
        try:
            self.module = torch.jit.load(cfg.weights_path)
        except (OSError, RuntimeError) as exc:
            raise ConfigError(f"cannot load adapter weights {cfg.weights_path}: {exc}") from exc
        self.module.eval()
        self.requires_grad_(False)

    channel_spec = ToyBackbone.channel_spec

    def implicit_caption(self, image: torch.Tensor) -> torch.Tensor:
        image = ToyBackbone._check_image(image)
        return F.normalize(self.module.implicit_caption(image), dim=-1, eps=1e-12)

    def extract_features(self, image, caption, t: int | None = None) -> FeaturePyramid:
        image = ToyBackbone._check_image(image)
        t = self.cfg.feature_timestep if t is None else t
        if caption.dim() == 1:
            caption = caption.expand(image.shape[0], -1)
        l8, l16, l32, dec = self.module.extract_features(image, caption, t)
        spec = self.channel_spec
        got = {"8": l8.shape[1], "16": l16.shape[1], "32": l32.shape[1], "decoder": dec.shape[1]}
        if got != spec:
            raise ConfigError(f"adapter channel spec {got} does not match config {spec}")
        return FeaturePyramid({8: l8, 16: l16, 32: l32}, dec)

    forward = ToyBackbone.forward


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "toy":
        return ToyBackbone(cfg)
    if cfg.kind == "adapter":
        return AdapterBackbone(cfg)
    raise ConfigError(f"unknown backbone.kind {cfg.kind!r}")
