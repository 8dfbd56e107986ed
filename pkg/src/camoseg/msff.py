"""Multi-scale feature fusion: gated concatenation of encoder levels plus the projected decoder map."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import SCALES, FeaturePyramid
from .config import MSFFConfig
from .errors import ShapeError


def resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average when shrinking, bilinear when enlarging, identity otherwise."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    if h >= size[0] and w >= size[1]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class MSFF(nn.Module):
    def __init__(self, encoder_channels, decoder_channels: int, cfg: MSFFConfig | None = None):
        super().__init__()
        self.cfg = cfg or MSFFConfig()
        self.out_channels = sum(encoder_channels)
        self.gate = nn.Conv2d(self.out_channels, self.out_channels, 1)
        self.dec_proj = nn.Conv2d(decoder_channels, self.out_channels, 1)

    def target_size(self, pyramid: FeaturePyramid) -> tuple[int, int]:
        h8, w8 = pyramid.decoder_final.shape[-2:]
        f = self.cfg.fusion_scale // 8
        return (h8 // f, w8 // f)

    def project_decoder(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return resample(self.dec_proj(pyramid.decoder_final), self.target_size(pyramid))

    def forward(self, pyramid: FeaturePyramid, skip: bool = False) -> torch.Tensor:
        missing = [s for s in SCALES if s not in pyramid.encoder_levels]
        if missing:
            raise ShapeError(f"feature pyramid is missing levels {missing}")
        d = self.project_decoder(pyramid)
        if skip:
            return d
        size = self.target_size(pyramid)
        x = torch.cat([resample(pyramid.encoder_levels[s], size) for s in SCALES], dim=1)
        g = self.gate(x)
        if self.cfg.gate_activation == "sigmoid":
            g = torch.sigmoid(g)
        return g * x + d
