"""Query-based mask generator: FPN-style pixel decoder and masked-attention transformer decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import FeaturePyramid
from .config import MaskGenConfig
from .errors import ConfigError, ShapeError
from .msff import resample

# Transformer layer l reads intermediate map l % 3, ordered coarse to fine.
SCALE_ORDER = (32, 16, 8)


@dataclass
class PixelDecoderOutput:
    intermediate: list[torch.Tensor]  # scales 1/32, 1/16, 1/8
    per_pixel: torch.Tensor  # 1/4, embed_dim channels


@dataclass
class InstancePredictions:
    mask_logits: torch.Tensor  # B, N, H, W
    embeddings: torch.Tensor  # B, N, D
    confidences: torch.Tensor | None = None  # B, N
    confidence_logits: torch.Tensor | None = None

    @property
    def num_queries(self) -> int:
        return self.mask_logits.shape[1]


def sine_position(h: int, w: int, channels: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, shape (channels, h, w)."""
    n = channels // 4
    freqs = torch.exp(torch.arange(n, dtype=torch.float64) * (-math.log(100.0) / max(n, 1)))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    py = ys[:, None] * freqs[None]  # h, n
    px = xs[:, None] * freqs[None]  # w, n
    pe = torch.zeros(channels, h, w, dtype=torch.float64)
    pe[0:n] = py.sin().T[:, :, None]
    pe[n:2 * n] = py.cos().T[:, :, None]
    pe[2 * n:3 * n] = px.sin().T[:, None, :]
    pe[3 * n:4 * n] = px.cos().T[:, None, :]
    return pe.to(dtype)


def _block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.ReLU())


class PixelDecoder(nn.Module):
    """Upsamples the fused 1/32 map through 1/16 and 1/8 to per-pixel embeddings at 1/4.

    When a feature pyramid is supplied, its 1/16 and 1/8 maps enter through
    1x1 lateral projections, as in an FPN.
    """

    def __init__(self, in_channels: int, hidden: int, embed_dim: int, lateral_channels: dict[str, int] | None = None):
        super().__init__()
        self.hidden = hidden
        self.input_proj = nn.Conv2d(in_channels, hidden, 1)
        self.stage16 = _block(hidden, hidden)
        self.stage8 = _block(hidden, hidden)
        self.stage4 = _block(hidden, hidden)
        self.out = nn.Conv2d(hidden, embed_dim, 1)
        self.lateral = nn.ModuleDict()
        if lateral_channels:
            self.lateral["16"] = nn.Conv2d(lateral_channels["16"], hidden, 1)
            self.lateral["8"] = nn.Conv2d(lateral_channels["8"], hidden, 1)
            self.lateral["decoder"] = nn.Conv2d(lateral_channels["decoder"], hidden, 1)

    def forward(self, fused: torch.Tensor, pyramid: FeaturePyramid | None = None,
                encoder_laterals: bool = True) -> PixelDecoderOutput:
        """``encoder_laterals=False`` keeps only the decoder-final lateral."""
        if fused.dim() != 4:
            raise ShapeError(f"fused map must be (B, C, H, W), got {tuple(fused.shape)}")
        if pyramid is not None:
            h8, w8 = pyramid.decoder_final.shape[-2:]
            fused = resample(fused, (h8 // 4, w8 // 4))
        x32 = self.input_proj(fused)
        h, w = x32.shape[-2:]
        up16 = F.interpolate(x32, size=(2 * h, 2 * w), mode="bilinear", align_corners=False)
        if pyramid is not None and self.lateral and encoder_laterals:
            up16 = up16 + self.lateral["16"](pyramid.encoder_levels[16])
        x16 = self.stage16(up16)
        up8 = F.interpolate(x16, size=(4 * h, 4 * w), mode="bilinear", align_corners=False)
        up8 = up8 + sine_position(4 * h, 4 * w, self.hidden, up8.dtype)
        if pyramid is not None and self.lateral:
            up8 = up8 + self.lateral["decoder"](pyramid.decoder_final)
            if encoder_laterals:
                up8 = up8 + self.lateral["8"](pyramid.encoder_levels[8])
        x8 = self.stage8(up8)
        up4 = F.interpolate(x8, size=(8 * h, 8 * w), mode="bilinear", align_corners=False)
        per_pixel = self.out(self.stage4(up4))
        return PixelDecoderOutput([x32, x16, x8], per_pixel)


class DecoderLayer(nn.Module):
    """Masked cross-attention, then self-attention, then FFN; each post-norm residual."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q: torch.Tensor, memory: torch.Tensor, keys: torch.Tensor,
                blocked: torch.Tensor | None) -> torch.Tensor:
        attn_mask = None
        if blocked is not None:
            attn_mask = blocked.repeat_interleave(self.heads, dim=0)
        q = self.norm1(q + self.cross(q, keys, memory, attn_mask=attn_mask, need_weights=False)[0])
        q = self.norm2(q + self.self_attn(q, q, q, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


def attention_block_mask(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """True where attention is forbidden: outside sigmoid > 0.5, with empty regions reopened."""
    logits = F.interpolate(mask_logits, size=size, mode="bilinear", align_corners=False)
    blocked = (logits.flatten(2) <= 0.0)
    empty = blocked.all(dim=-1, keepdim=True)
    return blocked & ~empty


class TransformerDecoder(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, layers: int):
        super().__init__()
        if layers < 1:
            raise ConfigError("transformer decoder needs at least one layer")
        self.layers = nn.ModuleList([DecoderLayer(dim, heads, ffn_dim) for _ in range(layers)])
        self.level_embed = nn.Parameter(torch.zeros(len(SCALE_ORDER), dim))

    @staticmethod
    def scale_for_layer(layer: int) -> int:
        return SCALE_ORDER[layer % len(SCALE_ORDER)]

    def forward(self, queries: torch.Tensor, pdo: PixelDecoderOutput, mask_fn) -> torch.Tensor:
        """Refine queries (B, N, D). ``mask_fn(queries)`` gives the current mask logits at any resolution."""
        for i, layer in enumerate(self.layers):
            level = i % len(SCALE_ORDER)
            fmap = pdo.intermediate[level]
            h, w = fmap.shape[-2:]
            memory = fmap.flatten(2).transpose(1, 2) + self.level_embed[level]
            keys = memory + sine_position(h, w, fmap.shape[1], fmap.dtype).flatten(1).T
            blocked = attention_block_mask(mask_fn(queries), (h, w))
            queries = layer(queries, memory, keys, blocked)
        return queries


class MaskGenerator(nn.Module):
    def __init__(self, in_channels: int, cfg: MaskGenConfig, lateral_channels: dict[str, int] | None = None):
        super().__init__()
        self.cfg = cfg
        self.pixel_decoder = PixelDecoder(in_channels, cfg.hidden_dim, cfg.embed_dim, lateral_channels)
        self.decoder = TransformerDecoder(cfg.hidden_dim, cfg.heads, cfg.ffn_dim, cfg.layers)
        self.query_feat = nn.Parameter(torch.randn(cfg.num_queries, cfg.hidden_dim))
        self.embed_head = nn.Linear(cfg.hidden_dim, cfg.embed_dim)

    def pixel_decode(self, fused, pyramid=None, encoder_laterals: bool = True) -> PixelDecoderOutput:
        return self.pixel_decoder(fused, pyramid, encoder_laterals)

    def transformer_decode(self, queries, pdo: PixelDecoderOutput) -> torch.Tensor:
        return self.decoder(queries, pdo, lambda q: self._low_res_logits(q, pdo.per_pixel))

    def _low_res_logits(self, queries, per_pixel):
        return torch.einsum("bnd,bdhw->bnhw", self.embed_head(queries), per_pixel)

    def predict_masks(self, queries, per_pixel, image_size: tuple[int, int]) -> InstancePredictions:
        emb = self.embed_head(queries)
        low = torch.einsum("bnd,bdhw->bnhw", emb, per_pixel)
        logits = F.interpolate(low, size=image_size, mode="bilinear", align_corners=False)
        return InstancePredictions(logits, emb)

    def forward(self, fused, pyramid, image_size,
                encoder_laterals: bool = True) -> tuple[InstancePredictions, PixelDecoderOutput]:
        pdo = self.pixel_decode(fused, pyramid, encoder_laterals)
        queries = self.query_feat.unsqueeze(0).expand(fused.shape[0], -1, -1)
        queries = self.transformer_decode(queries, pdo)
        return self.predict_masks(queries, pdo.per_pixel, image_size), pdo
