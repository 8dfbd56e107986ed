"""Textual-visual aggregation.

Each instance's mask embedding is scored against every text embedding; the
softmax weights mix the text embeddings into one context vector, which is
projected into the fused-feature space and correlated with every position.
Mean-normalisation (subtract spatial mean, clamp at zero) keeps only the
above-average responses, and the surviving attention reweights the features.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass
class TextualVisualRepresentation:
    features: torch.Tensor  # B, C, h, w
    attention_raw: torch.Tensor  # B, N, h, w
    attention_filtered: torch.Tensor  # B, N, h, w
    weights: torch.Tensor  # B, N, |C|

    @property
    def per_instance_map(self) -> torch.Tensor:
        """Filtered attention times features, (B, N, C, h, w). Materialised on demand."""
        return self.attention_filtered.unsqueeze(2) * self.features.unsqueeze(1)


def mask_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean feature vector over the foreground of a binary mask; zero when the mask is empty.

    ``features`` is (..., C, h, w) and ``mask`` is (..., h, w) with matching
    leading dims, or broadcastable against them.
    """
    if features.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape[-2:])} does not match features {tuple(features.shape[-2:])}")
    m = mask.to(features.dtype).unsqueeze(-3)
    total = (features * m).sum(dim=(-2, -1))
    count = m.sum(dim=(-2, -1))
    return total / count.clamp(min=1.0)


def mean_filter(raw: torch.Tensor) -> torch.Tensor:
    """Subtract the spatial mean and zero everything that falls at or below it."""
    centred = raw - raw.mean(dim=(-2, -1), keepdim=True)
    return torch.where(centred > 0, centred, torch.zeros_like(centred))


class TVA(nn.Module):
    def __init__(self, text_dim: int, feature_channels: int):
        super().__init__()
        self.text_dim = text_dim
        self.proj = nn.Linear(text_dim, feature_channels)

    def forward(self, mask_embeddings: torch.Tensor, text: torch.Tensor, features: torch.Tensor,
                simplified: bool = False) -> TextualVisualRepresentation:
        """``mask_embeddings`` (B, N, D), ``text`` (|C|, D), ``features`` (B, C, h, w).

        ``simplified`` replaces the softmax weighting with raw dot products and
        skips the mean-normalisation filter.
        """
        if text.shape[0] == 0:
            raise ConfigError("aggregation needs at least one text embedding")
        if text.shape[-1] != mask_embeddings.shape[-1]:
            raise ShapeError("mask and text embeddings differ in dimension")
        scores = mask_embeddings @ text.T
        if simplified:
            weights = scores
        else:
            weights = torch.softmax(scores / mask_embeddings.shape[-1] ** 0.5, dim=-1)
        context = weights @ text  # B, N, D
        key = self.proj(context)  # B, N, C
        raw = torch.einsum("bnc,bchw->bnhw", key, features)
        filtered = raw if simplified else mean_filter(raw)
        return TextualVisualRepresentation(features, raw, filtered, weights)
