"""Camouflaged instance normalisation: per-instance affine modulation and existence confidence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DomainError
from .msff import resample
from .tva import mask_pool

IN_EPS = 1e-5


@dataclass
class CINOutput:
    final_mask_logits: torch.Tensor  # B, N, H, W
    confidence: torch.Tensor  # B, N
    confidence_logit: torch.Tensor
    gamma: torch.Tensor
    beta: torch.Tensor
    instance_vector: torch.Tensor


def binarize_to(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resample mask probabilities to ``size`` and threshold at 0.5."""
    probs = resample(torch.sigmoid(mask_logits.detach()), size)
    return probs > 0.5


def instance_norm(x: torch.Tensor, eps: float = IN_EPS) -> torch.Tensor:
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class CIN(nn.Module):
    def __init__(self, channels: int, hidden_factor: int = 2):
        super().__init__()
        hidden = channels * hidden_factor
        self.proj = nn.Linear(channels, hidden)
        self.gamma = nn.Linear(hidden, hidden)
        self.beta = nn.Linear(hidden, hidden)
        self.residual = nn.Linear(hidden, 1)
        self.confidence = nn.Linear(hidden, 1)
        nn.init.normal_(self.gamma.weight, std=0.01)
        nn.init.ones_(self.gamma.bias)
        nn.init.normal_(self.beta.weight, std=0.01)
        nn.init.zeros_(self.beta.bias)
        # zero residual head: final masks start equal to the coarse masks
        nn.init.zeros_(self.residual.weight)
        nn.init.zeros_(self.residual.bias)

    def forward(self, tva_map: torch.Tensor, coarse_logits: torch.Tensor) -> CINOutput:
        """Reference path on a materialised ``tva_map`` (B, N, C, h, w); ``coarse_logits`` (B, N, H, W)."""
        h, w = tva_map.shape[-2:]
        x = self.proj(tva_map.movedim(2, -1)).movedim(-1, 2)  # B, N, Ch, h, w
        v = mask_pool(x, binarize_to(coarse_logits, (h, w)))
        gamma, beta = self.gamma(v), self.beta(v)
        mod = gamma[..., None, None] * instance_norm(x) + beta[..., None, None]
        res = self.residual(mod.movedim(2, -1)).squeeze(-1)  # B, N, h, w
        return self._finish(res, coarse_logits, gamma, beta, v)

    def forward_factored(self, attention: torch.Tensor, features: torch.Tensor,
                         coarse_logits: torch.Tensor) -> CINOutput:
        """Same result as :meth:`forward` on ``attention[:, :, None] * features[:, None]``.

        Because that map is rank-one per instance, the projection, pooling,
        normalisation statistics and the 1x1 residual reduce to matmuls
        against the projected features, never materialising (B, N, Ch, h, w).
        """
        b, n, h, w = attention.shape
        p = h * w
        a = attention.flatten(2)  # B, N, P
        g = torch.einsum("oc,bcp->bop", self.proj.weight, features.flatten(2))  # B, Ch, P
        bias = self.proj.bias
        m = binarize_to(coarse_logits, (h, w)).flatten(2).to(a.dtype)
        count = m.sum(-1, keepdim=True)
        v = (m * a) @ g.transpose(1, 2) / count.clamp(min=1.0) + bias * (count > 0)
        gamma, beta = self.gamma(v), self.beta(v)
        g64, a64 = g.double(), a.double()
        mean_ag = a64 @ g64.transpose(1, 2) / p  # B, N, Ch
        var = ((a64 * a64) @ (g64 * g64).transpose(1, 2) / p - mean_ag**2).clamp(min=0.0)
        inv_std = torch.rsqrt(var + IN_EPS).to(a.dtype)
        mean = mean_ag.to(a.dtype) + bias
        wr = self.residual.weight[0]
        k = wr * gamma * inv_std  # B, N, Ch
        const = (k * (bias - mean)).sum(-1) + (wr * beta).sum(-1) + self.residual.bias
        res = a * (k @ g) + const[..., None]
        return self._finish(res.view(b, n, h, w), coarse_logits, gamma, beta, v)

    def _finish(self, res, coarse_logits, gamma, beta, v) -> CINOutput:
        res = F.interpolate(res, size=coarse_logits.shape[-2:], mode="bilinear", align_corners=False)
        final = coarse_logits + res
        conf_logit = self.confidence(v).squeeze(-1)
        return CINOutput(final, torch.sigmoid(conf_logit), conf_logit, gamma, beta, v)


def score_and_select(mask_logits, confidences, threshold: float) -> list[dict]:
    """Keep instances with confidence >= threshold, most confident first (ties by index).

    Operates on one image: ``mask_logits`` (N, H, W), ``confidences`` (N,).
    """
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {threshold}")
    conf = np.asarray(torch.as_tensor(confidences).detach().cpu(), dtype=np.float64)
    logits = torch.as_tensor(mask_logits).detach().cpu()
    order = np.argsort(-conf, kind="stable")
    return [
        {"index": int(i), "confidence": float(conf[i]), "mask": (logits[i] > 0).numpy()}
        for i in order
        if conf[i] >= threshold
    ]
