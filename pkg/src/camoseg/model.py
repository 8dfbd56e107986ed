"""End-to-end wiring of backbone, fusion, mask generation, aggregation and normalisation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import FeaturePyramid, build_backbone
from .cin import CIN, CINOutput
from .config import Config
from .errors import ConfigError
from .maskgen import InstancePredictions, MaskGenerator, PixelDecoderOutput
from .msff import MSFF, resample
from .tva import TVA, TextualVisualRepresentation

SWITCHES = ("no_text", "skip_msff", "skip_cin", "skip_tva")


@dataclass(frozen=True)
class Switches:
    no_text: bool = False
    skip_msff: bool = False
    skip_cin: bool = False
    skip_tva: bool = False

    @classmethod
    def parse(cls, names) -> "Switches":
        names = list(names or ())
        unknown = [n for n in names if n not in SWITCHES]
        if unknown:
            raise ConfigError(f"unknown ablation switch(es) {unknown}; choose from {list(SWITCHES)}")
        return cls(**{n: True for n in names})

    def describe(self) -> str:
        parts = {
            "no_text": "text and caption embeddings replaced by zeros",
            "skip_msff": "only decoder-final features reach the mask generator (projected to 1/32), no encoder laterals",
            "skip_cin": "final masks = coarse masks, confidence = 1 - p(no object)",
            "skip_tva": "raw dot-product weighting, no mean-normalisation filter",
        }
        active = [parts[n] for n in SWITCHES if getattr(self, n)]
        return "; ".join(active) if active else "full setting"


@dataclass
class ModelOutput:
    preds: InstancePredictions
    coarse_logits: torch.Tensor
    fused: torch.Tensor
    tva: TextualVisualRepresentation
    cin: CINOutput | None
    pdo: PixelDecoderOutput = field(repr=False)


class CamoSegModel(nn.Module):
    def __init__(self, cfg: Config, switches: Switches = Switches()):
        super().__init__()
        self.cfg = cfg
        self.switches = switches
        torch.manual_seed(cfg.train.seed)
        self.backbone = build_backbone(cfg.backbone)
        enc = cfg.backbone.encoder_channels
        self.msff = MSFF(enc, cfg.backbone.decoder_channels, cfg.msff)
        c_cat = self.msff.out_channels
        lateral = {"16": enc[1], "8": enc[0], "decoder": cfg.backbone.decoder_channels}
        self.maskgen = MaskGenerator(c_cat, cfg.maskgen, lateral)
        self.tva = TVA(cfg.backbone.text_dim, c_cat)
        self.cin = CIN(c_cat, cfg.cin.hidden_factor)
        self.noobj = nn.Parameter(torch.randn(cfg.backbone.text_dim) / math.sqrt(cfg.backbone.text_dim))
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.loss.tau_init)))

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def class_matrix(self, text: torch.Tensor) -> torch.Tensor:
        """Text rows plus the normalised no-object row used for classification."""
        return torch.cat([text, F.normalize(self.noobj, dim=0)[None]], dim=0)

    def class_embeddings(self, preds: InstancePredictions) -> torch.Tensor:
        return F.normalize(preds.embeddings, dim=-1)

    def forward(self, images: torch.Tensor, text: torch.Tensor) -> ModelOutput:
        """``images`` (B, 3, H, W) in [0, 1]; ``text`` (|C|, D) unit rows."""
        sw = self.switches
        if sw.no_text:
            text = torch.zeros_like(text)
        with torch.no_grad():
            caption = self.backbone.implicit_caption(images)
            if sw.no_text:
                caption = torch.zeros_like(caption)
            pyramid: FeaturePyramid = self.backbone.extract_features(images, caption)
        fused = self.msff(pyramid, skip=sw.skip_msff)
        preds, pdo = self.maskgen(fused, pyramid, images.shape[-2:], encoder_laterals=not sw.skip_msff)
        coarse = preds.mask_logits
        feats8 = resample(fused, pyramid.decoder_final.shape[-2:])
        tva = self.tva(preds.embeddings, text, feats8, simplified=sw.skip_tva)
        if sw.skip_cin:
            probs = torch.softmax(self.class_embeddings(preds) @ self.class_matrix(text).T / self.tau, dim=-1)
            preds.confidences = 1.0 - probs[..., -1]
            return ModelOutput(preds, coarse, fused, tva, None, pdo)
        out = self.cin.forward_factored(tva.attention_filtered, tva.features, coarse)
        final = InstancePredictions(out.final_mask_logits, preds.embeddings, out.confidence, out.confidence_logit)
        return ModelOutput(final, coarse, fused, tva, out, pdo)
