"""Running a trained model over images and scoring it against ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cin import score_and_select
from .config import Config
from .data.coco import AnnotatedSample, DatasetIndex
from .data.rle import rle_encode
from .evaluation import EvalResult, GTInstance, ScoredInstance, average_precision
from .model import CamoSegModel
from .pipeline import fit, ordered_map, text_tensor, unfit_mask
from .vocab import TextEmbeddingSet, ensemble_classify


@dataclass
class Detection:
    mask: np.ndarray  # H x W bool, original image size
    confidence: float
    category_id: int
    category_probs: np.ndarray
    query: int


@torch.no_grad()
def detect(model: CamoSegModel, samples: list[AnnotatedSample], tes: TextEmbeddingSet, cfg: Config,
           threshold: float = 0.0, prompt_ensemble: bool | None = None) -> list[list[Detection]]:
    """Detections per sample, most confident first; masks mapped back to each sample's own size."""
    if prompt_ensemble is None:
        prompt_ensemble = cfg.data.prompt_ensemble
    size = cfg.data.image_size
    fitted = [fit(s, size) for s in samples]
    images = torch.stack([torch.from_numpy(np.ascontiguousarray(f.image, dtype=np.float32)).permute(2, 0, 1)
                          for f in fitted])
    text = text_tensor(tes)
    out = model(images, text)
    preds = out.preds
    emb = model.class_embeddings(preds).numpy().astype(np.float64)
    table = tes if prompt_ensemble else tes.single_name()
    if model.switches.no_text:
        table = table.zeroed()
    tau = float(model.tau)
    results = []
    for b, s in enumerate(samples):
        picked = score_and_select(preds.mask_logits[b], preds.confidences[b], threshold)
        dets = []
        for p in picked:
            cat, probs = ensemble_classify(emb[b, p["index"]], table, tau)
            mask = unfit_mask(p["mask"], s.height, s.width, size)
            dets.append(Detection(mask, p["confidence"], cat, probs, p["index"]))
        results.append(dets)
    return results


def predict_index(model: CamoSegModel, index: DatasetIndex, tes: TextEmbeddingSet, cfg: Config,
                  batch_size: int | None = None, prompt_ensemble: bool | None = None):
    """(predictions, ground truth) keyed by image id, ready for :func:`average_precision`."""
    bs = batch_size or cfg.train.batch_size
    preds: dict[int, list[ScoredInstance]] = {}
    gts: dict[int, list[GTInstance]] = {}
    ids = list(range(len(index)))
    for start in range(0, len(ids), bs):
        samples = ordered_map(index.load, ids[start:start + bs])
        for s, dets in zip(samples, detect(model, samples, tes, cfg, 0.0, prompt_ensemble)):
            preds[s.sample_id] = [ScoredInstance(d.mask, d.confidence, d.category_id) for d in dets]
            gts[s.sample_id] = [GTInstance(i.mask, i.category_id, i.iscrowd) for i in s.instances]
    return preds, gts


def evaluate(model: CamoSegModel, index: DatasetIndex, tes: TextEmbeddingSet, cfg: Config,
             class_agnostic: bool = True, prompt_ensemble: bool | None = None) -> EvalResult:
    preds, gts = predict_index(model, index, tes, cfg, prompt_ensemble=prompt_ensemble)
    return average_precision(preds, gts, class_agnostic=class_agnostic)


def detections_json(dets: list[Detection], vocab, image_name: str, height: int, width: int) -> dict:
    return {
        "image": image_name,
        "height": height,
        "width": width,
        "instances": [
            {"query": d.query, "confidence": d.confidence, "category_id": d.category_id,
             "category": vocab.categories[d.category_id].name if d.category_id < len(vocab) else None,
             "segmentation": rle_encode(d.mask)}
            for d in dets
        ],
    }


PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
    [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
], dtype=np.float64) / 255.0


def overlay(image: np.ndarray, dets: list[Detection], alpha: float = 0.5) -> np.ndarray:
    """Blend each detection's mask in a palette colour over ``image`` (H x W x 3 in [0, 1]); returns uint8."""
    out = np.asarray(image, dtype=np.float64).copy()
    for k, d in enumerate(dets):
        colour = PALETTE[k % len(PALETTE)]
        out[d.mask] = (1 - alpha) * out[d.mask] + alpha * colour
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)
