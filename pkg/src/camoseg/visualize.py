"""Feature-map clustering and attention-map rendering."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .config import Config
from .data.coco import AnnotatedSample
from .errors import DomainError
from .inference import PALETTE
from .model import CamoSegModel
from .pipeline import fit, text_tensor
from .vocab import TextEmbeddingSet

KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


@dataclass
class KMeansResult:
    labels: np.ndarray  # P
    centers: np.ndarray  # k' x D, k' <= k once duplicates merge
    iterations: int
    inertia: float


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d = _sq_dists(x, np.stack(centers)).min(1)
        total = d.sum()
        # all points coincide with a chosen center: any pick is a duplicate
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d / total)
        centers.append(x[idx])
    return np.stack(centers)


def _merge_duplicates(centers: np.ndarray) -> np.ndarray:
    keep = []
    for c in centers:
        if not any(np.array_equal(c, k) for k in keep):
            keep.append(c)
    return np.stack(keep)


def kmeans(x, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    Stops after ``max_iter`` rounds or when no center moves more than ``tol``.
    Coinciding centers are merged, so fewer than ``k`` clusters can come back
    (a constant input yields one). Empty clusters keep their previous center.
    Ties in assignment go to the lower cluster index.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 2:
        raise DomainError("k must be at least 2")
    if k > len(x):
        raise DomainError(f"k={k} exceeds the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    centers = _merge_duplicates(kmeans_pp_init(x, k, rng))
    it = 0
    for it in range(1, max_iter + 1):
        labels = _sq_dists(x, centers).argmin(1)
        new = centers.copy()
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(0)
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = _merge_duplicates(new)
        if shift <= tol:
            break
    d = _sq_dists(x, centers)
    labels = d.argmin(1)
    return KMeansResult(labels, centers, it, float(d[np.arange(len(x)), labels].sum()))


def png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    return np.round(PALETTE[labels % len(PALETTE)] * 255).astype(np.uint8)


def heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max normalised grey-scale uint8 image; constant maps render black."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


@dataclass
class FeatureViews:
    clusters: np.ndarray  # h x w cluster ids over the fused map
    attention_raw: np.ndarray  # N x h8 x w8
    attention_filtered: np.ndarray
    confidences: np.ndarray  # N


@torch.no_grad()
def feature_views(model: CamoSegModel, sample: AnnotatedSample, tes: TextEmbeddingSet, cfg: Config,
                  k: int, seed: int = 0) -> FeatureViews:
    img = fit(sample, cfg.data.image_size).image
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = model(x, text_tensor(tes))
    fused = out.fused[0]  # C, h, w
    c, h, w = fused.shape
    result = kmeans(fused.reshape(c, -1).T.numpy(), k, seed)
    return FeatureViews(result.labels.reshape(h, w), out.tva.attention_raw[0].numpy(),
                        out.tva.attention_filtered[0].numpy(), out.preds.confidences[0].numpy())


def render_views(views: FeatureViews, top: int = 3, scale: int = 8) -> dict[str, bytes]:
    """PNG files: the cluster map plus raw and filtered attention for the ``top`` most confident queries."""
    files = {"clusters.png": png_bytes(upscale(colorize_labels(views.clusters), scale * 4))}
    order = np.argsort(-views.confidences, kind="stable")[:top]
    for rank, q in enumerate(order):
        files[f"attention_{rank}_q{q}_raw.png"] = png_bytes(upscale(heatmap(views.attention_raw[q]), scale))
        files[f"attention_{rank}_q{q}_filtered.png"] = png_bytes(upscale(heatmap(views.attention_filtered[q]), scale))
    return files
