"""Glue shared by training, evaluation and inference: splits, text tables and batching."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .data.augment import augment
from .data.coco import AnnotatedSample, DatasetIndex, filter_rare_classes, load_coco
from .data.sampling import derive_seed
from .errors import ConfigError, DataError
from .vocab import HashTextEncoder, TextEmbeddingSet, Vocabulary, embed_categories

ENV_WORKERS = "CAMOSEG_NUM_WORKERS"


def num_workers() -> int:
    raw = os.environ.get(ENV_WORKERS, "0")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError(f"{ENV_WORKERS} must be >= 0")
    return n


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``map`` that keeps input order; threads only when workers > 1."""
    workers = num_workers() if workers is None else workers
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def resolve_vocab(cfg: Config, vocab_path=None) -> Vocabulary:
    path = Path(vocab_path) if vocab_path else Path(cfg.data.root) / "vocab.json"
    if not path.exists():
        raise DataError(f"vocabulary file {path} not found")
    return Vocabulary.load(path)


def load_split(cfg: Config, split: str, vocab: Vocabulary, filter_rare: bool = False) -> DatasetIndex:
    ann = Path(cfg.data.root) / split / "annotations.json"
    if not ann.exists():
        raise DataError(f"annotations {ann} not found")
    index = load_coco(ann, vocab)
    if filter_rare:
        index = filter_rare_classes(index, cfg.data.min_instances)
    return index


def text_embeddings(cfg: Config, vocab: Vocabulary) -> TextEmbeddingSet:
    return embed_categories(vocab, HashTextEncoder(cfg.backbone.text_dim, cfg.backbone.seed))


def text_tensor(tes: TextEmbeddingSet) -> torch.Tensor:
    return torch.as_tensor(tes.per_category, dtype=torch.float32)


def fit_scale(sample: AnnotatedSample, size: int) -> float:
    return size / max(sample.height, sample.width)


def fit(sample: AnnotatedSample, size: int) -> AnnotatedSample:
    """Resize the long side to ``size`` and zero-pad to a square; identity for square inputs of that size."""
    return augment(sample, 0, size, scale=fit_scale(sample, size))


def unfit_mask(mask: np.ndarray, height: int, width: int, size: int) -> np.ndarray:
    """Undo :func:`fit` on a predicted ``size`` x ``size`` mask."""
    s = size / max(height, width)
    h, w = max(1, round(height * s)), max(1, round(width * s))
    crop = mask[:h, :w]
    if (h, w) == (height, width):
        return crop
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return crop[rows[:, None], cols[None, :]]


@dataclass
class Batch:
    images: torch.Tensor  # B, 3, S, S
    masks: list[torch.Tensor]  # per image: G, S, S float
    labels: list[torch.Tensor]  # per image: G long
    sample_ids: list[int]


def collate(samples: list[AnnotatedSample]) -> Batch:
    images = torch.stack([torch.from_numpy(np.ascontiguousarray(s.image, dtype=np.float32)).permute(2, 0, 1)
                          for s in samples])
    masks, labels = [], []
    for s in samples:
        keep = [i for i in s.instances if not i.iscrowd and i.mask.any()]
        size = s.image.shape[:2]
        masks.append(torch.from_numpy(np.stack([i.mask for i in keep]).astype(np.float32)) if keep
                     else torch.zeros((0, *size)))
        labels.append(torch.tensor([i.category_id for i in keep], dtype=torch.long))
    return Batch(images, masks, labels, [s.sample_id for s in samples])


class SampleCache:
    """Decoded samples kept in memory; the desk datasets are tiny."""

    def __init__(self, index: DatasetIndex):
        self.index = index
        self._cache: dict[int, AnnotatedSample] = {}

    def __getitem__(self, i: int) -> AnnotatedSample:
        if i not in self._cache:
            self._cache[i] = self.index.load(i)
        return self._cache[i]


def training_view(cache: SampleCache, i: int, cfg: Config, epoch: int) -> AnnotatedSample:
    sample = cache[i]
    d = cfg.data
    if d.augment:
        return augment(sample, derive_seed(cfg.train.seed, sample.sample_id, epoch), d.image_size, d.jitter)
    return fit(sample, d.image_size)
