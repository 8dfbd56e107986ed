"""Scale jitter followed by a fixed-size crop or zero pad."""
from __future__ import annotations

import numpy as np
import torch
from torch.nn import functional as F

from .coco import AnnotatedSample, Instance


def _resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    shrink = size[0] < image.shape[0] or size[1] < image.shape[1]
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=shrink)
    return y[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy()


def _resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def _crop_pad(a: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    out = np.zeros((size, size) + a.shape[2:], dtype=a.dtype)
    patch = a[top:top + size, left:left + size]
    out[:patch.shape[0], :patch.shape[1]] = patch
    return out


def augment(sample: AnnotatedSample, seed: int, size: int = 512, jitter=(0.1, 2.0),
            scale: float | None = None) -> AnnotatedSample:
    """Resize by a factor drawn uniformly from ``jitter`` then crop/pad to ``size`` x ``size``.

    Masks are resized with nearest-neighbour sampling and follow the image's
    crop exactly. Instance count and categories are preserved even when a mask
    is cropped away.
    """
    rng = np.random.default_rng(seed)
    s = float(rng.uniform(*jitter)) if scale is None else float(scale)
    h, w = sample.height, sample.width
    new = (max(1, int(round(h * s))), max(1, int(round(w * s))))
    if new == (h, w):
        image = sample.image
        masks = [inst.mask for inst in sample.instances]
    else:
        image = _resize_image(sample.image, new)
        masks = [_resize_mask(inst.mask, new) for inst in sample.instances]
    top = int(rng.integers(0, new[0] - size + 1)) if new[0] > size else 0
    left = int(rng.integers(0, new[1] - size + 1)) if new[1] > size else 0
    image = _crop_pad(image, top, left, size)
    instances = [Instance(_crop_pad(m, top, left, size), inst.category_id, inst.iscrowd)
                 for m, inst in zip(masks, sample.instances)]
    return AnnotatedSample(image, instances, sample.sample_id)
