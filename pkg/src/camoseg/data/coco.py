"""COCO instances JSON ingestion and dataset bookkeeping."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError, SchemaError
from ..vocab import Vocabulary
from .rle import rle_decode, rle_encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Instance:
    mask: np.ndarray  # H x W bool
    category_id: int
    iscrowd: bool = False


@dataclass
class AnnotatedSample:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    instances: list[Instance]
    sample_id: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class InstanceRecord:
    category_id: int
    rle: dict
    iscrowd: bool = False


@dataclass(frozen=True)
class SampleRecord:
    image_id: int
    file_name: str
    height: int
    width: int
    instances: tuple[InstanceRecord, ...] = ()


@dataclass
class DatasetIndex:
    samples: list[SampleRecord]
    vocab: Vocabulary
    image_root: Path | None = None
    rejected: int = 0
    category_freq: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.category_freq = image_frequencies(self.samples)

    def __len__(self):
        return len(self.samples)

    def instance_counts(self) -> Counter:
        return Counter(inst.category_id for s in self.samples for inst in s.instances)

    @property
    def num_instances(self) -> int:
        return sum(len(s.instances) for s in self.samples)

    def load(self, i: int) -> AnnotatedSample:
        rec = self.samples[i]
        root = self.image_root or Path(".")
        try:
            with Image.open(root / rec.file_name) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read image {root / rec.file_name}: {exc}") from exc
        if image.shape[:2] != (rec.height, rec.width):
            raise DataError(f"{rec.file_name}: size {image.shape[:2]} != declared {(rec.height, rec.width)}")
        instances = [Instance(rle_decode(r.rle), r.category_id, r.iscrowd) for r in rec.instances]
        return AnnotatedSample(image, instances, rec.image_id)


def image_frequencies(samples) -> dict[int, int]:
    freq: Counter = Counter()
    for s in samples:
        freq.update({inst.category_id for inst in s.instances})
    return dict(sorted(freq.items()))


def rasterize_polygons(polygons, height: int, width: int) -> np.ndarray:
    """Even-odd fill sampled at pixel centres; separate polygons are unioned."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        inside = np.zeros((height, width), dtype=bool)
        n = len(pts)
        for k in range(n):
            x1, y1 = pts[k]
            x2, y2 = pts[(k + 1) % n]
            if y1 == y2:
                continue
            crosses = (y1 > py) != (y2 > py)
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < x_at)
        out |= inside
    return out


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(path, f"missing key {key!r}")
    return obj[key]


def _segmentation_to_rle(seg, h, w, path) -> dict:
    if isinstance(seg, list):
        return rle_encode(rasterize_polygons(seg, h, w))
    if isinstance(seg, dict):
        size = _require(seg, "size", path)
        counts = _require(seg, "counts", path)
        if [int(v) for v in size] != [h, w]:
            raise SchemaError(path, f"RLE size {size} does not match image size {[h, w]}")
        if isinstance(counts, list):
            return rle_encode(rle_decode({"size": size, "counts": counts}))
        return {"size": [h, w], "counts": counts}
    raise SchemaError(path, "segmentation must be a polygon list or an RLE object")


def load_coco(json_path, vocab: Vocabulary, image_root=None) -> DatasetIndex:
    json_path = Path(json_path)
    try:
        data = json.loads(json_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {json_path}: {exc}") from exc
    images = _require(data, "images", "$")
    annotations = _require(data, "annotations", "$")
    categories = _require(data, "categories", "$")

    name_to_vocab = {c.name: c.id for c in vocab.categories}
    coco_to_vocab: dict[int, int | None] = {}
    for k, cat in enumerate(categories):
        cid = _require(cat, "id", f"categories[{k}]")
        name = _require(cat, "name", f"categories[{k}]")
        coco_to_vocab[int(cid)] = name_to_vocab.get(name)

    order: list[int] = []
    meta: dict[int, tuple[str, int, int]] = {}
    for k, img in enumerate(images):
        path = f"images[{k}]"
        iid = int(_require(img, "id", path))
        meta[iid] = (str(_require(img, "file_name", path)), int(_require(img, "height", path)),
                     int(_require(img, "width", path)))
        order.append(iid)

    per_image: dict[int, list[InstanceRecord]] = {iid: [] for iid in order}
    rejected = 0
    for k, ann in enumerate(annotations):
        path = f"annotations[{k}]"
        iid = int(_require(ann, "image_id", path))
        if iid not in meta:
            raise SchemaError(f"{path}.image_id", f"unknown image id {iid}")
        seg = _require(ann, "segmentation", path)
        cid = int(_require(ann, "category_id", path))
        vid = coco_to_vocab.get(cid)
        if vid is None:
            rejected += 1
            continue
        _, h, w = meta[iid]
        rle = _segmentation_to_rle(seg, h, w, f"{path}.segmentation")
        per_image[iid].append(InstanceRecord(vid, rle, bool(ann.get("iscrowd", 0))))
    if rejected:
        log.warning("%s: rejected %d annotations with categories outside the vocabulary", json_path, rejected)

    samples = [SampleRecord(iid, *meta[iid], tuple(per_image[iid])) for iid in order]
    root = Path(image_root) if image_root is not None else json_path.parent
    return DatasetIndex(samples, vocab, root, rejected)


def filter_rare_classes(index: DatasetIndex, min_instances: int = 5) -> DatasetIndex:
    """Drop categories with fewer than ``min_instances`` annotations and renumber the rest."""
    counts = index.instance_counts()
    keep = [c.id for c in index.vocab.categories if counts.get(c.id, 0) >= min_instances]
    vocab, remap = index.vocab.subset(keep)
    samples = [
        replace(s, instances=tuple(replace(r, category_id=remap[r.category_id])
                                   for r in s.instances if r.category_id in remap))
        for s in index.samples
    ]
    return DatasetIndex(samples, vocab, index.image_root, index.rejected)
