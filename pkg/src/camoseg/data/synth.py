"""Seeded synthetic camouflage dataset.

Every image is a sum of random sinusoidal gratings over a base colour. Each
object is a blob from its category's shape family, filled with the same
gratings shifted in phase by ``contrast * pi`` and tinted by
``contrast * TINT`` along a random colour direction. At ``contrast = 0`` the
objects are pixel-identical to the background while their masks remain valid.

Output layout::

    out/vocab.json
    out/<split>/annotations.json    COCO instances, compressed RLE masks
    out/<split>/images/000000.png
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..config import SynthConfig
from ..errors import ConfigError
from ..vocab import Category, Vocabulary
from .rle import rle_area, rle_encode
from .sampling import derive_seed

TINT = 0.3
NUM_GRATINGS = 4
MIN_VISIBLE = 0.5

# name, variants, shape family parameters
FAMILIES = [
    ("moth", ("moths", "lepidopteran", "night butterfly"), dict(aspect=(0.45, 0.65), harmonics={})),
    ("crab", ("crabs", "decapod", "shore crab"), dict(aspect=(0.8, 1.0), harmonics={6: 0.22, 7: 0.1})),
    ("flounder", ("flounders", "flatfish", "plaice"), dict(aspect=(0.7, 0.9), superellipse=4.0, harmonics={})),
    ("octopus", ("octopuses", "octopi", "cephalopod"), dict(aspect=(0.85, 1.0), harmonics={3: 0.25, 5: 0.12})),
    ("stick insect", ("stick insects", "phasmid", "walking stick"), dict(aspect=(0.18, 0.28), harmonics={})),
    ("gecko", ("geckos", "lizard", "house gecko"), dict(aspect=(0.35, 0.5), harmonics={2: 0.15, 4: 0.08})),
    ("frog", ("frogs", "toad", "tree frog"), dict(aspect=(0.75, 0.95), harmonics={2: 0.1, 3: 0.08})),
    ("owl", ("owls", "night bird", "tawny owl"), dict(aspect=(0.6, 0.8), superellipse=3.0, harmonics={5: 0.05})),
]


def synth_vocabulary(num_categories: int) -> Vocabulary:
    if not 1 <= num_categories <= len(FAMILIES):
        raise ConfigError(f"synthetic data supports 1..{len(FAMILIES)} categories")
    return Vocabulary(tuple(Category(i, n, v) for i, (n, v, _) in enumerate(FAMILIES[:num_categories])))


@dataclass
class Texture:
    freqs: np.ndarray  # G x 2, cycles per pixel
    phases: np.ndarray  # G x 3
    amps: np.ndarray  # G
    base: np.ndarray  # 3

    @classmethod
    def random(cls, rng: np.random.Generator, size: int) -> "Texture":
        angles = rng.uniform(0, math.pi, NUM_GRATINGS)
        cycles = rng.uniform(3, 14, NUM_GRATINGS) / size
        freqs = np.stack([np.cos(angles), np.sin(angles)], 1) * cycles[:, None]
        return cls(freqs, rng.uniform(0, 2 * math.pi, (NUM_GRATINGS, 3)),
                   rng.uniform(0.04, 0.1, NUM_GRATINGS), rng.uniform(0.3, 0.7, 3))

    def render(self, size: int, phase_shift: float = 0.0) -> np.ndarray:
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        out = np.broadcast_to(self.base, (size, size, 3)).copy()
        for f, ph, a in zip(self.freqs, self.phases, self.amps):
            arg = 2 * math.pi * (f[0] * xs + f[1] * ys)
            out += a * np.sin(arg[..., None] + ph + phase_shift)
        return out


def blob_mask(rng: np.random.Generator, family: dict, size: int) -> np.ndarray:
    radius = rng.uniform(0.14, 0.24) * size
    aspect = rng.uniform(*family["aspect"])
    rot = rng.uniform(0, math.pi)
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    u = (dx * math.cos(rot) + dy * math.sin(rot)) / radius
    v = (-dx * math.sin(rot) + dy * math.cos(rot)) / (radius * aspect)
    theta = np.arctan2(v, u)
    r = np.hypot(u, v)
    if "superellipse" in family:
        p = family["superellipse"]
        r = (np.abs(u) ** p + np.abs(v) ** p) ** (1.0 / p)
    bound = np.ones_like(theta)
    for k, a in family["harmonics"].items():
        bound += a * np.cos(k * theta + rng.uniform(0, 2 * math.pi))
    return r <= bound


def render_sample(rng: np.random.Generator, num_categories: int, n_inst: int, size: int, contrast: float):
    """Returns (float image, background-only image, [(mask, category)])."""
    texture = Texture.random(rng, size)
    background = texture.render(size)
    image = background.copy()
    placed: list[tuple[np.ndarray, int]] = []
    for _ in range(n_inst):
        cat = int(rng.integers(num_categories))
        family = FAMILIES[cat][2]
        tint = rng.standard_normal(3)
        tint /= np.linalg.norm(tint)
        for _attempt in range(50):
            m = blob_mask(rng, family, size)
            if m.sum() < 16:
                continue
            visible = [(pm & ~m).sum() / max(pm.sum(), 1) for pm, _ in placed]
            if all(v >= MIN_VISIBLE for v in visible) and not any((pm & m).sum() > 0.2 * m.sum() for pm, _ in placed):
                break
        placed = [(pm & ~m, c) for pm, c in placed] + [(m, cat)]
        fill = texture.render(size, phase_shift=contrast * math.pi) + contrast * TINT * tint
        image[m] = fill[m]
    placed = [(m, c) for m, c in placed if m.any()]
    return np.clip(image, 0, 1), np.clip(background, 0, 1), placed


def _to_png_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(image * 255).astype(np.uint8)


def generate_split(out_dir: Path, split: str, count: int, cfg: SynthConfig, seed: int,
                   vocab: Vocabulary) -> dict:
    img_dir = out_dir / split / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    lo, hi = cfg.instances_per_image
    for k in range(count):
        rng = np.random.default_rng(derive_seed(seed, split, k))
        n_inst = int(rng.integers(lo, hi + 1))
        image, _, placed = render_sample(rng, len(vocab), n_inst, cfg.image_size, cfg.contrast)
        name = f"{k:06d}.png"
        Image.fromarray(_to_png_bytes(image)).save(img_dir / name)
        images.append({"id": k, "file_name": f"images/{name}", "height": cfg.image_size, "width": cfg.image_size})
        for mask, cat in placed:
            rle = rle_encode(mask)
            ys, xs = np.nonzero(mask)
            bbox = [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]
            annotations.append({"id": len(annotations) + 1, "image_id": k, "category_id": cat + 1,
                                "segmentation": rle, "area": rle_area(rle), "bbox": bbox, "iscrowd": 0})
    coco = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c.id + 1, "name": c.name} for c in vocab.categories],
    }
    (out_dir / split / "annotations.json").write_text(json.dumps(coco, sort_keys=True) + "\n")
    return coco


def synth_generate(cfg: SynthConfig, seed: int, out_dir) -> dict[str, dict]:
    if cfg.instances_per_image[0] < 1 or cfg.instances_per_image[0] > cfg.instances_per_image[1]:
        raise ConfigError("synth.instances_per_image must be an increasing pair >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = synth_vocabulary(cfg.num_categories)
    vocab.save(out_dir / "vocab.json")
    return {split: generate_split(out_dir, split, n, cfg, seed, vocab)
            for split, n in (("train", cfg.num_train), ("val", cfg.num_val)) if n > 0}
