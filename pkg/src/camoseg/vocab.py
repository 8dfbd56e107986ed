"""Category vocabularies, text embeddings and prompt-ensemble classification."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DomainError


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    variants: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ConfigError(f"category {self.id} has an empty name")
        variants = tuple(dict.fromkeys((self.name, *self.variants)))
        object.__setattr__(self, "variants", variants)


@dataclass(frozen=True)
class Vocabulary:
    categories: tuple[Category, ...]

    def __post_init__(self):
        ids = [c.id for c in self.categories]
        if ids != list(range(len(ids))):
            raise ConfigError(f"category ids must be contiguous from 0, got {ids}")

    def __len__(self):
        return len(self.categories)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "Vocabulary":
        return cls(tuple(Category(i, n) for i, n in enumerate(names)))

    @classmethod
    def from_json(cls, data) -> "Vocabulary":
        try:
            cats = sorted(data, key=lambda d: d["id"])
            return cls(tuple(Category(int(d["id"]), str(d["name"]), tuple(d.get("variants", ()))) for d in cats))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed vocabulary entry: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls.from_json(data)

    def to_json(self) -> list[dict]:
        return [{"id": c.id, "name": c.name, "variants": list(c.variants)} for c in self.categories]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    def without_variants(self) -> "Vocabulary":
        return Vocabulary(tuple(Category(c.id, c.name) for c in self.categories))

    def subset(self, keep_ids: Sequence[int]) -> tuple["Vocabulary", dict[int, int]]:
        """Keep the given ids, renumbered contiguously. Returns the old->new id map."""
        remap = {old: new for new, old in enumerate(sorted(keep_ids))}
        cats = tuple(Category(remap[c.id], c.name, c.variants) for c in self.categories if c.id in remap)
        return Vocabulary(cats), remap


class HashTextEncoder:
    """Maps a string to a fixed pseudo-random unit vector derived from a seeded hash."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, text: str) -> np.ndarray:
        if not text:
            raise DomainError("cannot encode an empty string")
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


@dataclass(frozen=True)
class TextEmbeddingSet:
    per_category: np.ndarray  # |C| x D, embedding of each primary name
    variants: tuple[np.ndarray, ...] = field(repr=False)  # per category: V_c x D

    @property
    def per_variant(self) -> dict[tuple[int, int], np.ndarray]:
        return {(c, k): v for c, rows in enumerate(self.variants) for k, v in enumerate(rows)}

    def __len__(self):
        return len(self.per_category)

    def single_name(self) -> "TextEmbeddingSet":
        return TextEmbeddingSet(self.per_category, tuple(r[None, :] for r in self.per_category))

    def zeroed(self) -> "TextEmbeddingSet":
        return TextEmbeddingSet(np.zeros_like(self.per_category), tuple(np.zeros_like(v) for v in self.variants))


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def embed_categories(vocab: Vocabulary, encoder: Callable[[str], np.ndarray]) -> TextEmbeddingSet:
    if len(vocab) == 0:
        raise ConfigError("cannot embed an empty vocabulary")
    variants = tuple(np.stack([_unit(encoder(v)) for v in c.variants]) for c in vocab.categories)
    per_category = np.stack([rows[0] for rows in variants])
    return TextEmbeddingSet(per_category, variants)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def ensemble_scores(embedding: np.ndarray, tes: TextEmbeddingSet, tau: float) -> np.ndarray:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    embedding = np.asarray(embedding, dtype=np.float64)
    # row-wise reduction keeps each variant's logit independent of how many variants share its category
    return np.array([np.max(np.sum(rows * embedding, axis=1)) / tau for rows in tes.variants])


def ensemble_classify(embedding: np.ndarray, tes: TextEmbeddingSet, tau: float) -> tuple[int, np.ndarray]:
    """Per-category score is the best variant logit; returns (argmax id, softmax over categories)."""
    probs = _softmax(ensemble_scores(embedding, tes, tau))
    return int(np.argmax(probs)), probs


def synthetic_benchmark(vocab: Vocabulary, encoder: Callable[[str], np.ndarray], n: int = 500,
                        noise: float = 0.6, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Query embeddings drawn near a random variant (not necessarily the primary name) of a random category."""
    rng = np.random.default_rng(seed)
    queries, labels = [], []
    for _ in range(n):
        cat = vocab.categories[rng.integers(len(vocab))]
        variant = cat.variants[rng.integers(len(cat.variants))]
        q = _unit(encoder(variant)) + noise * rng.standard_normal(encoder.dim) / np.sqrt(encoder.dim)
        queries.append(q / np.linalg.norm(q))
        labels.append(cat.id)
    return np.stack(queries), np.array(labels)


def benchmark_accuracy(queries: np.ndarray, labels: np.ndarray, tes: TextEmbeddingSet, tau: float = 0.07) -> float:
    preds = [ensemble_classify(q, tes, tau)[0] for q in queries]
    return float(np.mean(np.array(preds) == labels))
