"""Category feature embedding (scale KI-S).

Turns a category's triples into plain sentences via a template and encodes the
sentence set to one fixed-dimension unit vector. Two encoders share that
contract: a seeded feature-hashing baseline with zero model dependencies, and
a loader for vectors produced externally (KIEMB files, e.g. from a language
model exporter).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kiemb
from .errors import DimensionMismatch, MissingCategory
from .knowledge import Triple, normalize_entity
from .seeding import stable_hash64

_TOKEN = re.compile(r"[0-9a-z]+")


@dataclass(frozen=True)
class SentenceSet:
    category: str
    sentences: tuple[str, ...]


@dataclass(frozen=True)
class CategoryFeature:
    category: str
    vector: np.ndarray  # unit L2 norm, or zero
    encoder_id: str


def template_sentence(t: Triple) -> str:
    """Subject-verb-object sentence with '/' expanded to spaces."""
    return f"{t.subject} {t.relation.replace('/', ' ')} {t.object}."


def sentences_for_category(category: str, triples: Sequence[Triple]) -> SentenceSet:
    """One sentence per triple, in file order."""
    return SentenceSet(
        category=normalize_entity(category),
        sentences=tuple(template_sentence(t) for t in triples),
    )


def _normalized(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    return vec if norm == 0.0 else vec / norm


def hash_encode(sentences: SentenceSet, dim: int, seed: int) -> CategoryFeature:
    """Feature-hashing encoder: each token lands on a seeded signed index.

    Per-sentence token counts accumulate as +/-1 at ``hash % dim``; sentence
    vectors are averaged (order-free) and the result L2-normalized. The zero
    vector (empty sentence set) stays zero.
    """
    if dim < 8:
        raise ValueError(f"dim must be >= 8, got {dim}")
    acc = np.zeros(dim, dtype=np.float64)
    for sentence in sentences.sentences:
        vec = np.zeros(dim, dtype=np.float64)
        for token in _TOKEN.findall(sentence.casefold()):
            h = stable_hash64("tok", seed, token)
            sign = 1.0 if h & 1 else -1.0
            vec[(h >> 1) % dim] += sign
        acc += vec
    if sentences.sentences:
        acc /= len(sentences.sentences)
    return CategoryFeature(
        category=sentences.category,
        vector=_normalized(acc),
        encoder_id=f"hash:d{dim}:s{seed}",
    )


def load_external_features(
    path: str | Path,
    expected_categories: Sequence[str],
    expected_dim: int | None = None,
) -> list[CategoryFeature]:
    """Load per-category vectors from a KIEMB file, re-normalized.

    Raises MissingCategory if any expected category has no record, and
    DimensionMismatch if ``expected_dim`` is given and disagrees.
    """
    scale_tag, dim, entries = kiemb.read_kiemb(path)
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatch(f"{path}: dim {dim}, expected {expected_dim}")
    by_name = {normalize_entity(name): vec for name, vec in entries}
    features = []
    for cat in expected_categories:
        name = normalize_entity(cat)
        if name not in by_name:
            raise MissingCategory(name)
        features.append(
            CategoryFeature(
                category=name,
                vector=_normalized(by_name[name]),
                encoder_id=f"kiemb:{scale_tag}",
            )
        )
    return features
