"""Learned class concept vectors and their Gaussian-perturbed variants.

Noise is drawn from numpy's PCG64 bit generator seeded with the caller's
integer seed; coordinates are filled in index order by
``Generator.standard_normal``, which numpy documents as stable across
platforms for a fixed bit generator.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from diagen.core import PipelineConfig, atomic_write_text


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClassEmbedding:
    class_label: str
    token: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.array(self.vector, dtype=np.float64).reshape(-1)
        if vec.size < 1:
            raise EmbeddingError(f"{self.class_label}: embedding must have at least one dimension")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "_finite", bool(np.isfinite(vec).all()))

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClassEmbedding):
            return NotImplemented
        return (
            self.class_label == other.class_label
            and self.token == other.token
            and np.array_equal(self.vector, other.vector)
        )


@dataclass(frozen=True, eq=False)
class NoisyEmbedding:
    base: ClassEmbedding
    vector: np.ndarray
    variance: float
    seed: int


def noise_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def perturb(embedding: ClassEmbedding, variance: float, seed: int) -> NoisyEmbedding:
    """Add i.i.d. N(0, variance) noise to every coordinate of the embedding."""
    if not (variance >= 0 and math.isfinite(variance)):
        raise EmbeddingError(f"variance must be finite and nonnegative, got {variance!r}")
    if not embedding._finite:
        raise EmbeddingError(f"{embedding.class_label}: embedding has non-finite entries")
    if variance == 0:
        vector = embedding.vector.copy()
    else:
        noise = noise_rng(seed).standard_normal(embedding.dim)
        vector = embedding.vector + math.sqrt(variance) * noise
    vector.setflags(write=False)
    return NoisyEmbedding(base=embedding, vector=vector, variance=float(variance), seed=int(seed))


def variance_for(index: int, config: PipelineConfig, class_label: str | None = None) -> float:
    """Variance for the ``index``-th synthetic of a guiding image; cycles through the schedule."""
    if index < 0:
        raise ValueError(f"index must be nonnegative, got {index}")
    schedule = config.noise_variances
    if class_label is not None and class_label in config.class_noise_variances:
        schedule = config.class_noise_variances[class_label]
    if not schedule:
        raise EmbeddingError("noise variance schedule is empty")
    return schedule[index % len(schedule)]


def embeddings_from_dict(data: Mapping[str, object]) -> dict[str, ClassEmbedding]:
    if not isinstance(data, Mapping):
        raise EmbeddingError("embedding file must map class_label -> {token, vector}")
    out: dict[str, ClassEmbedding] = {}
    tokens: set[str] = set()
    dim = None
    for label, entry in data.items():
        try:
            emb = ClassEmbedding(label, str(entry["token"]), np.asarray(entry["vector"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise EmbeddingError(f"{label}: malformed entry ({exc})") from None
        if dim is None:
            dim = emb.dim
        elif emb.dim != dim:
            raise EmbeddingError(f"{label}: dimension mismatch, {emb.dim} != {dim}")
        if emb.token in tokens:
            raise EmbeddingError(f"{label}: token {emb.token!r} already used by another class")
        if not np.all(np.isfinite(emb.vector)):
            raise EmbeddingError(f"{label}: non-finite vector entries")
        tokens.add(emb.token)
        out[label] = emb
    return out


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in pairs:
        if key in out:
            raise EmbeddingError(f"duplicate class label {key!r}")
        out[key] = value
    return out


def load_embeddings(path: str | os.PathLike[str]) -> dict[str, ClassEmbedding]:
    """Read a JSON embedding file into a mapping class_label -> ClassEmbedding."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh, object_pairs_hook=_reject_duplicate_keys)
    return embeddings_from_dict(data)


def save_embeddings(embeddings: Mapping[str, ClassEmbedding], path: str | os.PathLike[str]) -> None:
    payload = {
        label: {"token": e.token, "vector": [float(x) for x in e.vector]}
        for label, e in embeddings.items()
    }
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def default_token(class_label: str) -> str:
    return "<cls_" + "_".join(class_label.lower().split()) + ">"
