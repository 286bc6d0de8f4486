"""Deterministic reference embedder and a small top-k cosine index.

The embedder is a hashed bag-of-words: stable across processes (crc32, not
Python's salted hash), order-invariant, unit-normalized. It stands behind the
same interface a learned model would use, so retrieval call structure is what
gets exercised, not embedding quality.
"""

from __future__ import annotations

import json
import re
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptFile

DEFAULT_DIM = 256
_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashEmbedder:
    """Bag-of-words embedder hashing tokens into a fixed number of buckets."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim

    def bucket(self, token: str) -> int:
        return zlib.crc32(token.encode()) % self.dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            vec[self.bucket(tok)] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


_default = HashEmbedder()


def embed(text: str) -> np.ndarray:
    return _default.embed(text)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class VectorIndex:
    """id -> vector map with exhaustive top-k cosine search."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self.entries: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def set(self, key: str, vec: np.ndarray) -> None:
        if vec.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: {vec.shape} vs ({self.dim},)")
        self.entries[key] = vec

    def remove(self, key: str) -> None:
        self.entries.pop(key, None)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({k: v.tolist() for k, v in sorted(self.entries.items())}))

    @classmethod
    def load(cls, path: Path, dim: int = DEFAULT_DIM) -> "VectorIndex":
        try:
            data = json.loads(Path(path).read_text())
            idx = cls(dim)
            for k, v in data.items():
                idx.set(k, np.asarray(v, dtype=float))
            return idx
        except (ValueError, KeyError) as e:
            raise CorruptFile(f"bad index file {path}: {e}") from None


def top_k(query: np.ndarray, index: VectorIndex, k: int) -> list[tuple[str, float]]:
    """ids by cosine descending, ties by id; empty for zero-vector queries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if np.linalg.norm(query) == 0:
        return []
    scored = [(key, cosine(query, vec)) for key, vec in index.entries.items()]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored[:k]
