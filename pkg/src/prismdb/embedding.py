"""Deterministic text embedding used by similarity operators.

The default embedder is a 256-dimensional signed feature-hashing bag of
tokens (see prismdb.kernels). It needs no model weights, is fully
deterministic, and gives exact boundary behavior: identical strings embed to
identical vectors, and token-disjoint strings whose tokens hash to disjoint
buckets have cosine exactly 0.0.

Any object with ``dim`` and ``embed(texts) -> (n, dim) float64 array`` can be
plugged in instead.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from . import kernels


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashedEmbedder:
    """Signed feature-hashing embedder over lowercase alphanumeric tokens."""

    def __init__(self, dim: int = 256):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        missing: list[str] = []
        missing_rows: list[int] = []
        for i, text in enumerate(texts):
            cached = self._cache.get(text)
            if cached is not None:
                out[i] = cached
            else:
                missing.append(text)
                missing_rows.append(i)
        if missing:
            fresh = np.zeros((len(missing), self.dim), dtype=np.float64)
            kernels.embed_into(missing, fresh)
            for row, text, vec in zip(missing_rows, missing, fresh):
                out[row] = vec
                if len(self._cache) < 65536:
                    self._cache[text] = vec.copy()
        return out

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity for unit (or zero) row vectors.

    Entries are clamped to [-1, 1]. Pairs whose vectors are exactly equal and
    within float noise of 1.0 are snapped to exactly 1.0 so that identical
    strings score at the declared boundary.
    """
    m = a @ b.T
    np.clip(m, -1.0, 1.0, out=m)
    near_one = np.argwhere(m > 1.0 - 1e-9)
    for i, j in near_one:
        if np.array_equal(a[i], b[j]):
            m[i, j] = 1.0
    return m
