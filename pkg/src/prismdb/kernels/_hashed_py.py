"""Pure-Python lane of the hashed embedding kernel.

Tokens are maximal ``[a-z0-9]+`` runs of the lowercased text. Each token is
hashed with 64-bit FNV-1a; the hash picks a bucket (``hash % dim``) and a sign
(bit 63). Bucket accumulation therefore yields small exact integers, so the
float64 vector before normalization is exact and both kernel lanes produce
bit-identical output.
"""

from __future__ import annotations

import math
import re

_TOKEN = re.compile(r"[a-z0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def embed_into(texts: list[str], out) -> None:
    """Fill ``out`` (zeroed (len(texts), dim) float64 array) with unit vectors.

    A text with no tokens keeps its all-zero row.
    """
    dim = out.shape[1]
    for i, text in enumerate(texts):
        row = out[i]
        for token in _TOKEN.findall(text.lower()):
            h = fnv1a64(token.encode("utf-8"))
            if h >> 63:
                row[h % dim] -= 1.0
            else:
                row[h % dim] += 1.0
        total = 0.0
        for j in range(dim):
            total += row[j] * row[j]
        norm = math.sqrt(total)
        if norm > 0.0:
            for j in range(dim):
                row[j] = row[j] / norm
