"""Kernel lane selection.

The hashed-embedding kernel exists twice: a Cython extension and a pure
Python fallback with identical semantics. The compiled lane is used when it
imported successfully; setting ``PRISMDB_PURE=1`` forces the fallback. Both
lanes produce bit-identical float64 output (integer bucket counts normalize
identically), so lane choice never changes results, only speed.
"""

from __future__ import annotations

import os

from . import _hashed_py

_lane = "python"
_impl = _hashed_py

if os.environ.get("PRISMDB_PURE") != "1":
    try:
        from . import _hashed_cy as _compiled

        _impl = _compiled
        _lane = "cython"
    except ImportError:
        pass


def active_lane() -> str:
    return _lane


def lane(name: str):
    """Fetch a specific lane's module (used by the lane-equivalence tests)."""
    if name == "python":
        return _hashed_py
    if name == "cython":
        if _lane != "cython":
            raise ImportError("compiled kernel lane is not available")
        return _impl
    raise ValueError(f"unknown lane {name!r}")


embed_into = _impl.embed_into
tokenize = _hashed_py.tokenize
fnv1a64 = _hashed_py.fnv1a64
