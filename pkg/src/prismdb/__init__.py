"""prismdb: an explainable multimodal query engine.

Tables, text semantic graphs, and scene graphs live side by side in one
relational store. Natural-language queries are clarified into a reviewable
step sketch, compiled into a plan of typed function signatures, realized by
synthesized and versioned function bodies, and executed with row-level
provenance, runtime monitoring, on-the-fly fault repair, and replayable
explanations of every result field.
"""

from .config import EngineConfig
from .embedding import HashedEmbedder, cosine_matrix
from .lineage import DependencyPattern, LineageEntry, LineageStore
from .registry import FunctionImpl, FunctionRegistry, FunctionSignature
from .store import Relation, Store
from .values import Column, Schema, ValueType, schema

__version__ = "0.1.0"

__all__ = [
    "Column",
    "DependencyPattern",
    "EngineConfig",
    "FunctionImpl",
    "FunctionRegistry",
    "FunctionSignature",
    "HashedEmbedder",
    "LineageEntry",
    "LineageStore",
    "Relation",
    "Schema",
    "Store",
    "ValueType",
    "cosine_matrix",
    "schema",
    "__version__",
]
