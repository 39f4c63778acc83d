"""Value types and relation schemas.

Five value types cover every column in the system: int64, float64, text,
boolean, and uri. A uri is a text value that names an external resource
(poster image path, document file); it gets its own type so schemas document
which columns point outside the store. All columns are nullable, null is a
value state rather than a type.

Two column names are reserved for the provenance system: ``lid`` and
``parent_lid``. Schemas may declare them (the canonical graph-bundle schemas
do) but their values are always assigned by the engine, never by callers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator

from .errors import InvalidSchema, TypeMismatch

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

SYSTEM_COLUMNS = ("lid", "parent_lid")


class ValueType(str, Enum):
    INT64 = "int64"
    FLOAT64 = "float64"
    TEXT = "text"
    BOOLEAN = "boolean"
    URI = "uri"

    @classmethod
    def parse(cls, raw: str) -> "ValueType":
        try:
            return cls(raw)
        except ValueError:
            raise InvalidSchema(f"unknown value type {raw!r}") from None


def check_value(vt: ValueType, value: Any) -> Any:
    """Validate ``value`` against ``vt`` and return it in canonical form.

    Ints are accepted into float64 columns (coerced to float). Bools are not
    ints here even though Python says otherwise.
    """
    if value is None:
        return None
    if vt is ValueType.INT64:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"expected int64, got {type(value).__name__}: {value!r}")
        return value
    if vt is ValueType.FLOAT64:
        if isinstance(value, bool):
            raise TypeMismatch(f"expected float64, got bool: {value!r}")
        if isinstance(value, int):
            return float(value)
        if isinstance(value, float):
            if math.isnan(value) or math.isinf(value):
                raise TypeMismatch(f"non-finite float64 value: {value!r}")
            return value
        raise TypeMismatch(f"expected float64, got {type(value).__name__}: {value!r}")
    if vt is ValueType.BOOLEAN:
        if not isinstance(value, bool):
            raise TypeMismatch(f"expected boolean, got {type(value).__name__}: {value!r}")
        return value
    if vt in (ValueType.TEXT, ValueType.URI):
        if not isinstance(value, str):
            raise TypeMismatch(f"expected {vt.value}, got {type(value).__name__}: {value!r}")
        return value
    raise TypeMismatch(f"unhandled value type {vt!r}")


@dataclass(frozen=True)
class Column:
    name: str
    type: ValueType
    is_key: bool = False

    def to_wire(self) -> list[str]:
        return [self.name, self.type.value]


@dataclass
class Schema:
    """An ordered list of typed columns, some of which may form the key."""

    columns: list[Column] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.columns:
            raise InvalidSchema("schema must declare at least one column")
        seen: set[str] = set()
        for col in self.columns:
            if not _IDENT.match(col.name):
                raise InvalidSchema(f"column name {col.name!r} is not an identifier")
            if col.name in seen:
                raise InvalidSchema(f"duplicate column name {col.name!r}")
            if col.name in SYSTEM_COLUMNS and col.is_key:
                raise InvalidSchema(f"system column {col.name!r} cannot be part of the key")
            if col.name in SYSTEM_COLUMNS and col.type is not ValueType.INT64:
                raise InvalidSchema(f"system column {col.name!r} must be int64")
            seen.add(col.name)

    # -- helpers ------------------------------------------------------------

    def __iter__(self) -> Iterator[Column]:
        return iter(self.columns)

    def __len__(self) -> int:
        return len(self.columns)

    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def declared(self) -> list[Column]:
        """Columns that hold caller data (system columns excluded)."""
        return [c for c in self.columns if c.name not in SYSTEM_COLUMNS]

    def key_names(self) -> list[str]:
        return [c.name for c in self.columns if c.is_key]

    def has_column(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise InvalidSchema(f"no column named {name!r}")

    def to_wire(self) -> list[list[str]]:
        return [c.to_wire() for c in self.columns]

    @classmethod
    def from_wire(cls, cols: list[list[str]]) -> "Schema":
        return cls([Column(n, ValueType.parse(t)) for n, t in cols])

    def to_json(self) -> list[dict[str, Any]]:
        return [
            {"name": c.name, "type": c.type.value, "is_key": c.is_key} for c in self.columns
        ]

    @classmethod
    def from_json(cls, data: list[dict[str, Any]]) -> "Schema":
        return cls(
            [
                Column(d["name"], ValueType.parse(d["type"]), bool(d.get("is_key", False)))
                for d in data
            ]
        )


def schema(*cols: tuple) -> Schema:
    """Shorthand: schema(("a", "int64"), ("b", "text", True))."""
    built = []
    for spec in cols:
        name, vt = spec[0], spec[1]
        is_key = bool(spec[2]) if len(spec) > 2 else False
        built.append(Column(name, ValueType.parse(vt), is_key))
    return Schema(built)
