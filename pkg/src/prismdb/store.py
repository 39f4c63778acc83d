"""Relational storage layer.

Everything queryable lives here as a relation: base tables loaded from user
files, view relations holding the components of graph-shaped data (scene
graphs over video frames, semantic graphs over text), and intermediates
produced during execution. The layout is columnar per relation, which keeps
full-column reads (sampling, joinability probing, scoring) cheap.

Every row carries hidden system fields managed jointly with the lineage log:

* ``lid``, unique across the whole store;
* ``parent_lid``, set for rows produced by narrow functions;
* ``ver_id``, the producing function version, null for ingested rows;
* ``anchor_lid``, the table-level lineage entry standing in for the row
  when it has no row-level entries of its own.

Ingest batches chain their table-level entries (a second batch's entry points
at the first), so a relation always has a single current anchor from which
all contributing sources are reachable.
"""

from __future__ import annotations

import json
import logging
import os
import random
from typing import Any, Iterator

from .errors import (
    DuplicateName,
    InvalidSchema,
    KeyViolation,
    TypeMismatch,
    UnknownRelation,
)
from .lineage import LineageStore
from .values import SYSTEM_COLUMNS, Schema, ValueType, check_value, schema

logger = logging.getLogger(__name__)

RELATION_KINDS = ("base", "view", "intermediate")

JOINABLE_TYPES = (ValueType.TEXT, ValueType.URI, ValueType.INT64)


class Relation:
    """One named, typed, columnar table plus its system fields."""

    def __init__(self, name: str, rel_schema: Schema, kind: str, table_lid: int):
        if kind not in RELATION_KINDS:
            raise InvalidSchema(f"unknown relation kind {kind!r}")
        self.name = name
        self.schema = rel_schema
        self.kind = kind
        self.table_lid = table_lid
        self._columns: dict[str, list[Any]] = {c.name: [] for c in rel_schema.declared()}
        self._lids: list[int] = []
        self._parent_lids: list[int | None] = []
        self._ver_ids: list[int | None] = []
        self._anchor_lids: list[int] = []
        self._lid_index: dict[int, int] = {}
        key_names = rel_schema.key_names()
        self._key_names = key_names
        self._key_index: set[tuple] = set()

    # -- writes ---------------------------------------------------------------

    def check_values(self, values: dict[str, Any]) -> dict[str, Any]:
        """Validate one row of caller data against the declared schema."""
        for name in values:
            if name in SYSTEM_COLUMNS or name in ("ver_id", "anchor_lid"):
                raise TypeMismatch(f"column {name!r} is system-managed")
            if not self.schema.has_column(name):
                raise TypeMismatch(f"relation {self.name!r} has no column {name!r}")
        checked = {}
        for col in self.schema.declared():
            checked[col.name] = check_value(col.type, values.get(col.name))
        return checked

    def append_row(
        self,
        values: dict[str, Any],
        *,
        lid: int,
        anchor_lid: int,
        parent_lid: int | None = None,
        ver_id: int | None = None,
    ) -> None:
        checked = self.check_values(values)
        if self._key_names:
            key = tuple(checked[k] for k in self._key_names)
            if any(part is None for part in key):
                raise KeyViolation(f"{self.name}: null in key columns {self._key_names}")
            if key in self._key_index:
                raise KeyViolation(f"{self.name}: duplicate key {key!r}")
            self._key_index.add(key)
        for name, vals in self._columns.items():
            vals.append(checked[name])
        self._lid_index[lid] = len(self._lids)
        self._lids.append(lid)
        self._parent_lids.append(parent_lid)
        self._ver_ids.append(ver_id)
        self._anchor_lids.append(anchor_lid)

    # -- reads ----------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._lids)

    @property
    def row_count(self) -> int:
        return len(self._lids)

    def row(self, i: int) -> dict[str, Any]:
        out = {name: vals[i] for name, vals in self._columns.items()}
        out["lid"] = self._lids[i]
        out["parent_lid"] = self._parent_lids[i]
        out["ver_id"] = self._ver_ids[i]
        return out

    def rows(self) -> Iterator[dict[str, Any]]:
        for i in range(len(self._lids)):
            yield self.row(i)

    def row_by_lid(self, lid: int) -> dict[str, Any]:
        if lid not in self._lid_index:
            raise UnknownRelation(f"{self.name} has no row with lid {lid}")
        return self.row(self._lid_index[lid])

    def has_lid(self, lid: int) -> bool:
        return lid in self._lid_index

    def anchor_for_row(self, i: int) -> int:
        return self._anchor_lids[i]

    def lids(self) -> list[int]:
        return list(self._lids)

    def column(self, name: str) -> list[Any]:
        if name == "lid":
            return list(self._lids)
        if name == "parent_lid":
            return list(self._parent_lids)
        if name in self._columns:
            return list(self._columns[name])
        raise UnknownRelation(f"relation {self.name!r} has no column {name!r}")

    def to_record(self, i: int) -> dict[str, Any]:
        rec = {name: vals[i] for name, vals in self._columns.items()}
        rec["lid"] = self._lids[i]
        rec["parent_lid"] = self._parent_lids[i]
        rec["ver_id"] = self._ver_ids[i]
        rec["anchor_lid"] = self._anchor_lids[i]
        return rec


class Store:
    """Catalog of relations plus the shared lineage log."""

    def __init__(self, lineage: LineageStore | None = None):
        self.lineage = lineage or LineageStore()
        self._relations: dict[str, Relation] = {}
        self.bundles: dict[str, dict[str, str]] = {}

    # -- relation lifecycle -----------------------------------------------------

    def create_relation(self, name: str, rel_schema: Schema, kind: str = "base") -> Relation:
        if name in self._relations:
            raise DuplicateName(f"relation {name!r} already exists")
        table_lid = self.lineage.record_creation("create_relation")
        rel = Relation(name, rel_schema, kind, table_lid)
        self._relations[name] = rel
        return rel

    def create_derived_relation(
        self, name: str, rel_schema: Schema, table_lid: int, kind: str = "intermediate"
    ) -> Relation:
        """Register an execution output under an existing lineage anchor."""
        if name in self._relations:
            raise DuplicateName(f"relation {name!r} already exists")
        rel = Relation(name, rel_schema, kind, table_lid)
        self._relations[name] = rel
        return rel

    def drop_relation(self, name: str) -> None:
        self._relations.pop(name, None)

    def has_relation(self, name: str) -> bool:
        return name in self._relations

    def relation(self, name: str) -> Relation:
        try:
            return self._relations[name]
        except KeyError:
            raise UnknownRelation(f"no relation named {name!r}") from None

    def relation_names(self) -> list[str]:
        return list(self._relations)

    # -- ingest -----------------------------------------------------------------

    def ingest_rows(self, name: str, rows: list[dict[str, Any]], src_uri: str) -> tuple[int, int]:
        """Load caller rows into a relation; returns (count, ingest entry lid).

        Validation is atomic: either every row is accepted or none is stored.
        One table-level lineage entry records the batch; when the relation
        already holds data the new entry chains to the previous anchor so the
        full source history stays reachable from the current one.
        """
        rel = self.relation(name)
        checked = [rel.check_values(r) for r in rows]
        parent = rel.table_lid if rel.row_count > 0 else None
        entry_lid = self.lineage.record_ingest(src_uri, "ingest_rows", parent=parent)
        for values in checked:
            lid = self.lineage.allocate_lid()
            rel.append_row(values, lid=lid, anchor_lid=entry_lid)
            self.lineage.register_row(lid, entry_lid)
        rel.table_lid = entry_lid
        logger.debug("ingested %d rows into %s from %s", len(rows), name, src_uri)
        return len(rows), entry_lid

    # -- reads -------------------------------------------------------------------

    def visible_rows(self, name: str) -> list[dict[str, Any]]:
        """Rows of a relation minus tuples superseded by anomaly resolutions."""
        rel = self.relation(name)
        sup = self.lineage._superseded
        if not sup:
            return list(rel.rows())
        return [r for r in rel.rows() if r["lid"] not in sup]

    def sample_rows(self, name: str, k: int, seed: int = 7) -> list[dict[str, Any]]:
        """Deterministic sample: a pure function of (relation contents, k, seed)."""
        rel = self.relation(name)
        n = rel.row_count
        if k >= n:
            return [rel.row(i) for i in range(n)]
        rng = random.Random(f"{seed}|{name}|{n}|{k}")
        picked = sorted(rng.sample(range(n), k))
        return [rel.row(i) for i in picked]

    def joinability(self, left: str, right: str, limit: int = 3) -> list[dict[str, Any]]:
        """Rank candidate equi-join column pairs by value overlap."""
        lrel, rrel = self.relation(left), self.relation(right)
        candidates = []
        for lc in lrel.schema.declared():
            if lc.type not in JOINABLE_TYPES:
                continue
            lvals = {v for v in lrel.column(lc.name) if v is not None}
            if not lvals:
                continue
            for rc in rrel.schema.declared():
                if rc.type is not lc.type:
                    continue
                rvals = {v for v in rrel.column(rc.name) if v is not None}
                if not rvals:
                    continue
                inter = len(lvals & rvals)
                if inter == 0:
                    continue
                overlap = inter / min(len(lvals), len(rvals))
                candidates.append(
                    {
                        "left_column": lc.name,
                        "right_column": rc.name,
                        "overlap": round(overlap, 6),
                    }
                )
        candidates.sort(key=lambda c: (-c["overlap"], c["left_column"], c["right_column"]))
        return candidates[:limit]

    # -- graph bundles -------------------------------------------------------------

    def register_bundle(self, bundle_kind: str, roles: dict[str, str]) -> None:
        for role, rel_name in roles.items():
            if rel_name not in self._relations:
                raise UnknownRelation(
                    f"bundle {bundle_kind!r} role {role!r} names missing relation {rel_name!r}"
                )
        self.bundles[bundle_kind] = dict(roles)

    def create_scene_bundle(self) -> dict[str, str]:
        """Relations for scene graphs over video frames (images are one-frame)."""
        self.create_relation(
            "Objects",
            schema(
                ("vid", "text", True),
                ("fid", "int64", True),
                ("oid", "int64", True),
                ("lid", "int64"),
                ("cid", "text"),
                ("x1", "float64"),
                ("y1", "float64"),
                ("x2", "float64"),
                ("y2", "float64"),
            ),
            kind="view",
        )
        self.create_relation(
            "ObjectRelationships",
            schema(
                ("vid", "text", True),
                ("fid", "int64", True),
                ("rid", "int64", True),
                ("lid", "int64"),
                ("oid_i", "int64"),
                ("pid", "text"),
                ("oid_j", "int64"),
            ),
            kind="view",
        )
        self.create_relation(
            "ObjectAttributes",
            schema(
                ("vid", "text", True),
                ("fid", "int64", True),
                ("oid", "int64", True),
                ("k", "text", True),
                ("lid", "int64"),
                ("v", "text"),
            ),
            kind="view",
        )
        self.create_relation(
            "Frames",
            schema(
                ("vid", "text", True),
                ("fid", "int64", True),
                ("lid", "int64"),
                ("pixels", "uri"),
            ),
            kind="view",
        )
        roles = {
            "objects": "Objects",
            "relationships": "ObjectRelationships",
            "attributes": "ObjectAttributes",
            "frames": "Frames",
        }
        self.register_bundle("scene", roles)
        return roles

    def create_text_bundle(self) -> dict[str, str]:
        """Relations for semantic graphs extracted from text documents."""
        self.create_relation(
            "Entities",
            schema(
                ("did", "text", True),
                ("eid", "int64", True),
                ("lid", "int64"),
                ("cid", "text"),
            ),
            kind="view",
        )
        self.create_relation(
            "Mentions",
            schema(
                ("did", "text", True),
                ("sid", "int64", True),
                ("mid", "int64", True),
                ("lid", "int64"),
                ("eid", "int64"),
                ("span1", "int64"),
                ("span2", "int64"),
            ),
            kind="view",
        )
        self.create_relation(
            "EntityRelationships",
            schema(
                ("did", "text", True),
                ("sid", "int64", True),
                ("rid", "int64", True),
                ("lid", "int64"),
                ("eid_i", "int64"),
                ("pid", "text"),
                ("eid_j", "int64"),
            ),
            kind="view",
        )
        self.create_relation(
            "EntityAttributes",
            schema(
                ("did", "text", True),
                ("sid", "int64", True),
                ("eid", "int64", True),
                ("k", "text", True),
                ("lid", "int64"),
                ("v", "text"),
            ),
            kind="view",
        )
        self.create_relation(
            "Texts",
            schema(("did", "text", True), ("lid", "int64"), ("chars", "text")),
            kind="view",
        )
        roles = {
            "entities": "Entities",
            "mentions": "Mentions",
            "relationships": "EntityRelationships",
            "attributes": "EntityAttributes",
            "texts": "Texts",
        }
        self.register_bundle("text", roles)
        return roles

    # -- catalog -------------------------------------------------------------------

    def catalog(self) -> dict[str, Any]:
        relations = {}
        for name, rel in self._relations.items():
            relations[name] = {
                "kind": rel.kind,
                "schema": rel.schema.to_wire(),
                "keys": rel.schema.key_names(),
                "row_count": rel.row_count,
                "table_lid": rel.table_lid,
            }
        return {"relations": relations, "bundles": {k: dict(v) for k, v in self.bundles.items()}}

    # -- persistence ------------------------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        cat = {
            "relations": {
                name: {
                    "kind": rel.kind,
                    "schema": rel.schema.to_json(),
                    "table_lid": rel.table_lid,
                    "row_count": rel.row_count,
                }
                for name, rel in self._relations.items()
            },
            "bundles": self.bundles,
        }
        with open(os.path.join(directory, "catalog.json"), "w", encoding="utf-8") as fh:
            json.dump(cat, fh, indent=2, sort_keys=True)
        for name, rel in self._relations.items():
            path = os.path.join(directory, f"{name}.ndjson")
            with open(path, "w", encoding="utf-8") as fh:
                for i in range(rel.row_count):
                    fh.write(json.dumps(rel.to_record(i), sort_keys=True) + "\n")
        self.lineage.save(directory)

    @classmethod
    def load(cls, directory: str) -> "Store":
        lineage = LineageStore.load(directory)
        store = cls(lineage)
        cat_path = os.path.join(directory, "catalog.json")
        if not os.path.exists(cat_path):
            return store
        with open(cat_path, encoding="utf-8") as fh:
            cat = json.load(fh)
        for name, desc in cat["relations"].items():
            rel = Relation(name, Schema.from_json(desc["schema"]), desc["kind"], desc["table_lid"])
            store._relations[name] = rel
            path = os.path.join(directory, f"{name}.ndjson")
            if not os.path.exists(path):
                continue
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    lid = rec.pop("lid")
                    parent_lid = rec.pop("parent_lid")
                    ver_id = rec.pop("ver_id")
                    anchor_lid = rec.pop("anchor_lid")
                    rel.append_row(
                        rec,
                        lid=lid,
                        anchor_lid=anchor_lid,
                        parent_lid=parent_lid,
                        ver_id=ver_id,
                    )
                    if not lineage.has_entries(lid):
                        lineage.register_row(lid, anchor_lid)
        store.bundles = {k: dict(v) for k, v in cat.get("bundles", {}).items()}
        return store
