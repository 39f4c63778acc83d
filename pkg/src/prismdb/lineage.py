"""Fine-grained provenance log.

Every row and every relation in the store is identified by a lid drawn from
one global, monotonically increasing counter. The log itself is append-only:
one entry per (child lid, parent lid) edge, stamped with the function and
version that produced the child, whether the child is a row or a whole table,
and a logical timestamp.

Granularity follows the producing function's dependency pattern:

* narrow patterns (one_to_one, one_to_many) record one row-level edge per
  output row, plus one table-level "container" entry for the output relation
  so downstream table-granularity consumers have an anchor;
* wide patterns (many_to_one, many_to_many) record exactly one table-level
  child whose parents are the input relations' anchors, and no row edges.

Rows without row-level entries (ingested rows, rows of wide outputs) are
registered against their table anchor. Producers recording a row derivation
pass the anchor instead of the bare row lid when the input row has no entries
of its own, so every persisted parent_lid resolves to entry lids and a plain
BFS over the raw log is complete.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .errors import PatternMismatch, UnknownLid, UnknownParent


class DependencyPattern(str, Enum):
    ONE_TO_ONE = "one_to_one"
    ONE_TO_MANY = "one_to_many"
    MANY_TO_ONE = "many_to_one"
    MANY_TO_MANY = "many_to_many"

    @property
    def narrow(self) -> bool:
        return self in (DependencyPattern.ONE_TO_ONE, DependencyPattern.ONE_TO_MANY)

    @property
    def wide(self) -> bool:
        return not self.narrow


ROW = "row"
TABLE = "table"


@dataclass(frozen=True)
class LineageEntry:
    """One edge of the provenance DAG.

    parent_lid is None only for external input data (ingests and explicit
    relation creation). src_uri is non-null only on those external entries.
    """

    lid: int
    parent_lid: int | None
    src_uri: str | None
    func_id: str
    ver_id: int
    data_type: str
    ts: int

    def to_json(self) -> dict:
        return {
            "lid": self.lid,
            "parent_lid": self.parent_lid,
            "src_uri": self.src_uri,
            "func_id": self.func_id,
            "ver_id": self.ver_id,
            "data_type": self.data_type,
            "ts": self.ts,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LineageEntry":
        return cls(
            lid=d["lid"],
            parent_lid=d["parent_lid"],
            src_uri=d["src_uri"],
            func_id=d["func_id"],
            ver_id=d["ver_id"],
            data_type=d["data_type"],
            ts=d["ts"],
        )


class LineageStore:
    """Append-only provenance log plus the global lid allocator.

    The allocator lives here so that rows which never get their own entries
    (wide outputs, ingested rows) still draw from the same counter and lids
    are unique store-wide. ``register_row`` ties such rows to the table-level
    entry that stands in for them.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[LineageEntry] = []
        self._by_lid: dict[int, list[LineageEntry]] = {}
        self._row_anchor: dict[int, int] = {}
        self._superseded: dict[int, int] = {}
        self._next_lid = 1
        self._next_ts = 1
        self.row_tracking = True

    # -- allocation -----------------------------------------------------------

    def allocate_lid(self) -> int:
        with self._lock:
            lid = self._next_lid
            self._next_lid += 1
            return lid

    def _take_ts(self) -> int:
        ts = self._next_ts
        self._next_ts += 1
        return ts

    # -- recording ------------------------------------------------------------

    def record_ingest(
        self, src_uri: str, func_id: str, ver_id: int = 1, parent: int | None = None
    ) -> int:
        """Record arrival of external data; returns the new table-level lid.

        ``parent`` chains a later batch to the relation's previous anchor so
        every contributing source stays reachable from the newest entry.
        """
        if not src_uri:
            raise ValueError("ingest requires a source uri")
        with self._lock:
            if parent is not None and parent not in self._by_lid:
                raise UnknownParent(f"parent lid {parent} has no lineage entries")
            lid = self._next_lid
            self._next_lid += 1
            entry = LineageEntry(lid, parent, src_uri, func_id, ver_id, TABLE, self._take_ts())
            self._append(entry)
            return lid

    def record_creation(self, func_id: str, ver_id: int = 1) -> int:
        """Record creation of an empty relation (external event, no source)."""
        with self._lock:
            lid = self._next_lid
            self._next_lid += 1
            entry = LineageEntry(lid, None, None, func_id, ver_id, TABLE, self._take_ts())
            self._append(entry)
            return lid

    def record_row_derivation(
        self,
        parent_lids: int | Iterable[int],
        func_id: str,
        ver_id: int,
        pattern: DependencyPattern = DependencyPattern.ONE_TO_ONE,
    ) -> int:
        """Record a fresh row derived from parent lids; returns the child lid.

        Parents must be entry-bearing lids (the caller resolves anchor lids
        for rows that have no entries of their own).
        """
        if pattern.wide:
            raise PatternMismatch(
                f"{func_id} has wide pattern {pattern.value}; row-level lineage is not allowed"
            )
        parents = [parent_lids] if isinstance(parent_lids, int) else list(parent_lids)
        if not parents:
            raise UnknownParent("row derivation requires at least one parent lid")
        with self._lock:
            for p in parents:
                if p not in self._by_lid:
                    raise UnknownParent(f"parent lid {p} has no lineage entries")
            lid = self._next_lid
            self._next_lid += 1
            ts = self._take_ts()
            for p in parents:
                self._append(LineageEntry(lid, p, None, func_id, ver_id, ROW, ts))
            return lid

    def record_table_derivation(
        self, parent_lids: Iterable[int], func_id: str, ver_id: int
    ) -> int:
        """Record a table-level child of the given parent tables."""
        parents = list(parent_lids)
        if not parents:
            raise UnknownParent("table derivation requires at least one parent lid")
        with self._lock:
            for p in parents:
                if p not in self._by_lid:
                    raise UnknownParent(f"parent lid {p} has no lineage entries")
            lid = self._next_lid
            self._next_lid += 1
            ts = self._take_ts()
            for p in parents:
                self._append(LineageEntry(lid, p, None, func_id, ver_id, TABLE, ts))
            return lid

    def register_row(self, row_lid: int, anchor_lid: int) -> None:
        """Tie an entry-less row lid to the table entry that stands in for it."""
        if anchor_lid not in self._by_lid:
            raise UnknownParent(f"anchor lid {anchor_lid} has no lineage entries")
        self._row_anchor[row_lid] = anchor_lid

    def _append(self, entry: LineageEntry) -> None:
        self._entries.append(entry)
        self._by_lid.setdefault(entry.lid, []).append(entry)

    # -- supersession -----------------------------------------------------------

    def mark_superseded(self, lid: int, replaced_by_ver: int) -> None:
        """Flag a tuple as replaced by a later function version (log untouched)."""
        self._superseded[lid] = replaced_by_ver

    def superseded_by(self, lid: int) -> int | None:
        return self._superseded.get(lid)

    # -- queries ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[LineageEntry]:
        return list(self._entries)

    def has_entries(self, lid: int) -> bool:
        return lid in self._by_lid

    def known(self, lid: int) -> bool:
        return lid in self._by_lid or lid in self._row_anchor

    def entries_for(self, lid: int) -> list[LineageEntry]:
        if lid not in self._by_lid:
            raise UnknownLid(f"lid {lid} has no lineage entries")
        return list(self._by_lid[lid])

    def anchor_of(self, lid: int) -> int:
        """Resolve a lid to an entry-bearing lid (itself, or its table anchor)."""
        if lid in self._by_lid:
            return lid
        if lid in self._row_anchor:
            return self._row_anchor[lid]
        raise UnknownLid(f"lid {lid} is not known to the lineage store")

    def ancestors(self, lid: int) -> list[LineageEntry]:
        """Every entry in the provenance sub-DAG reachable from ``lid``.

        Traversal starts at the lid's entry-bearing anchor and follows parent
        edges to the external inputs. The anchor's own entries are included.
        """
        start = self.anchor_of(lid)
        seen: set[int] = set()
        queue = [start]
        out: list[LineageEntry] = []
        while queue:
            cur = queue.pop(0)
            if cur in seen:
                continue
            seen.add(cur)
            for entry in self._by_lid[cur]:
                out.append(entry)
                if entry.parent_lid is not None and entry.parent_lid not in seen:
                    queue.append(entry.parent_lid)
        return out

    def derivation_path(self, lid: int) -> list[tuple[str, int, str]]:
        """(func_id, ver_id, data_type) per derivation step, oldest first.

        External-input entries (null parent) are sources, not derivations, so
        the path of an ingest lid is empty. Each distinct derived lid in the
        sub-DAG contributes one item; order is topological (parents before
        children), with ties broken by timestamp then lid.
        """
        sub = self.ancestors(lid)
        by_child: dict[int, list[LineageEntry]] = {}
        for e in sub:
            by_child.setdefault(e.lid, []).append(e)
        derived = {c: es for c, es in by_child.items() if es[0].parent_lid is not None}
        # Kahn's algorithm over the derived nodes only.
        indeg: dict[int, int] = {c: 0 for c in derived}
        children_of: dict[int, list[int]] = {}
        for c, es in derived.items():
            for e in es:
                if e.parent_lid in derived:
                    indeg[c] += 1
                    children_of.setdefault(e.parent_lid, []).append(c)
        ready = sorted(
            (c for c, d in indeg.items() if d == 0),
            key=lambda c: (derived[c][0].ts, c),
        )
        ordered: list[int] = []
        while ready:
            cur = ready.pop(0)
            ordered.append(cur)
            for ch in children_of.get(cur, []):
                indeg[ch] -= 1
                if indeg[ch] == 0:
                    ready.append(ch)
            ready.sort(key=lambda c: (derived[c][0].ts, c))
        return [
            (derived[c][0].func_id, derived[c][0].ver_id, derived[c][0].data_type)
            for c in ordered
        ]

    # -- persistence ----------------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "lineage.ndjson")
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self._entries:
                fh.write(json.dumps(entry.to_json()) + "\n")
        meta = {
            "next_lid": self._next_lid,
            "next_ts": self._next_ts,
            "row_tracking": self.row_tracking,
        }
        with open(os.path.join(directory, "lineage_meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)
        with open(os.path.join(directory, "superseded.json"), "w", encoding="utf-8") as fh:
            json.dump({str(k): v for k, v in self._superseded.items()}, fh, indent=2)

    @classmethod
    def load(cls, directory: str) -> "LineageStore":
        store = cls()
        path = os.path.join(directory, "lineage.ndjson")
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        store._append(LineageEntry.from_json(json.loads(line)))
        meta_path = os.path.join(directory, "lineage_meta.json")
        if os.path.exists(meta_path):
            with open(meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
            store._next_lid = meta["next_lid"]
            store._next_ts = meta["next_ts"]
            store.row_tracking = meta.get("row_tracking", True)
        elif store._entries:
            store._next_lid = max(e.lid for e in store._entries) + 1
            store._next_ts = max(e.ts for e in store._entries) + 1
        sup_path = os.path.join(directory, "superseded.json")
        if os.path.exists(sup_path):
            with open(sup_path, encoding="utf-8") as fh:
                store._superseded = {int(k): v for k, v in json.load(fh).items()}
        return store
