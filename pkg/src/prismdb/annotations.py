"""Parsing and validation of graph annotations.

Multimodal inputs arrive as JSON documents describing either a scene graph
extracted from a video (or a still image, which is a one-frame video) or a
semantic graph extracted from a text document. This module validates a
document's internal references and flattens it into rows for the view
relations of the matching bundle.

Scene document shape::

    {"vid": "v1", "frames": [
        {"fid": 0, "pixels": "posters/v1.png",
         "objects": [{"oid": 1, "cid": "person", "bbox": [x1, y1, x2, y2]}],
         "relationships": [{"rid": 1, "oid_i": 1, "pid": "holding", "oid_j": 2}],
         "attributes": [{"oid": 1, "k": "color", "v": "red"}]}]}

Text document shape::

    {"did": "d1", "chars": "...full text...",
     "entities": [{"eid": 1, "cid": "object"}],
     "mentions": [{"sid": 0, "mid": 1, "eid": 1, "span1": 0, "span2": 4}],
     "relationships": [{"sid": 0, "rid": 1, "eid_i": 1, "pid": "chases", "eid_j": 2}],
     "attributes": [{"sid": 0, "eid": 1, "k": "label", "v": "gun"}]}
"""

from __future__ import annotations

from typing import Any

from .errors import DanglingReference, MalformedAnnotation, SpanOutOfRange
from .store import Store


def _require(doc: dict, field: str, kind: type, ctx: str) -> Any:
    if field not in doc:
        raise MalformedAnnotation(f"{ctx}: missing field {field!r}")
    value = doc[field]
    if kind is int and isinstance(value, bool):
        raise MalformedAnnotation(f"{ctx}: field {field!r} must be {kind.__name__}")
    if not isinstance(value, kind):
        raise MalformedAnnotation(f"{ctx}: field {field!r} must be {kind.__name__}")
    return value


def _require_list(doc: dict, field: str, ctx: str) -> list:
    value = doc.get(field, [])
    if not isinstance(value, list):
        raise MalformedAnnotation(f"{ctx}: field {field!r} must be a list")
    return value


def validate_scene(doc: dict) -> dict[str, list[dict[str, Any]]]:
    """Validate a scene document and return rows per bundle role."""
    if not isinstance(doc, dict):
        raise MalformedAnnotation("scene annotation must be a JSON object")
    vid = _require(doc, "vid", str, "scene")
    frames = _require_list(doc, "frames", f"scene {vid}")
    if not frames:
        raise MalformedAnnotation(f"scene {vid}: needs at least one frame")
    out: dict[str, list[dict[str, Any]]] = {
        "objects": [],
        "relationships": [],
        "attributes": [],
        "frames": [],
    }
    for frame in frames:
        ctx = f"scene {vid}"
        fid = _require(frame, "fid", int, ctx)
        ctx = f"scene {vid} frame {fid}"
        pixels = _require(frame, "pixels", str, ctx)
        out["frames"].append({"vid": vid, "fid": fid, "pixels": pixels})
        oids: set[int] = set()
        for obj in _require_list(frame, "objects", ctx):
            oid = _require(obj, "oid", int, ctx)
            cid = _require(obj, "cid", str, ctx)
            bbox = _require(obj, "bbox", list, ctx)
            if len(bbox) != 4 or not all(isinstance(v, (int, float)) for v in bbox):
                raise MalformedAnnotation(f"{ctx}: object {oid} bbox must be 4 numbers")
            oids.add(oid)
            out["objects"].append(
                {
                    "vid": vid,
                    "fid": fid,
                    "oid": oid,
                    "cid": cid,
                    "x1": float(bbox[0]),
                    "y1": float(bbox[1]),
                    "x2": float(bbox[2]),
                    "y2": float(bbox[3]),
                }
            )
        for relationship in _require_list(frame, "relationships", ctx):
            rid = _require(relationship, "rid", int, ctx)
            oid_i = _require(relationship, "oid_i", int, ctx)
            oid_j = _require(relationship, "oid_j", int, ctx)
            pid = _require(relationship, "pid", str, ctx)
            for ref in (oid_i, oid_j):
                if ref not in oids:
                    raise DanglingReference(f"{ctx}: relationship {rid} references object {ref}")
            out["relationships"].append(
                {"vid": vid, "fid": fid, "rid": rid, "oid_i": oid_i, "pid": pid, "oid_j": oid_j}
            )
        for attribute in _require_list(frame, "attributes", ctx):
            oid = _require(attribute, "oid", int, ctx)
            if oid not in oids:
                raise DanglingReference(f"{ctx}: attribute references object {oid}")
            out["attributes"].append(
                {
                    "vid": vid,
                    "fid": fid,
                    "oid": oid,
                    "k": _require(attribute, "k", str, ctx),
                    "v": _require(attribute, "v", str, ctx),
                }
            )
    return out


def validate_text(doc: dict) -> dict[str, list[dict[str, Any]]]:
    """Validate a text document and return rows per bundle role."""
    if not isinstance(doc, dict):
        raise MalformedAnnotation("text annotation must be a JSON object")
    did = _require(doc, "did", str, "text")
    ctx = f"text {did}"
    chars = _require(doc, "chars", str, ctx)
    out: dict[str, list[dict[str, Any]]] = {
        "entities": [],
        "mentions": [],
        "relationships": [],
        "attributes": [],
        "texts": [{"did": did, "chars": chars}],
    }
    eids: set[int] = set()
    for entity in _require_list(doc, "entities", ctx):
        eid = _require(entity, "eid", int, ctx)
        eids.add(eid)
        out["entities"].append({"did": did, "eid": eid, "cid": _require(entity, "cid", str, ctx)})
    for mention in _require_list(doc, "mentions", ctx):
        eid = _require(mention, "eid", int, ctx)
        if eid not in eids:
            raise DanglingReference(f"{ctx}: mention references entity {eid}")
        span1 = _require(mention, "span1", int, ctx)
        span2 = _require(mention, "span2", int, ctx)
        if not (0 <= span1 <= span2 <= len(chars)):
            raise SpanOutOfRange(
                f"{ctx}: mention span [{span1}, {span2}) outside text of length {len(chars)}"
            )
        out["mentions"].append(
            {
                "did": did,
                "sid": _require(mention, "sid", int, ctx),
                "mid": _require(mention, "mid", int, ctx),
                "eid": eid,
                "span1": span1,
                "span2": span2,
            }
        )
    for relationship in _require_list(doc, "relationships", ctx):
        eid_i = _require(relationship, "eid_i", int, ctx)
        eid_j = _require(relationship, "eid_j", int, ctx)
        for ref in (eid_i, eid_j):
            if ref not in eids:
                raise DanglingReference(f"{ctx}: relationship references entity {ref}")
        out["relationships"].append(
            {
                "did": did,
                "sid": _require(relationship, "sid", int, ctx),
                "rid": _require(relationship, "rid", int, ctx),
                "eid_i": eid_i,
                "pid": _require(relationship, "pid", str, ctx),
                "eid_j": eid_j,
            }
        )
    for attribute in _require_list(doc, "attributes", ctx):
        eid = _require(attribute, "eid", int, ctx)
        if eid not in eids:
            raise DanglingReference(f"{ctx}: attribute references entity {eid}")
        out["attributes"].append(
            {
                "did": did,
                "sid": _require(attribute, "sid", int, ctx),
                "eid": eid,
                "k": _require(attribute, "k", str, ctx),
                "v": _require(attribute, "v", str, ctx),
            }
        )
    return out


def add_scene_annotation(store: Store, doc: dict, src_uri: str) -> dict[str, int]:
    """Validate and ingest one scene document into the scene bundle."""
    if "scene" not in store.bundles:
        store.create_scene_bundle()
    rows_by_role = validate_scene(doc)
    roles = store.bundles["scene"]
    counts = {}
    for role, rows in rows_by_role.items():
        if rows:
            n, _ = store.ingest_rows(roles[role], rows, src_uri)
            counts[role] = n
    return counts


def add_text_annotation(store: Store, doc: dict, src_uri: str) -> dict[str, int]:
    """Validate and ingest one text document into the text bundle."""
    if "text" not in store.bundles:
        store.create_text_bundle()
    rows_by_role = validate_text(doc)
    roles = store.bundles["text"]
    counts = {}
    for role, rows in rows_by_role.items():
        if rows:
            n, _ = store.ingest_rows(roles[role], rows, src_uri)
            counts[role] = n
    return counts
