"""Bundled film-catalog fixture and directory ingest helpers.

The fixture is a small multimodal dataset: a film table, one annotated text
document per plot, and one annotated poster scene per film. It backs the
worked example in the README and the end-to-end tests.
"""

from __future__ import annotations

import json
import logging
import os
from importlib import resources

from .annotations import add_scene_annotation, add_text_annotation
from .store import Store
from .values import Column, Schema, ValueType

logger = logging.getLogger(__name__)

DEMO_QUERY = (
    "Sort the films in the table by how exciting they are, and the poster "
    "should not be 'boring'."
)
DEMO_CLARIFICATION_ANSWER = (
    "The movie plot contains scenes that are uncommon in real life."
)
DEMO_SKETCH_FEEDBACK = (
    "Please also favor recent releases; newer films should rank higher."
)


def scripted_inputs() -> list[str]:
    """The three user turns that drive the worked example to completion."""
    return [DEMO_CLARIFICATION_ANSWER, DEMO_SKETCH_FEEDBACK, "approve"]


def fixture_path() -> str:
    return str(resources.files("prismdb.fixtures").joinpath("data"))


def _schema_from_doc(doc: dict) -> Schema:
    cols = [
        Column(c["name"], ValueType(c["type"]), bool(c.get("is_key", False)))
        for c in doc["columns"]
    ]
    return Schema(cols)


def ingest_directory(store: Store, directory: str) -> dict:
    """Load a data directory into the store.

    Recognized files, processed in sorted order per group:
      *.schema.json        relation description {name, kind, columns}
      <name>.ndjson        rows for the relation of the same stem
      text_*.json          annotated text document
      scene_*.json         annotated scene document
    """
    names = sorted(os.listdir(directory))
    summary = {"relations": {}, "texts": 0, "scenes": 0}
    for fname in names:
        if not fname.endswith(".schema.json"):
            continue
        path = os.path.join(directory, fname)
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        name = doc["name"]
        store.create_relation(name, _schema_from_doc(doc), kind=doc.get("kind", "base"))
        rows_path = os.path.join(directory, f"{name}.ndjson")
        count = 0
        if os.path.isfile(rows_path):
            rows = []
            with open(rows_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rows.append(json.loads(line))
            count, _ = store.ingest_rows(name, rows, src_uri=f"file://{rows_path}")
        summary["relations"][name] = count
        logger.info("ingested relation %s (%d rows)", name, count)
    for fname in names:
        path = os.path.join(directory, fname)
        if fname.startswith("text_") and fname.endswith(".json"):
            with open(path, encoding="utf-8") as fh:
                add_text_annotation(store, json.load(fh), src_uri=f"file://{path}")
            summary["texts"] += 1
        elif fname.startswith("scene_") and fname.endswith(".json"):
            with open(path, encoding="utf-8") as fh:
                add_scene_annotation(store, json.load(fh), src_uri=f"file://{path}")
            summary["scenes"] += 1
    return summary


def load_demo_store() -> Store:
    store = Store()
    ingest_directory(store, fixture_path())
    return store
