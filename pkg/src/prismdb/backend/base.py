"""Synthesis backend protocol.

A request names one of ten tasks, carries a JSON context, and declares the
payload shape it expects back. Responses carry the payload plus usage
accounting. Payloads are validated against the declared format schema on
both the deterministic path and the HTTP path, so a misbehaving provider
fails loudly (SchemaViolation) instead of corrupting downstream state.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Protocol

from ..errors import SchemaViolation

TASKS = (
    "review_query",
    "generate_sketch",
    "correct_sketch",
    "write_plan",
    "verify_plan",
    "code_node",
    "critique_node",
    "classify_dependency",
    "diagnose_fault",
    "answer_question",
)


@dataclass
class SynthesisRequest:
    task: str
    context: dict[str, Any]
    format_schema: dict[str, Any]

    def to_json(self) -> dict[str, Any]:
        return {"task": self.task, "context": self.context, "format_schema": self.format_schema}


@dataclass
class SynthesisResponse:
    payload: dict[str, Any]
    usage: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"payload": self.payload, "usage": self.usage}


class SynthesisProvider(Protocol):
    def run(self, request: SynthesisRequest) -> SynthesisResponse: ...


# ---------------------------------------------------------------------------
# payload format schemas (a small JSON-schema subset: object/array/scalars,
# required keys, nullability via a type list)

FORMAT_SCHEMAS: dict[str, dict[str, Any]] = {
    "review_query": {
        "type": "object",
        "required": ["action", "assumptions"],
        "properties": {
            "action": {"type": "string"},
            "question": {"type": ["string", "null"]},
            "term": {"type": ["string", "null"]},
            "assumptions": {"type": "array", "items": {"type": "string"}},
        },
    },
    "generate_sketch": {
        "type": "object",
        "required": ["steps"],
        "properties": {"steps": {"type": "array", "items": {"type": "string"}}},
    },
    "correct_sketch": {
        "type": "object",
        "required": ["steps"],
        "properties": {"steps": {"type": "array", "items": {"type": "string"}}},
    },
    "write_plan": {
        "type": "object",
        "required": ["nodes", "coverage"],
        "properties": {
            "nodes": {"type": "array", "items": {"type": "object"}},
            "coverage": {"type": "object"},
        },
    },
    "verify_plan": {
        "type": "object",
        "required": ["verdict", "reasons", "needs"],
        "properties": {
            "verdict": {"type": "string"},
            "reasons": {"type": "array", "items": {"type": "string"}},
            "needs": {"type": "array", "items": {"type": "string"}},
        },
    },
    "code_node": {
        "type": "object",
        "required": [],
        "properties": {"body": {"type": ["object", "null"]}, "note": {"type": ["string", "null"]}},
    },
    "critique_node": {
        "type": "object",
        "required": ["verdict"],
        "properties": {"verdict": {"type": "string"}, "hint": {"type": ["string", "null"]}},
    },
    "classify_dependency": {
        "type": "object",
        "required": ["pattern"],
        "properties": {"pattern": {"type": "string"}},
    },
    "diagnose_fault": {
        "type": "object",
        "required": ["action", "summary"],
        "properties": {
            "action": {"type": "string"},
            "set": {"type": ["object", "null"]},
            "body": {"type": ["object", "null"]},
            "summary": {"type": "string"},
        },
    },
    "answer_question": {
        "type": "object",
        "required": [],
        "properties": {
            "category": {"type": ["string", "null"]},
            "target": {"type": ["object", "null"]},
            "answer": {"type": ["string", "null"]},
        },
    },
}

_TYPE_CHECKS = {
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "string": lambda v: isinstance(v, str),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "null": lambda v: v is None,
}


def _check_type(schema: dict, value: Any, path: str) -> None:
    declared = schema.get("type")
    if declared is None:
        return
    types = declared if isinstance(declared, list) else [declared]
    if not any(_TYPE_CHECKS[t](value) for t in types):
        raise SchemaViolation(f"{path}: expected {types}, got {type(value).__name__}")
    if isinstance(value, dict):
        for key, sub in schema.get("properties", {}).items():
            if key in value:
                _check_type(sub, value[key], f"{path}.{key}")
    if isinstance(value, list) and "items" in schema:
        for i, item in enumerate(value):
            _check_type(schema["items"], item, f"{path}[{i}]")


def validate_payload(format_schema: dict[str, Any], payload: Any) -> None:
    """Check a provider payload against the request's declared format."""
    if not isinstance(payload, dict):
        raise SchemaViolation("payload must be a JSON object")
    for key in format_schema.get("required", []):
        if key not in payload:
            raise SchemaViolation(f"payload is missing required key {key!r}")
    _check_type(format_schema, payload, "payload")


def request(task: str, context: dict[str, Any]) -> SynthesisRequest:
    if task not in TASKS:
        raise ValueError(f"unknown synthesis task {task!r}")
    return SynthesisRequest(task=task, context=context, format_schema=FORMAT_SCHEMAS[task])


class UsageMeter:
    """Thread-safe accumulator for provider usage accounting."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.by_task: dict[str, int] = {}

    def record(self, task: str) -> None:
        with self._lock:
            self.calls += 1
            self.by_task[task] = self.by_task.get(task, 0) + 1

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {"calls": self.calls, "by_task": dict(self.by_task)}


def make_provider(config) -> SynthesisProvider:
    """Build the provider selected by the engine config."""
    from .deterministic import DeterministicProvider
    from .external import ExternalProvider

    if config.provider == "deterministic":
        return DeterministicProvider(config)
    if config.provider == "external":
        return ExternalProvider(config)
    raise ValueError(f"unknown provider {config.provider!r}")
