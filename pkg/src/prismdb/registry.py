"""Versioned function registry.

A pipeline treats functions as operators: the signature (typed inputs, typed
output, prose description) is the logical operator, and each synthesized or
repaired body is one physical operator version. Versions are numbered from 1,
strictly increasing per function, and earlier versions are never mutated or
deleted, so any historical execution can be re-read or re-run.

Each implementation is persisted as ``<root>/<func_id>/v<ver_id>.json`` the
moment it is registered; the signature lives next to them. Bodies are either
template instances (see prismdb.templates) or external code run in a
subprocess (see run_external_body).
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Any

from .errors import (
    DuplicateFunction,
    RuntimeFault,
    TemplateParamError,
    UnknownFunction,
    UnknownVersion,
)
from .lineage import DependencyPattern
from .templates import PATTERN_BY_KIND, body_pattern
from .values import Schema


@dataclass
class FunctionSignature:
    """The logical operator: what the function consumes and produces."""

    name: str
    inputs: list[str]
    output_name: str
    output_schema: Schema
    description: str

    def to_wire(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "inputs": list(self.inputs),
            "output": {"name": self.output_name, "columns": self.output_schema.to_wire()},
            "description": self.description,
        }

    @classmethod
    def from_wire(cls, data: dict[str, Any]) -> "FunctionSignature":
        return cls(
            name=data["name"],
            inputs=list(data["inputs"]),
            output_name=data["output"]["name"],
            output_schema=Schema.from_wire(data["output"]["columns"]),
            description=data["description"],
        )


@dataclass
class FunctionImpl:
    """One physical operator version."""

    func_id: str
    ver_id: int
    pattern: DependencyPattern
    body: dict[str, Any]
    profile: dict[str, Any] | None = None
    verdict: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "func_id": self.func_id,
            "ver_id": self.ver_id,
            "pattern": self.pattern.value,
            "body": self.body,
            "profile": self.profile,
            "verdict": self.verdict,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "FunctionImpl":
        return cls(
            func_id=data["func_id"],
            ver_id=data["ver_id"],
            pattern=DependencyPattern(data["pattern"]),
            body=data["body"],
            profile=data.get("profile"),
            verdict=data.get("verdict"),
        )


def impl_pattern(body: dict) -> DependencyPattern:
    """Dependency pattern of a body: fixed by kind for templates, declared
    explicitly for external code."""
    kind = body.get("kind")
    if kind == "external":
        raw = body.get("pattern")
        try:
            return DependencyPattern(raw)
        except ValueError:
            raise TemplateParamError(
                f"external body must declare a valid pattern, got {raw!r}"
            ) from None
    if kind in PATTERN_BY_KIND:
        return body_pattern(body)
    raise TemplateParamError(f"unknown body kind {kind!r}")


class FunctionRegistry:
    """Signatures plus append-only version lists, persisted eagerly."""

    def __init__(self, root: str | None = None):
        self.root = root
        self._signatures: dict[str, FunctionSignature] = {}
        self._impls: dict[str, list[FunctionImpl]] = {}
        if root:
            os.makedirs(root, exist_ok=True)

    # -- signatures -----------------------------------------------------------

    def register_signature(self, sig: FunctionSignature) -> None:
        if sig.name in self._signatures:
            raise DuplicateFunction(f"function {sig.name!r} is already registered")
        self._signatures[sig.name] = sig
        self._impls[sig.name] = []
        if self.root:
            func_dir = os.path.join(self.root, sig.name)
            os.makedirs(func_dir, exist_ok=True)
            with open(os.path.join(func_dir, "signature.json"), "w", encoding="utf-8") as fh:
                json.dump(sig.to_wire(), fh, indent=2)

    def has_function(self, func_id: str) -> bool:
        return func_id in self._signatures

    def signature(self, func_id: str) -> FunctionSignature:
        try:
            return self._signatures[func_id]
        except KeyError:
            raise UnknownFunction(f"no function named {func_id!r}") from None

    def function_ids(self) -> list[str]:
        return list(self._signatures)

    # -- versions ----------------------------------------------------------------

    def add_implementation(self, func_id: str, body: dict[str, Any]) -> FunctionImpl:
        sig = self.signature(func_id)
        versions = self._impls[sig.name]
        impl = FunctionImpl(
            func_id=func_id,
            ver_id=len(versions) + 1,
            pattern=impl_pattern(body),
            body=body,
        )
        versions.append(impl)
        self._persist(impl)
        return impl

    def attach_profile(
        self, func_id: str, ver_id: int, profile: dict[str, Any], verdict: str
    ) -> None:
        impl = self.implementation(func_id, ver_id)
        impl.profile = profile
        impl.verdict = verdict
        self._persist(impl)

    def implementation(self, func_id: str, ver_id: int) -> FunctionImpl:
        versions = self._impls.get(func_id)
        if versions is None:
            raise UnknownFunction(f"no function named {func_id!r}")
        if not (1 <= ver_id <= len(versions)):
            raise UnknownVersion(f"{func_id} has no version {ver_id}")
        return versions[ver_id - 1]

    def latest(self, func_id: str) -> FunctionImpl:
        versions = self._impls.get(func_id)
        if versions is None:
            raise UnknownFunction(f"no function named {func_id!r}")
        if not versions:
            raise UnknownVersion(f"{func_id} has no implementations yet")
        return versions[-1]

    def versions(self, func_id: str) -> list[FunctionImpl]:
        if func_id not in self._impls:
            raise UnknownFunction(f"no function named {func_id!r}")
        return list(self._impls[func_id])

    def _persist(self, impl: FunctionImpl) -> None:
        if not self.root:
            return
        func_dir = os.path.join(self.root, impl.func_id)
        os.makedirs(func_dir, exist_ok=True)
        path = os.path.join(func_dir, f"v{impl.ver_id}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(impl.to_json(), fh, indent=2, sort_keys=True)

    # -- persistence ----------------------------------------------------------------

    @classmethod
    def load(cls, root: str) -> "FunctionRegistry":
        reg = cls(root=None)
        reg.root = root
        if not os.path.isdir(root):
            return reg
        for func_id in sorted(os.listdir(root)):
            func_dir = os.path.join(root, func_id)
            sig_path = os.path.join(func_dir, "signature.json")
            if not os.path.isfile(sig_path):
                continue
            with open(sig_path, encoding="utf-8") as fh:
                sig = FunctionSignature.from_wire(json.load(fh))
            reg._signatures[sig.name] = sig
            impls = []
            ver = 1
            while os.path.isfile(os.path.join(func_dir, f"v{ver}.json")):
                with open(os.path.join(func_dir, f"v{ver}.json"), encoding="utf-8") as fh:
                    impls.append(FunctionImpl.from_json(json.load(fh)))
                ver += 1
            reg._impls[sig.name] = impls
        return reg


# ---------------------------------------------------------------------------
# external code bodies

_ROW_RUNNER = r"""
import json, sys

ns = {}
exec(open(sys.argv[1], encoding="utf-8").read(), ns)
fn = ns[sys.argv[2]]
payload = json.load(sys.stdin)
rows = payload["rows"]
offset = payload.get("offset", 0)
out, error = [], None
for i, row in enumerate(rows):
    try:
        produced = fn(row)
    except Exception as exc:
        error = {"message": f"{type(exc).__name__}: {exc}", "cursor": offset + i}
        break
    if produced is None:
        produced = []
    elif isinstance(produced, dict):
        produced = [produced]
    for values in produced:
        out.append({"parent_index": offset + i, "values": values})
json.dump({"rows": out, "error": error}, sys.stdout)
"""

_TABLE_RUNNER = r"""
import json, sys

ns = {}
exec(open(sys.argv[1], encoding="utf-8").read(), ns)
fn = ns[sys.argv[2]]
payload = json.load(sys.stdin)
try:
    produced = fn(payload["tables"]) or []
    out = [{"parent_index": None, "values": values} for values in produced]
    error = None
except Exception as exc:
    out, error = [], {"message": f"{type(exc).__name__}: {exc}", "cursor": None}
json.dump({"rows": out, "error": error}, sys.stdout)
"""


def run_external_body(
    body: dict[str, Any], payload: dict[str, Any], timeout_s: float = 30.0
) -> dict[str, Any]:
    """Run an external code body in an isolated subprocess.

    Row-mode payload: {"rows": [...], "offset": n}; the runner calls the
    entrypoint once per row and reports the first failure with its cursor so
    the caller can repair and resume. Table-mode payload: {"tables": [...]}.
    """
    language = body.get("language", "python")
    if language != "python":
        raise TemplateParamError(f"unsupported external language {language!r}")
    mode = body.get("mode", "row")
    runner = _ROW_RUNNER if mode == "row" else _TABLE_RUNNER
    entrypoint = body.get("entrypoint", "transform")
    with tempfile.TemporaryDirectory(prefix="prismdb-ext-") as tmp:
        code_path = os.path.join(tmp, "body.py")
        with open(code_path, "w", encoding="utf-8") as fh:
            fh.write(body.get("code", ""))
        try:
            proc = subprocess.run(
                [sys.executable, "-c", runner, code_path, entrypoint],
                input=json.dumps(payload),
                capture_output=True,
                text=True,
                timeout=timeout_s,
                cwd=tmp,
            )
        except subprocess.TimeoutExpired:
            raise RuntimeFault(f"external body timed out after {timeout_s}s") from None
    if proc.returncode != 0:
        tail = (proc.stderr or "").strip().splitlines()[-3:]
        raise RuntimeFault("external body crashed: " + " | ".join(tail))
    try:
        return json.loads(proc.stdout)
    except json.JSONDecodeError:
        raise RuntimeFault("external body produced unparseable output") from None
