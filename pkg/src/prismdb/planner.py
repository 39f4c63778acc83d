"""Logical planning: the write/verify loop over an approved sketch.

A logical plan is a DAG of named nodes, one per synthesized function. Each
node declares its inputs (stored relations or other nodes' outputs), its
output relation name and schema, and a description in the operator grammar.
The plan also records coverage: which nodes realize each sketch step.

Planning alternates between two synthesis tasks. The writer drafts nodes from
the sketch; the verifier approves, rejects with reasons, or requests more
information. Requests for information are served locally by probing the data:
join-key candidates come from column-overlap statistics and small samples,
never from guesses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .backend.base import request
from .errors import PlanningFailed
from .registry import FunctionSignature
from .values import Schema

logger = logging.getLogger(__name__)


@dataclass
class PlanNode:
    """One plan vertex; its wire form doubles as a function signature."""

    name: str
    inputs: list[str]
    output_name: str
    output_schema: Schema
    description: str

    def to_wire(self) -> dict:
        return {
            "name": self.name,
            "inputs": list(self.inputs),
            "output": {"name": self.output_name, "columns": self.output_schema.to_wire()},
            "description": self.description,
        }

    @classmethod
    def from_wire(cls, wire: dict) -> "PlanNode":
        return cls(
            name=wire["name"],
            inputs=list(wire["inputs"]),
            output_name=wire["output"]["name"],
            output_schema=Schema.from_wire(wire["output"]["columns"]),
            description=wire["description"],
        )

    def signature(self) -> FunctionSignature:
        return FunctionSignature(
            name=self.name,
            inputs=list(self.inputs),
            output_name=self.output_name,
            output_schema=self.output_schema,
            description=self.description,
        )


@dataclass
class LogicalPlan:
    nodes: list[PlanNode]
    coverage: dict[str, list[str]]
    steps: list[str]

    def node(self, name: str) -> PlanNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def producers(self) -> dict[str, PlanNode]:
        return {n.output_name: n for n in self.nodes}

    def root(self) -> PlanNode:
        consumed = {i for n in self.nodes for i in n.inputs}
        roots = [n for n in self.nodes if n.output_name not in consumed]
        if len(roots) != 1:
            raise PlanningFailed(f"plan must have exactly one root, found {len(roots)}")
        return roots[0]

    def topo_order(self) -> list[PlanNode]:
        producers = self.producers()
        ordered: list[PlanNode] = []
        seen: set[str] = set()

        def visit(node: PlanNode, stack: tuple[str, ...]) -> None:
            if node.name in stack:
                raise PlanningFailed("plan has a dependency cycle")
            if node.name in seen:
                return
            for inp in node.inputs:
                if inp in producers:
                    visit(producers[inp], stack + (node.name,))
            seen.add(node.name)
            ordered.append(node)

        for node in self.nodes:
            visit(node, ())
        return ordered

    def to_json(self) -> dict:
        return {
            "nodes": [n.to_wire() for n in self.nodes],
            "coverage": {k: list(v) for k, v in self.coverage.items()},
            "steps": list(self.steps),
        }

    @classmethod
    def from_json(cls, data: dict) -> "LogicalPlan":
        return cls(
            nodes=[PlanNode.from_wire(w) for w in data["nodes"]],
            coverage={k: list(v) for k, v in data["coverage"].items()},
            steps=list(data["steps"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


@dataclass
class PlanReport:
    """Transcript of the planning loop, kept for explanations."""

    iterations: list[dict] = field(default_factory=list)
    hints: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"iterations": self.iterations, "hints": self.hints}


def build_plan(provider, store, steps, query, clarifications, config) -> tuple[LogicalPlan, PlanReport]:
    """Run the write/verify loop until approval or the iteration bound."""
    catalog = store.catalog()
    hints: dict = {}
    report = PlanReport()
    last_reasons: list[str] = []
    for iteration in range(1, config.max_plan_iterations + 1):
        draft = provider.run(
            request(
                "write_plan",
                {
                    "query": query,
                    "steps": steps,
                    "clarifications": clarifications,
                    "catalog": catalog,
                    "hints": hints,
                },
            )
        ).payload
        verdict = provider.run(
            request(
                "verify_plan",
                {
                    "steps": steps,
                    "nodes": draft["nodes"],
                    "coverage": draft["coverage"],
                    "catalog": catalog,
                },
            )
        ).payload
        report.iterations.append(
            {
                "iteration": iteration,
                "verdict": verdict["verdict"],
                "reasons": list(verdict.get("reasons", [])),
                "needs": list(verdict.get("needs", [])),
                "nodes": [n["name"] for n in draft["nodes"]],
            }
        )
        logger.info(
            "plan iteration %d: %s (%d nodes)",
            iteration,
            verdict["verdict"],
            len(draft["nodes"]),
        )
        if verdict["verdict"] == "APPROVE":
            plan = LogicalPlan(
                nodes=[PlanNode.from_wire(w) for w in draft["nodes"]],
                coverage=draft["coverage"],
                steps=list(steps),
            )
            report.hints = hints
            return plan, report
        if verdict["verdict"] == "NEED_INFO":
            gathered = _gather_hints(store, draft["nodes"], config)
            if not gathered:
                raise PlanningFailed(
                    "verifier requested information the data cannot provide: "
                    + ", ".join(verdict.get("needs", []))
                )
            hints = _merge_hints(hints, gathered)
            continue
        last_reasons = list(verdict.get("reasons", []))
        hints = _merge_hints(hints, {"rejections": last_reasons})
    raise PlanningFailed(
        "no plan approved within "
        f"{config.max_plan_iterations} iterations"
        + (": " + "; ".join(last_reasons) if last_reasons else ""),
        hints=report.to_json(),
    )


def _merge_hints(base: dict, extra: dict) -> dict:
    merged = {k: v for k, v in base.items()}
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def _gather_hints(store, nodes: list[dict], config) -> dict:
    """Probe stored data for the join keys the draft left unresolved."""
    producers = {n["output"]["name"]: n for n in nodes}
    known = set(store.catalog()["relations"])

    def resolve_base(name: str) -> str | None:
        # names produced inside the plan shadow any stored relation of the
        # same name: execution will overwrite those, so evidence must come
        # from the relations they are ultimately derived from
        seen = set()
        while name in producers:
            if name in seen:
                return None
            seen.add(name)
            name = producers[name]["inputs"][0]
        return name if name in known else None

    joinability: dict[str, list[dict]] = {}
    samples: dict[str, list[dict]] = {}
    for node in nodes:
        if " on ? = ?" not in node["description"] or len(node["inputs"]) != 2:
            continue
        left_base = resolve_base(node["inputs"][0])
        right_base = resolve_base(node["inputs"][1])
        if left_base is None or right_base is None:
            continue
        key = f"{left_base}|{right_base}"
        if key in joinability:
            continue
        joinability[key] = store.joinability(left_base, right_base)
        for rel in (left_base, right_base):
            if rel not in samples:
                samples[rel] = store.sample_rows(rel, config.sample_rows, seed=config.seed)
        logger.info(
            "gathered joinability evidence for %s: %s",
            key,
            [(c["left_column"], c["right_column"]) for c in joinability[key][:2]],
        )
    hints: dict = {}
    if joinability:
        hints["joinability"] = joinability
        hints["samples"] = samples
    return hints
