"""Physical planning: plan rewrites, node synthesis, and version selection.

The optimizer turns an approved logical plan into runnable stages. It first
applies relational rewrites (predicate pushdown below joins, fusion of
adjacent row-local nodes), then synthesizes a body for every node through a
code/critique loop, profiles candidate versions on small input samples, and
picks the cheapest passing version per node.

Profiling cascades: a node's sample input is the sample output of its
upstream stage, so estimates reflect the data each stage will actually see.
Every drafted body is kept in the registry as a numbered version with its
profile and verdict; losing drafts stay visible for explanation.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .backend.base import request
from .backend.deterministic import parse_description, render_description
from .errors import (
    NoViableImplementation,
    RuntimeFault,
    SynthesisFailed,
    TemplateParamError,
)
from .planner import LogicalPlan, PlanNode
from .registry import DependencyPattern, run_external_body
from .templates import PIPELINE, TemplateContext, apply_row, apply_table
from .values import Schema

logger = logging.getLogger(__name__)

_NARROW = (DependencyPattern.ONE_TO_ONE, DependencyPattern.ONE_TO_MANY)


@dataclass
class PhysicalStage:
    """One executable stage: a plan node bound to a chosen function version."""

    node: PlanNode
    func_id: str
    ver_id: int
    pattern: DependencyPattern
    candidates: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "node": self.node.to_wire(),
            "func_id": self.func_id,
            "ver_id": self.ver_id,
            "pattern": self.pattern.value,
            "candidates": self.candidates,
        }


@dataclass
class PhysicalPlan:
    stages: list[PhysicalStage]
    rewrites: list[dict] = field(default_factory=list)

    def stage(self, func_id: str) -> PhysicalStage:
        for s in self.stages:
            if s.func_id == func_id:
                return s
        raise KeyError(func_id)

    def stage_by_output(self, output_name: str) -> PhysicalStage:
        for s in self.stages:
            if s.node.output_name == output_name:
                return s
        raise KeyError(output_name)

    def to_json(self) -> dict:
        return {
            "stages": [s.to_json() for s in self.stages],
            "rewrites": self.rewrites,
        }


# ---------------------------------------------------------------------------
# plan rewrites


def _node_kind(node: PlanNode) -> str | None:
    body = parse_description(node.description, round_no=2)
    if body is None:
        return None
    return body.get("kind")


def _node_body(node: PlanNode) -> dict | None:
    return parse_description(node.description, round_no=2)


def push_down_predicates(plan: LogicalPlan, rewrites: list[dict]) -> LogicalPlan:
    """Move filters below plain equi-joins when the predicate column comes
    intact from one side. Collecting joins are left alone: their outputs mix
    both sides."""
    nodes = list(plan.nodes)
    coverage = {k: list(v) for k, v in plan.coverage.items()}
    changed = True
    while changed:
        changed = False
        producers = {n.output_name: n for n in nodes}
        consumers: dict[str, list[PlanNode]] = {}
        for n in nodes:
            for i in n.inputs:
                consumers.setdefault(i, []).append(n)
        for node in nodes:
            body = _node_body(node)
            if body is None or body.get("kind") != "filter":
                continue
            upstream = producers.get(node.inputs[0])
            if upstream is None or len(consumers.get(upstream.output_name, [])) != 1:
                continue
            jbody = _node_body(upstream)
            if jbody is None or jbody.get("kind") != "equi_join" or jbody["params"].get("collect"):
                continue
            column = body["params"]["column"]
            side = None
            for idx, inp in enumerate(upstream.inputs):
                schema = _schema_of(inp, producers, plan)
                if schema is not None and any(c.name == column for c in schema.declared()):
                    if side is not None:
                        side = None  # ambiguous: the column exists on both sides
                        break
                    side = idx
            if side is None:
                continue
            side_input = upstream.inputs[side]
            pushed_output = f"{side_input}_filtered"
            if pushed_output in producers or pushed_output in {n.output_name for n in nodes}:
                continue
            side_schema = _schema_of(side_input, producers, plan)
            pushed = PlanNode(
                name=f"{node.name}_pushed",
                inputs=[side_input],
                output_name=pushed_output,
                output_schema=side_schema,
                description=render_description("filter", body["params"], [side_input]),
            )
            new_inputs = list(upstream.inputs)
            new_inputs[side] = pushed_output
            upstream.inputs = new_inputs
            # consumers of the removed filter now read the join directly
            for n in nodes:
                n.inputs = [upstream.output_name if i == node.output_name else i for i in n.inputs]
            nodes = [pushed if n is node else n for n in nodes]
            for step, names in coverage.items():
                coverage[step] = [pushed.name if x == node.name else x for x in names]
            rewrites.append(
                {
                    "rule": "predicate_pushdown",
                    "filter": node.name,
                    "through": upstream.name,
                    "as": pushed.name,
                }
            )
            logger.info("pushed %s below %s", node.name, upstream.name)
            changed = True
            break
    return LogicalPlan(nodes=nodes, coverage=coverage, steps=list(plan.steps))


def _schema_of(name: str, producers: dict[str, PlanNode], plan: LogicalPlan) -> Schema | None:
    if name in producers:
        return producers[name].output_schema
    return None


def fuse_stages(plan: LogicalPlan, aggressiveness: str, rewrites: list[dict]) -> LogicalPlan:
    """Merge adjacent row-local nodes into pipeline stages.

    "safe" only merges sole-consumer pairs of the same template kind, which
    never changes intermediate visibility for mixed pipelines; "max" merges
    any adjacent row-local pair; anything else disables fusion.
    """
    if aggressiveness not in ("safe", "max"):
        return plan
    nodes = list(plan.nodes)
    coverage = {k: list(v) for k, v in plan.coverage.items()}
    changed = True
    while changed:
        changed = False
        producers = {n.output_name: n for n in nodes}
        consumers: dict[str, list[PlanNode]] = {}
        for n in nodes:
            for i in n.inputs:
                consumers.setdefault(i, []).append(n)
        for node in nodes:
            if len(node.inputs) != 1:
                continue
            upstream = producers.get(node.inputs[0])
            if upstream is None or len(consumers.get(upstream.output_name, [])) != 1:
                continue
            up_body, down_body = _node_body(upstream), _node_body(node)
            if up_body is None or down_body is None:
                continue
            row_local = {"project", "filter", "keyword_score", "numeric_score",
                         "combine_scores", "classify_boolean", PIPELINE}
            if up_body["kind"] not in row_local or down_body["kind"] not in row_local:
                continue
            if aggressiveness == "safe" and up_body["kind"] != down_body["kind"]:
                continue
            fused = PlanNode(
                name=f"{upstream.name}__{node.name}",
                inputs=list(upstream.inputs),
                output_name=node.output_name,
                output_schema=node.output_schema,
                description=upstream.description + " Then: " + node.description,
            )
            nodes = [n for n in nodes if n is not upstream]
            nodes = [fused if n is node else n for n in nodes]
            for step, names in coverage.items():
                coverage[step] = [
                    fused.name if x in (upstream.name, node.name) else x for x in names
                ]
                deduped = list(dict.fromkeys(coverage[step]))
                coverage[step] = deduped
            rewrites.append(
                {"rule": "fusion", "merged": [upstream.name, node.name], "into": fused.name}
            )
            logger.info("fused %s and %s", upstream.name, node.name)
            changed = True
            break
    return LogicalPlan(nodes=nodes, coverage=coverage, steps=list(plan.steps))


def rewrite_plan(plan: LogicalPlan, config) -> tuple[LogicalPlan, list[dict]]:
    rewrites: list[dict] = []
    plan = push_down_predicates(plan, rewrites)
    plan = fuse_stages(plan, config.fusion_aggressiveness, rewrites)
    return plan, rewrites


# ---------------------------------------------------------------------------
# sampling helpers


def run_body_on_sample(
    body: dict,
    inputs: list[tuple[Schema, list[dict]]],
    ctx: TemplateContext,
    timeout_s: float = 30.0,
) -> tuple[list[dict], int]:
    """Run a candidate body over sample rows; returns (rows, external calls)."""
    if body.get("kind") == "external":
        if body.get("mode", "row") == "row":
            rows = inputs[0][1]
            payload = {"rows": [_strip_system(r) for r in rows], "offset": 0}
            result = run_external_body(body, payload, timeout_s)
            if result.get("error"):
                err = result["error"]
                raise RuntimeFault(err.get("message", "external fault"), cursor=err.get("cursor"))
            return [dict(r["values"]) for r in result.get("rows", [])], len(rows)
        payload = {
            "tables": [
                {"columns": schema.to_wire(), "rows": [_strip_system(r) for r in rows]}
                for schema, rows in inputs
            ]
        }
        result = run_external_body(body, payload, timeout_s)
        if result.get("error"):
            raise RuntimeFault(result["error"].get("message", "external fault"))
        return [dict(r["values"]) for r in result.get("rows", [])], 1
    from .registry import impl_pattern

    pattern = impl_pattern(body)
    if pattern in _NARROW:
        out: list[dict] = []
        for i, row in enumerate(inputs[0][1]):
            try:
                out.extend(apply_row(body, _strip_system(row), ctx))
            except ValueError as exc:
                raise RuntimeFault(str(exc), cursor=i) from exc
        return out, 0
    try:
        return apply_table(body, inputs, ctx), 0
    except ValueError as exc:
        raise RuntimeFault(str(exc)) from exc


def _strip_system(row: dict) -> dict:
    return {k: v for k, v in row.items() if k not in ("lid", "parent_lid", "ver_id", "anchor_lid")}


def _with_lids(rows: list[dict]) -> list[dict]:
    out = []
    for i, row in enumerate(rows):
        r = dict(row)
        r.setdefault("lid", i)
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# synthesis


def synthesize_plan(
    provider,
    registry,
    store,
    plan: LogicalPlan,
    config,
    ctx: TemplateContext,
    escalate_cb=None,
) -> PhysicalPlan:
    """Rewrite the plan, synthesize each node, and bind chosen versions."""
    plan, rewrites = rewrite_plan(plan, config)
    ordered = plan.topo_order()
    sample_cache: dict[str, tuple[Schema, list[dict]]] = {}
    catalog = store.catalog()["relations"]

    def sample_of(name: str) -> tuple[Schema, list[dict]]:
        if name in sample_cache:
            return sample_cache[name]
        if name in catalog:
            rel = store.relation(name)
            rows = store.sample_rows(name, config.sample_rows, seed=config.seed)
            sample_cache[name] = (rel.schema, rows)
            return sample_cache[name]
        raise SynthesisFailed(f"no sample available for input {name!r}")

    est_rows: dict[str, float] = {
        name: float(desc["row_count"]) for name, desc in catalog.items()
    }

    stages: list[PhysicalStage] = []

    def synthesize_node(node: PlanNode) -> PhysicalStage:
        sig = node.signature()
        if not registry.has_function(node.name):
            registry.register_signature(sig)
        inputs = [sample_of(i) for i in node.inputs]
        input_wire = [schema.to_wire() for schema, _ in inputs]
        est_in = max((est_rows.get(i, 1.0) for i in node.inputs), default=1.0)
        candidates: list[dict] = []
        hint: str | None = None
        chosen = None
        for round_no in range(1, config.max_critic_rounds + 1):
            coded = provider.run(
                request(
                    "code_node",
                    {"signature": sig.to_wire(), "round": round_no, "hint": hint},
                )
            ).payload
            body = coded.get("body")
            if body is None:
                note = coded.get("note") or "coder produced no body"
                if escalate_cb is not None:
                    body = escalate_cb(sig.to_wire(), note)
                if body is None:
                    raise NoViableImplementation(
                        f"no implementation for {node.name!r}: {note}"
                    )
            impl = registry.add_implementation(node.name, body)
            profile, fault = _profile(body, inputs, ctx, est_in, config)
            critique = provider.run(
                request(
                    "critique_node",
                    {
                        "signature": sig.to_wire(),
                        "body": body,
                        "input_schemas": input_wire,
                        "sample_outputs": profile.pop("_sample_rows"),
                        "fault": fault,
                        "round": round_no,
                        "max_rounds": config.max_critic_rounds,
                    },
                )
            ).payload
            verdict = critique["verdict"]
            registry.attach_profile(
                node.name, impl.ver_id, profile, "PASS" if verdict == "PASS" else "FAIL"
            )
            candidates.append(
                {"ver_id": impl.ver_id, "verdict": verdict, "cost": profile["est_cost"]}
            )
            if verdict == "PASS":
                chosen = impl
                break
            if verdict == "ESCALATE" or round_no == config.max_critic_rounds:
                if escalate_cb is not None:
                    body = escalate_cb(sig.to_wire(), critique.get("hint") or "escalated")
                    if body is not None:
                        impl = registry.add_implementation(node.name, body)
                        profile, _ = _profile(body, inputs, ctx, est_in, config)
                        profile.pop("_sample_rows")
                        registry.attach_profile(node.name, impl.ver_id, profile, "PASS")
                        candidates.append(
                            {"ver_id": impl.ver_id, "verdict": "PASS", "cost": profile["est_cost"]}
                        )
                        chosen = impl
                        break
                raise SynthesisFailed(
                    f"synthesis for {node.name!r} did not converge: "
                    + (critique.get("hint") or "escalated")
                )
            hint = critique.get("hint")
            logger.info("node %s round %d: %s", node.name, round_no, hint)
        passing = [c for c in candidates if c["verdict"] == "PASS"]
        best = min(passing, key=lambda c: (c["cost"], c["ver_id"]))
        chosen = registry.implementation(node.name, best["ver_id"])
        out_rows, _ = _safe_sample_run(chosen.body, inputs, ctx, config)
        sample_cache[node.output_name] = (node.output_schema, _with_lids(out_rows))
        in_count = max(1, len(inputs[0][1]))
        est_rows[node.output_name] = est_in * (len(out_rows) / in_count)
        return PhysicalStage(
            node=node,
            func_id=node.name,
            ver_id=chosen.ver_id,
            pattern=chosen.pattern,
            candidates=candidates,
        )

    if config.parallel_synthesis:
        remaining = list(ordered)
        done: set[str] = set(catalog)
        with ThreadPoolExecutor(max_workers=4) as pool:
            while remaining:
                ready = [n for n in remaining if all(i in done for i in n.inputs)]
                if not ready:
                    raise SynthesisFailed("plan inputs cannot be scheduled")
                ready_stages = list(pool.map(synthesize_node, ready))
                stages.extend(ready_stages)
                for n in ready:
                    done.add(n.output_name)
                    remaining.remove(n)
        order_index = {n.name: i for i, n in enumerate(ordered)}
        stages.sort(key=lambda s: order_index[s.func_id])
    else:
        for node in ordered:
            stages.append(synthesize_node(node))

    return PhysicalPlan(stages=stages, rewrites=rewrites)


def _profile(body, inputs, ctx, est_in: float, config) -> tuple[dict, dict | None]:
    """Time the body on its sample inputs; a fault becomes critic context."""
    start = time.perf_counter()
    fault = None
    rows: list[dict] = []
    calls = 0
    try:
        rows, calls = run_body_on_sample(body, inputs, ctx, config.timeout_s)
    except RuntimeFault as exc:
        fault = {"message": str(exc), "cursor": exc.cursor}
    except TemplateParamError as exc:
        fault = {"message": str(exc), "cursor": None}
    runtime = time.perf_counter() - start
    sample_in = max(1, len(inputs[0][1]))
    est_calls = calls / sample_in * est_in if calls else 0.0
    est_cost = runtime * (est_in / sample_in) + config.external_call_surcharge * est_calls
    profile = {
        "sample_in": len(inputs[0][1]),
        "sample_out": len(rows),
        "runtime_s": round(runtime, 6),
        "external_calls": calls,
        "est_input_rows": est_in,
        "est_cost": round(est_cost, 6),
        "_sample_rows": rows[: config.sample_rows],
    }
    return profile, fault


def _safe_sample_run(body, inputs, ctx, config) -> tuple[list[dict], int]:
    try:
        return run_body_on_sample(body, inputs, ctx, config.timeout_s)
    except (RuntimeFault, TemplateParamError):
        return [], 0
