"""Helpers shared across test modules.

Builders for tiny stores and hand-assembled physical plans, plus a driver
that runs the bundled walkthrough end to end. Hand-assembled plans bypass
the synthesis loop on purpose: executor and lineage behavior can then be
probed with exact, minimal inputs.
"""

from __future__ import annotations

import tempfile

from prismdb.backend import DeterministicProvider
from prismdb.backend.deterministic import render_description
from prismdb.config import EngineConfig
from prismdb.demo import (
    DEMO_CLARIFICATION_ANSWER,
    DEMO_QUERY,
    DEMO_SKETCH_FEEDBACK,
    load_demo_store,
)
from prismdb.embedding import HashedEmbedder
from prismdb.executor import ExecutionRun
from prismdb.explainer import Explainer
from prismdb.optimizer import PhysicalPlan, PhysicalStage, synthesize_plan
from prismdb.planner import PlanNode, build_plan
from prismdb.registry import FunctionRegistry, FunctionSignature
from prismdb.sketcher import Sketcher
from prismdb.store import Store
from prismdb.templates import PIPELINE, TemplateContext, validate_body
from prismdb.values import schema as make_schema


def fresh_ctx(config: EngineConfig | None = None):
    config = config or EngineConfig()
    return config, TemplateContext(embedder=HashedEmbedder(dim=config.embedder_dim))


def store_with(name, cols, rows, src="file:///data/test.ndjson"):
    """A store holding one ingested base relation."""
    store = Store()
    store.create_relation(name, make_schema(*cols))
    store.ingest_rows(name, rows, src)
    return store


def describe_body(body: dict, inputs: list[str]) -> str:
    if body.get("kind") == PIPELINE:
        return " Then: ".join(describe_body(s, inputs) for s in body["steps"])
    if body.get("kind") == "external":
        return body.get("description", "Run external code over each row.")
    return render_description(body["kind"], body.get("params", {}), inputs)


def manual_stage(registry, name, inputs, output_name, body, input_schemas):
    """Register ``body`` as the next version of ``name`` and wrap it in an
    executable stage. The output schema comes from template validation, or
    must be supplied in ``body["output_schema"]`` for external bodies."""
    if body.get("kind") == "external":
        out_schema = body.pop("output_schema")
    else:
        out_schema = validate_body(body, input_schemas)
    description = describe_body(body, inputs)
    if not registry.has_function(name):
        registry.register_signature(
            FunctionSignature(
                name=name,
                inputs=list(inputs),
                output_name=output_name,
                output_schema=out_schema,
                description=description,
            )
        )
    impl = registry.add_implementation(name, body)
    registry.attach_profile(name, impl.ver_id, {"sample_in": 0}, "PASS")
    node = PlanNode(
        name=name,
        inputs=list(inputs),
        output_name=output_name,
        output_schema=out_schema,
        description=description,
    )
    return PhysicalStage(node=node, func_id=name, ver_id=impl.ver_id, pattern=impl.pattern)


def run_physical(store, registry, stages, config=None, provider=None, auto_resolver=None):
    """Execute hand-assembled stages against a store; returns the finished run."""
    config, ctx = fresh_ctx(config)
    provider = provider or DeterministicProvider(config)
    run = ExecutionRun(store, registry, provider, config, ctx, PhysicalPlan(stages=stages))
    run.run_to_completion(auto_resolver=auto_resolver)
    return run


def demo_pipeline(config: EngineConfig | None = None, registry_root: str | None = None):
    """Drive the bundled walkthrough from query to finished run.

    Returns a dict with every intermediate artifact so tests can pick what
    they need without re-running the whole flow.
    """
    config = config or EngineConfig()
    store = load_demo_store()
    provider = DeterministicProvider(config)
    ctx = TemplateContext(embedder=HashedEmbedder(dim=config.embedder_dim))

    sketcher = Sketcher(provider=provider, config=config, catalog=store.catalog())
    first = sketcher.submit_query(DEMO_QUERY)
    assert first["status"] == "clarify", first
    second = sketcher.answer_clarification(DEMO_CLARIFICATION_ANSWER)
    assert second["status"] == "sketch", second
    sketcher.revise_sketch(DEMO_SKETCH_FEEDBACK)
    steps = sketcher.approve_sketch()

    plan, report = build_plan(
        provider, store, steps, DEMO_QUERY, sketcher.clarifications, config
    )
    registry = FunctionRegistry(root=registry_root or tempfile.mkdtemp(prefix="reg-"))
    physical = synthesize_plan(provider, registry, store, plan, config, ctx)
    run = ExecutionRun(store, registry, provider, config, ctx, physical)
    status = run.run_to_completion()
    return {
        "config": config,
        "store": store,
        "provider": provider,
        "ctx": ctx,
        "sketcher": sketcher,
        "steps": steps,
        "plan": plan,
        "report": report,
        "registry": registry,
        "physical": physical,
        "run": run,
        "status": status,
    }


def demo_explainer(arts: dict) -> Explainer:
    return Explainer(
        store=arts["store"],
        registry=arts["registry"],
        provider=arts["provider"],
        plan=arts["plan"],
        physical=arts["physical"],
        run=arts["run"],
    )


# The fixture walkthrough's expected ranking, derived once by an independent
# reimplementation of the scoring pipeline (see test_acceptance for the live
# recomputation). Scores are (0.7 * excitement + 0.3 * recency).
EXPECTED_RANKING = [
    ("Steel Vendetta", 0.891731),
    ("Orbital Dawn", 0.848718),
    ("Midnight Heist", 0.799615),
    ("Harbor Run", 0.778846),
]

EXCLUDED_TITLES = {"Quiet Meadows", "Paper Hearts", "The Long Ledger", "Glass Garden"}
