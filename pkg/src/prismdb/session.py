"""Engine and session protocol.

An Engine owns the shared pieces: the store, the configuration, the synthesis
provider, and the embedding context. Each Session walks one query through the
interaction protocol:

    AwaitingQuery -> Clarifying (zero or more rounds)
                  -> SketchReview (approve or revise, any number of times)
                  -> Planning (plan ready, report available)
                  -> Executing (advanced lazily by event polls)
                  -> AnomalyPause (waiting for a resolution) -> Executing
                  -> Done -> Explaining
    any state     -> Failed (planning or execution gave up)

Execution is pumped lazily: starting it only arms the run; each events() poll
advances one stage, so a client watches progress by polling and the engine
never runs ahead of an unresolved anomaly.
"""

from __future__ import annotations

import itertools
import logging
import os
from typing import Any

from .backend.base import make_provider
from .config import EngineConfig
from .embedding import HashedEmbedder
from .errors import (
    InvalidState,
    NoExecution,
    PlanningFailed,
    PrismError,
    UnknownSession,
)
from .executor import ExecutionRun
from .explainer import Explainer
from .optimizer import synthesize_plan
from .planner import build_plan
from .registry import FunctionRegistry
from .sketcher import Sketcher
from .store import Store
from .templates import TemplateContext

logger = logging.getLogger(__name__)

AWAITING_QUERY = "AwaitingQuery"
CLARIFYING = "Clarifying"
SKETCH_REVIEW = "SketchReview"
PLANNING = "Planning"
EXECUTING = "Executing"
ANOMALY_PAUSE = "AnomalyPause"
DONE = "Done"
EXPLAINING = "Explaining"
FAILED = "Failed"

_RUN_STATE = {"running": EXECUTING, "paused": ANOMALY_PAUSE, "done": DONE, "failed": FAILED}


class Session:
    """One query conversation bound to an engine."""

    def __init__(self, engine: "Engine", session_id: str):
        self.engine = engine
        self.session_id = session_id
        self.state = AWAITING_QUERY
        self.error: str | None = None
        self.sketcher = Sketcher(
            provider=engine.provider, config=engine.config, catalog=engine.store.catalog()
        )
        self.registry = FunctionRegistry(root=engine.registry_root(session_id))
        self.plan = None
        self.plan_report = None
        self.physical = None
        self.run: ExecutionRun | None = None
        self._explainer: Explainer | None = None

    # -- guards ------------------------------------------------------------------

    def _require(self, action: str, *allowed: str) -> None:
        if self.state not in allowed:
            raise InvalidState(self.state, action)

    def _payload(self, **extra) -> dict[str, Any]:
        out = {"session_id": self.session_id, "state": self.state}
        out.update(extra)
        return out

    # -- intake ---------------------------------------------------------------------

    def submit_query(self, text: str) -> dict:
        self._require("submit_query", AWAITING_QUERY)
        result = self.sketcher.submit_query(text)
        return self._after_intake(result)

    def answer_clarification(self, answer: str) -> dict:
        self._require("answer_clarification", CLARIFYING)
        result = self.sketcher.answer_clarification(answer)
        return self._after_intake(result)

    def _after_intake(self, result: dict) -> dict:
        if result["status"] == "clarify":
            self.state = CLARIFYING
            return self._payload(
                question=result["question"], term=result["term"], round=result["round"]
            )
        self.state = SKETCH_REVIEW
        return self._payload(
            sketch=result["steps"],
            version=result["version"],
            assumptions=result["assumptions"],
        )

    def sketch_decision(self, action: str, feedback: str | None = None) -> dict:
        self._require("sketch_decision", SKETCH_REVIEW)
        if action == "revise":
            if not feedback:
                raise PrismError("revising a sketch requires feedback text")
            result = self.sketcher.revise_sketch(feedback)
            return self._payload(
                sketch=result["steps"],
                version=result["version"],
                assumptions=result["assumptions"],
            )
        if action != "approve":
            raise PrismError(f"sketch decision must be approve or revise, got {action!r}")
        steps = self.sketcher.approve_sketch()
        try:
            self.plan, self.plan_report = build_plan(
                self.engine.provider,
                self.engine.store,
                steps,
                self.sketcher.query,
                self.sketcher.clarifications,
                self.engine.config,
            )
        except PlanningFailed as exc:
            self.state = FAILED
            self.error = str(exc)
            return self._payload(error=self.error)
        self.state = PLANNING
        return self._payload(
            plan={"nodes": [n.name for n in self.plan.nodes]},
            iterations=len(self.plan_report.iterations),
        )

    # -- planning -----------------------------------------------------------------------

    def get_plan_report(self) -> dict:
        self._require(
            "get_plan_report", PLANNING, EXECUTING, ANOMALY_PAUSE, DONE, EXPLAINING, FAILED
        )
        if self.plan is None:
            raise NoExecution("no plan was produced for this session")
        return self._payload(
            plan=self.plan.to_json(),
            report=self.plan_report.to_json(),
            physical=self.physical.to_json() if self.physical else None,
        )

    # -- execution --------------------------------------------------------------------------

    def start_execution(self) -> dict:
        self._require("start_execution", PLANNING)
        try:
            self.physical = synthesize_plan(
                self.engine.provider,
                self.registry,
                self.engine.store,
                self.plan,
                self.engine.config,
                self.engine.ctx,
            )
        except PrismError as exc:
            self.state = FAILED
            self.error = str(exc)
            return self._payload(error=self.error)
        self.run = ExecutionRun(
            self.engine.store,
            self.registry,
            self.engine.provider,
            self.engine.config,
            self.engine.ctx,
            self.physical,
        )
        self.state = EXECUTING
        return self._payload(stages=[s.func_id for s in self.physical.stages])

    def events(self, since: int = 0) -> dict:
        self._require("events", EXECUTING, ANOMALY_PAUSE, DONE, EXPLAINING, FAILED)
        if self.run is None:
            raise NoExecution("execution was never started")
        if self.run.status == "running":
            self.run.tick()
        self._sync_state()
        events = [e.to_json() for e in self.run.events_since(since)]
        payload = self._payload(events=events, status=self.run.status)
        if self.run.pending_anomaly is not None:
            payload["anomaly"] = self.run.pending_anomaly.to_json()
        if self.run.status == "failed":
            payload["error"] = self.run.error
        return payload

    def resolve_anomaly(self, choice: str, params: dict | None = None, note: str | None = None) -> dict:
        self._require("resolve_anomaly", ANOMALY_PAUSE)
        self.run.resolve(choice, params=params, note=note)
        self._sync_state()
        return self._payload(status=self.run.status)

    def _sync_state(self) -> None:
        if self.run is not None and self.state not in (EXPLAINING,):
            self.state = _RUN_STATE[self.run.status]
            if self.run.status == "failed":
                self.error = self.run.error

    # -- results and explanations ----------------------------------------------------------

    def get_result(self) -> dict:
        self._require("get_result", DONE, EXPLAINING)
        rel = self.engine.store.relation(self.run.result_name)
        rows = self.engine.store.visible_rows(self.run.result_name)
        return self._payload(
            relation=self.run.result_name,
            columns=rel.schema.to_wire(),
            rows=rows,
        )

    def _explain_ready(self) -> Explainer:
        if self._explainer is None:
            self._explainer = Explainer(
                store=self.engine.store,
                registry=self.registry,
                provider=self.engine.provider,
                plan=self.plan,
                physical=self.physical,
                run=self.run,
            )
        self.state = EXPLAINING
        return self._explainer

    def explain(self, kind: str = "coarse", **target) -> dict:
        self._require("explain", DONE, EXPLAINING)
        explainer = self._explain_ready()
        if kind == "coarse":
            detail = explainer.coarse()
        elif kind == "row":
            detail = explainer.explain_row(int(target["lid"]))
        elif kind == "column":
            detail = explainer.which_function(column=target["column"])
        elif kind == "excluded":
            detail = explainer.why_excluded(target["value"])
        elif kind == "changed":
            detail = explainer.what_changed(target["function"])
        else:
            raise PrismError(f"unknown explanation kind {kind!r}")
        return self._payload(kind=kind, explanation=detail)

    def ask(self, question: str) -> dict:
        self._require("ask", DONE, EXPLAINING)
        explainer = self._explain_ready()
        answer = explainer.ask(question)
        return self._payload(**answer)


class Engine:
    """Shared store, config, provider, and the session registry."""

    def __init__(
        self,
        store: Store | None = None,
        config: EngineConfig | None = None,
        provider=None,
        workdir: str | None = None,
    ):
        self.config = config or EngineConfig()
        self.store = store or Store()
        self.provider = provider or make_provider(self.config)
        self.workdir = workdir
        self.ctx = TemplateContext(embedder=HashedEmbedder(dim=self.config.embedder_dim))
        self.sessions: dict[str, Session] = {}
        self._ids = itertools.count(1)

    def registry_root(self, session_id: str) -> str | None:
        if not self.workdir:
            return None
        return os.path.join(self.workdir, "sessions", session_id, "functions")

    def create_session(self) -> Session:
        session_id = f"s{next(self._ids)}"
        session = Session(self, session_id)
        self.sessions[session_id] = session
        logger.info("created session %s", session_id)
        return session

    def session(self, session_id: str) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise UnknownSession(f"no session named {session_id!r}") from None
