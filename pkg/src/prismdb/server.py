"""HTTP front end for the session protocol.

Exposes every session action as one endpoint. Protocol errors map onto
status codes: unknown session ids are 404, actions illegal in the current
state are 409, bad request bodies are 400, and engine failures surface as
422 with the failure reason.
"""

from __future__ import annotations

import logging
from typing import Any

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .config import EngineConfig
from .demo import ingest_directory
from .errors import (
    InvalidChoice,
    InvalidState,
    NoExecution,
    PrismError,
    UnknownSession,
)
from .session import Engine
from .store import Store

logger = logging.getLogger(__name__)


class QueryBody(BaseModel):
    text: str


class ClarificationBody(BaseModel):
    answer: str


class SketchBody(BaseModel):
    action: str
    feedback: str | None = None


class AnomalyBody(BaseModel):
    choice: str
    params: dict[str, Any] | None = None
    note: str | None = None


class ExplainBody(BaseModel):
    kind: str = "coarse"
    lid: int | None = None
    column: str | None = None
    value: str | None = None
    function: str | None = None


class AskBody(BaseModel):
    question: str


def create_app(
    engine: Engine | None = None,
    store_dir: str | None = None,
    data_dir: str | None = None,
    config: EngineConfig | None = None,
) -> FastAPI:
    if engine is None:
        config = config or EngineConfig.from_env()
        store = Store.load(store_dir) if store_dir else Store()
        if data_dir:
            ingest_directory(store, data_dir)
        engine = Engine(store=store, config=config, workdir=store_dir)

    app = FastAPI(title="prismdb", version="0.1.0")
    app.state.engine = engine

    @app.exception_handler(PrismError)
    async def prism_error_handler(request: Request, exc: PrismError):
        status = 422
        if isinstance(exc, UnknownSession):
            status = 404
        elif isinstance(exc, InvalidState):
            status = 409
        elif isinstance(exc, (InvalidChoice, NoExecution)):
            status = 400
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.post("/sessions")
    def create_session():
        session = engine.create_session()
        return {"session_id": session.session_id, "state": session.state}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        session = engine.session(sid)
        return {"session_id": sid, "state": session.state, "error": session.error}

    @app.post("/sessions/{sid}/query")
    def submit_query(sid: str, body: QueryBody):
        return engine.session(sid).submit_query(body.text)

    @app.post("/sessions/{sid}/clarification")
    def answer_clarification(sid: str, body: ClarificationBody):
        return engine.session(sid).answer_clarification(body.answer)

    @app.post("/sessions/{sid}/sketch")
    def sketch_decision(sid: str, body: SketchBody):
        return engine.session(sid).sketch_decision(body.action, body.feedback)

    @app.get("/sessions/{sid}/plan")
    def plan_report(sid: str):
        return engine.session(sid).get_plan_report()

    @app.post("/sessions/{sid}/execute")
    def start_execution(sid: str):
        return engine.session(sid).start_execution()

    @app.get("/sessions/{sid}/events")
    def events(sid: str, since: int = 0):
        return engine.session(sid).events(since=since)

    @app.post("/sessions/{sid}/anomaly")
    def resolve_anomaly(sid: str, body: AnomalyBody):
        return engine.session(sid).resolve_anomaly(body.choice, body.params, body.note)

    @app.get("/sessions/{sid}/result")
    def get_result(sid: str):
        return engine.session(sid).get_result()

    @app.post("/sessions/{sid}/explain")
    def explain(sid: str, body: ExplainBody):
        target = {
            k: v
            for k, v in (("lid", body.lid), ("column", body.column),
                         ("value", body.value), ("function", body.function))
            if v is not None
        }
        return engine.session(sid).explain(body.kind, **target)

    @app.post("/sessions/{sid}/ask")
    def ask(sid: str, body: AskBody):
        return engine.session(sid).ask(body.question)

    @app.get("/catalog")
    def catalog():
        return engine.store.catalog()

    @app.get("/health")
    def health():
        return {"status": "ok", "sessions": len(engine.sessions)}

    return app
