"""Command line interface.

    prismdb ingest DATA_DIR --store STORE_DIR
    prismdb query "..." --store STORE_DIR [--answers FILE] [--auto-ok] [--json]
    prismdb serve --store STORE_DIR [--host HOST] [--port PORT]
    prismdb explain --store STORE_DIR (--lid N | --pipeline)
    prismdb lineage --store STORE_DIR --lid N
    prismdb functions --store STORE_DIR [--list | --show FUNC]
    prismdb snapshot --store SRC --to DST

Exit codes: 0 success, 2 usage error, 3 planning failed, 4 execution
aborted, 5 unknown identifier.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click

from .config import EngineConfig
from .demo import ingest_directory
from .errors import PrismError, UnknownLid
from .registry import FunctionRegistry
from .session import DONE, EXPLAINING, FAILED, Engine
from .store import Store

logger = logging.getLogger(__name__)

EXIT_PLANNING = 3
EXIT_EXECUTION = 4
EXIT_UNKNOWN_ID = 5


@click.group()
@click.option("--verbose", is_flag=True, help="Log engine progress to stderr.")
def main(verbose: bool) -> None:
    """Explainable multimodal query engine."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--store", "store_dir", required=True, type=click.Path(file_okay=False))
def ingest(data_dir: str, store_dir: str) -> None:
    """Load a data directory and save the store snapshot."""
    store = Store.load(store_dir) if os.path.isdir(store_dir) and os.listdir(store_dir) else Store()
    summary = ingest_directory(store, data_dir)
    store.save(store_dir)
    click.echo(json.dumps(summary, indent=2))


def _load_answers(path: str | None) -> list[str]:
    if not path:
        return []
    with open(path, encoding="utf-8") as fh:
        content = fh.read().strip()
    if content.startswith("["):
        return [str(item) for item in json.loads(content)]
    return [line for line in content.splitlines() if line.strip()]


@main.command()
@click.argument("text")
@click.option("--store", "store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--answers", "answers_path", type=click.Path(exists=True, dir_okay=False),
              help="Scripted inputs consumed whenever the engine asks something.")
@click.option("--auto-ok", is_flag=True, help="Approve sketches and accept anomalies without asking.")
@click.option("--json", "as_json", is_flag=True, help="Print the result as JSON.")
def query(text: str, store_dir: str | None, answers_path: str | None, auto_ok: bool, as_json: bool) -> None:
    """Run one query through the full session protocol."""
    store = Store.load(store_dir) if store_dir else Store()
    engine = Engine(store=store, config=EngineConfig.from_env(), workdir=store_dir)
    session = engine.create_session()
    answers = _load_answers(answers_path)

    def next_input(prompt: str, fallback: str) -> str:
        if answers:
            value = answers.pop(0)
            click.echo(f"{prompt} {value}", err=True)
            return value
        if auto_ok:
            return fallback
        return click.prompt(prompt)

    response = session.submit_query(text)
    while session.state == "Clarifying":
        answer = next_input(f"[clarify] {response['question']}", "no special meaning")
        response = session.answer_clarification(answer)
    while session.state == "SketchReview":
        click.echo("proposed steps:", err=True)
        for i, step in enumerate(response["sketch"], 1):
            click.echo(f"  {i}. {step}", err=True)
        decision = next_input("[sketch] approve, or describe a correction:", "approve")
        if decision.strip().lower() == "approve":
            response = session.sketch_decision("approve")
        else:
            response = session.sketch_decision("revise", decision)
    if session.state == FAILED:
        click.echo(f"planning failed: {session.error}", err=True)
        sys.exit(EXIT_PLANNING)
    response = session.start_execution()
    if session.state == FAILED:
        click.echo(f"synthesis failed: {session.error}", err=True)
        sys.exit(EXIT_PLANNING)
    seq = 0
    while session.state in ("Executing", "AnomalyPause"):
        response = session.events(since=seq)
        for event in response["events"]:
            seq = event["seq"]
            click.echo(f"[{event['kind']}] {json.dumps(event['payload'])}", err=True)
        if session.state == "AnomalyPause":
            anomaly = response["anomaly"]
            choice = next_input(
                f"[anomaly] {anomaly['rule']} at {anomaly['stage']}: {anomaly['detail']} "
                f"({'/'.join(anomaly['options'])})",
                "accept",
            )
            session.resolve_anomaly(choice.strip().lower())
    if session.state == FAILED:
        click.echo(f"execution aborted: {session.error}", err=True)
        sys.exit(EXIT_EXECUTION)
    result = session.get_result()
    if store_dir:
        store.save(store_dir)
    if as_json:
        click.echo(json.dumps({"columns": result["columns"], "rows": result["rows"]}, indent=2))
        return
    columns = [name for name, _ in result["columns"]]
    click.echo("\t".join(columns))
    for row in result["rows"]:
        click.echo("\t".join(str(row.get(c)) for c in columns))


@main.command()
@click.option("--store", "store_dir", type=click.Path(file_okay=False))
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8821, show_default=True)
def serve(store_dir: str | None, data_dir: str | None, host: str, port: int) -> None:
    """Serve the session protocol over HTTP."""
    import uvicorn

    from .server import create_app

    app = create_app(store_dir=store_dir, data_dir=data_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command()
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--lid", type=int, help="Explain one stored record by lid.")
@click.option("--pipeline", is_flag=True, help="Summarize derivations per relation instead.")
def explain(store_dir: str, lid: int | None, pipeline: bool) -> None:
    """Explain stored records from the snapshot's lineage log."""
    store = Store.load(store_dir)
    if pipeline:
        catalog = store.catalog()["relations"]
        for name, desc in sorted(catalog.items()):
            rel = store.relation(name)
            path = store.lineage.derivation_path(rel.table_lid)
            chain = " -> ".join(f"{f} v{v}" for f, v, _ in path) or "(source)"
            click.echo(f"{name} ({desc['row_count']} rows): {chain}")
        return
    if lid is None:
        raise click.UsageError("pass --lid N or --pipeline")
    try:
        ancestors = store.lineage.ancestors(lid)
        path = store.lineage.derivation_path(lid)
    except UnknownLid as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_UNKNOWN_ID)
    click.echo(f"derivation of lid {lid}:")
    for func, ver, granularity in path:
        click.echo(f"  {func} v{ver} [{granularity}]")
    sources = sorted({e.src_uri for e in ancestors if e.src_uri})
    click.echo("sources:")
    for src in sources:
        click.echo(f"  {src}")


@main.command()
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--lid", type=int, required=True)
def lineage(store_dir: str, lid: int) -> None:
    """Print the raw lineage entries reachable from a lid."""
    store = Store.load(store_dir)
    try:
        entries = store.lineage.ancestors(lid)
    except UnknownLid as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_UNKNOWN_ID)
    for entry in entries:
        click.echo(json.dumps(entry.to_json(), sort_keys=True))


@main.command()
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--list", "list_all", is_flag=True)
@click.option("--show", "func_id", default=None)
def functions(store_dir: str, list_all: bool, func_id: str | None) -> None:
    """Inspect function registries persisted under a store directory."""
    sessions_dir = os.path.join(store_dir, "sessions")
    roots = []
    if os.path.isdir(sessions_dir):
        for sid in sorted(os.listdir(sessions_dir)):
            root = os.path.join(sessions_dir, sid, "functions")
            if os.path.isdir(root):
                roots.append((sid, root))
    if not roots:
        click.echo("no persisted functions", err=True)
        return
    found = False
    for sid, root in roots:
        registry = FunctionRegistry.load(root)
        for name in registry.function_ids():
            versions = registry.versions(name)
            if func_id is None or name == func_id:
                found = True
                if func_id is None:
                    vers = ", ".join(
                        f"v{v.ver_id}({v.verdict or 'UNTESTED'})" for v in versions
                    )
                    click.echo(f"{sid}/{name}: {vers}")
                else:
                    click.echo(json.dumps(
                        {
                            "session": sid,
                            "signature": registry.signature(name).to_wire(),
                            "versions": [v.to_json() for v in versions],
                        },
                        indent=2,
                        sort_keys=True,
                    ))
    if func_id is not None and not found:
        click.echo(f"no function named {func_id!r}", err=True)
        sys.exit(EXIT_UNKNOWN_ID)


@main.command()
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--to", "target_dir", required=True, type=click.Path(file_okay=False))
def snapshot(store_dir: str, target_dir: str) -> None:
    """Copy a store snapshot (relations, lineage, catalog) to a new directory."""
    store = Store.load(store_dir)
    store.save(target_dir)
    catalog = store.catalog()["relations"]
    click.echo(json.dumps({name: desc["row_count"] for name, desc in sorted(catalog.items())}))


if __name__ == "__main__":
    main()
