"""Plan execution: stage drivers, lineage capture, repair, and monitoring.

Stages run in dependency order, materializing each node's output as a stored
relation. Row-local stages process the driving input row by row under a
cursor; when a row raises, the fault is diagnosed, a patched implementation
is registered as the next version, and execution resumes at the failing row.
Rows finished before the fault keep the old version in their lineage, so a
repaired stage shows an exact version partition.

After each stage a monitor checks the fresh output against semantic rules
(join fan-out, score ranges, empty outputs, duplicate rows). A finding pauses
the run and waits for a resolution: accept the output as is, adjust the
implementation's parameters, or have the body rewritten with a note. Both
adjustments supersede the stage's previous output rows rather than erasing
them, keeping the before/after comparable.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

from .backend.base import request
from .errors import InvalidChoice, InvalidState, RepairFailed, RuntimeFault
from .optimizer import PhysicalPlan, PhysicalStage
from .registry import run_external_body
from .templates import TemplateContext, apply_row, apply_table, score_ranges

logger = logging.getLogger(__name__)

_SYSTEM_KEYS = ("lid", "parent_lid", "ver_id", "anchor_lid")


def _plain(row: dict) -> dict:
    return {k: v for k, v in row.items() if k not in _SYSTEM_KEYS}


def _marker_positions(body: dict) -> list[int]:
    markers = body.get("fault") or []
    return sorted(m.get("at_row", 0) for m in markers if isinstance(m, dict))


def _strip_marker(body: dict, cursor: int | None) -> dict:
    """Body copy with the marker matching the cursor (or the first) removed."""
    patched = copy.deepcopy(body)
    markers = patched.get("fault") or []
    kept, removed = [], False
    for marker in markers:
        if not removed and (cursor is None or marker.get("at_row") == cursor):
            removed = True
            continue
        kept.append(marker)
    if not removed and kept:
        kept = kept[1:]
    if kept:
        patched["fault"] = kept
    else:
        patched.pop("fault", None)
    return patched


@dataclass
class ExecutionEvent:
    seq: int
    kind: str
    payload: dict
    ts: float

    def to_json(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "payload": self.payload, "ts": self.ts}


@dataclass
class Anomaly:
    anomaly_id: int
    rule: str
    stage: str
    ver_id: int
    detail: str
    evidence: list[dict] = field(default_factory=list)
    options: tuple[str, ...] = ("accept", "adjust", "rewrite")

    def to_json(self) -> dict:
        return {
            "anomaly_id": self.anomaly_id,
            "rule": self.rule,
            "stage": self.stage,
            "ver_id": self.ver_id,
            "detail": self.detail,
            "evidence": self.evidence,
            "options": list(self.options),
        }


class ExecutionRun:
    """One execution of a physical plan, advanced stage by stage."""

    def __init__(self, store, registry, provider, config, ctx: TemplateContext, physical: PhysicalPlan):
        self.store = store
        self.registry = registry
        self.provider = provider
        self.config = config
        self.ctx = ctx
        self.physical = physical
        self.status = "running"
        self.error: str | None = None
        self.events: list[ExecutionEvent] = []
        self.repairs: list[dict] = []
        self.anomaly_log: list[dict] = []
        self.pending_anomaly: Anomaly | None = None
        self.result_name = physical.stages[-1].node.output_name if physical.stages else None
        self.stage_history: list[dict] = []
        self._stage_idx = 0
        self._seq = 0
        self._anomaly_seq = 0
        self._resolved_stages: set[str] = set()
        self._stage_inputs: dict[str, list[int]] = {}

    # -- events ----------------------------------------------------------------

    def _emit(self, kind: str, **payload) -> ExecutionEvent:
        self._seq += 1
        event = ExecutionEvent(seq=self._seq, kind=kind, payload=payload, ts=time.time())
        self.events.append(event)
        logger.info("event %d %s: %s", event.seq, kind, payload)
        return event

    def events_since(self, seq: int) -> list[ExecutionEvent]:
        return [e for e in self.events if e.seq > seq]

    # -- main loop ----------------------------------------------------------------

    def tick(self) -> list[ExecutionEvent]:
        """Advance by one stage; returns the events this tick produced."""
        if self.status != "running":
            return []
        mark = len(self.events)
        stage = self.physical.stages[self._stage_idx]
        try:
            rel, input_counts = self._execute_stage(stage)
        except (RepairFailed, RuntimeFault) as exc:
            self.status = "failed"
            self.error = str(exc)
            self._emit("run_failed", stage=stage.func_id, error=self.error)
            return self.events[mark:]
        anomaly = self._monitor(stage, input_counts)
        if anomaly is not None:
            self.pending_anomaly = anomaly
            self.status = "paused"
            self.anomaly_log.append(anomaly.to_json())
            self._emit("anomaly", **anomaly.to_json())
            return self.events[mark:]
        self._advance()
        return self.events[mark:]

    def _advance(self) -> None:
        self._stage_idx += 1
        if self._stage_idx >= len(self.physical.stages):
            self.status = "done"
            rows = len(self.store.visible_rows(self.result_name)) if self.result_name else 0
            self._emit("run_completed", result=self.result_name, rows=rows)

    def run_to_completion(self, auto_resolver=None) -> str:
        while self.status == "running":
            self.tick()
            if self.status == "paused":
                decision = (
                    auto_resolver(self.pending_anomaly) if auto_resolver else {"choice": "accept"}
                )
                if decision is None:
                    break
                self.resolve(**decision)
        return self.status

    # -- anomaly resolution ------------------------------------------------------

    def resolve(self, choice: str, params: dict | None = None, note: str | None = None) -> None:
        if self.status != "paused" or self.pending_anomaly is None:
            raise InvalidState(self.status, "resolve")
        anomaly = self.pending_anomaly
        stage = self.physical.stage(anomaly.stage)
        if choice not in anomaly.options:
            raise InvalidChoice(f"choice must be one of {anomaly.options}, got {choice!r}")
        self._emit("anomaly_resolved", anomaly_id=anomaly.anomaly_id, choice=choice)
        self._resolved_stages.add(stage.func_id)
        self.pending_anomaly = None
        self.status = "running"
        if choice == "accept":
            self._advance()
            return
        current = self.registry.implementation(stage.func_id, stage.ver_id)
        if choice == "adjust":
            body = copy.deepcopy(current.body)
            patch = params or {}
            if body.get("kind") == "external":
                body.update(patch)
            else:
                body.setdefault("params", {}).update(patch)
            summary = f"adjusted parameters: {patch}"
        else:
            coded = self.provider.run(
                request(
                    "code_node",
                    {
                        "signature": stage.node.to_wire(),
                        "round": len(self.registry.versions(stage.func_id)) + 1,
                        "hint": note or "rewrite requested during execution",
                    },
                )
            ).payload
            body = coded.get("body")
            if body is None:
                raise InvalidChoice(
                    f"rewrite produced no implementation: {coded.get('note')}"
                )
            summary = f"rewritten from note: {note or ''}".strip()
        impl = self.registry.add_implementation(stage.func_id, body)
        self.registry.attach_profile(
            stage.func_id,
            impl.ver_id,
            {"resolution": choice, "anomaly_id": anomaly.anomaly_id},
            "PASS",
        )
        self._emit(
            "stage_rerun",
            stage=stage.func_id,
            from_ver=stage.ver_id,
            to_ver=impl.ver_id,
            reason=summary,
        )
        for row in self.store.visible_rows(stage.node.output_name):
            self.store.lineage.mark_superseded(row["lid"], impl.ver_id)
        stage.ver_id = impl.ver_id
        try:
            self._execute_stage(stage, relation_exists=True)
        except (RepairFailed, RuntimeFault) as exc:
            self.status = "failed"
            self.error = str(exc)
            self._emit("run_failed", stage=stage.func_id, error=self.error)
            return
        self._advance()

    # -- stage execution ---------------------------------------------------------

    def _execute_stage(self, stage: PhysicalStage, relation_exists: bool = False):
        node = stage.node
        impl = self.registry.implementation(stage.func_id, stage.ver_id)
        lineage = self.store.lineage
        input_rows = [self.store.visible_rows(name) for name in node.inputs]
        anchors = [self.store.relation(name).table_lid for name in node.inputs]
        self._stage_inputs[stage.func_id] = [len(r) for r in input_rows]
        self._emit(
            "stage_started",
            stage=stage.func_id,
            ver_id=impl.ver_id,
            pattern=impl.pattern.value,
            inputs={name: len(rows) for name, rows in zip(node.inputs, input_rows)},
        )
        parent_anchors = [anchors[0]] if impl.pattern.narrow else anchors
        container = lineage.record_table_derivation(parent_anchors, stage.func_id, impl.ver_id)
        out_name = node.output_name
        if relation_exists:
            rel = self.store.relation(out_name)
        else:
            if self.store.has_relation(out_name):
                self.store.drop_relation(out_name)
            rel = self.store.create_derived_relation(out_name, node.output_schema, container)
        rel.table_lid = container
        if impl.pattern.narrow:
            vers_used = self._narrow_driver(stage, impl, input_rows[0], rel, container)
        else:
            vers_used = self._wide_driver(stage, impl, node.inputs, input_rows, rel, container)
        rows_out = len(self.store.visible_rows(out_name))
        self._emit(
            "stage_completed",
            stage=stage.func_id,
            output=out_name,
            rows_out=rows_out,
            versions_used=vers_used,
        )
        self.stage_history.append(
            {
                "stage": stage.func_id,
                "output": out_name,
                "rows_in": [len(r) for r in input_rows],
                "rows_out": rows_out,
                "versions_used": vers_used,
            }
        )
        return rel, input_rows

    def _narrow_driver(self, stage, impl, rows, rel, container) -> list[int]:
        lineage = self.store.lineage
        func = stage.func_id
        body, ver = impl.body, impl.ver_id
        pattern = impl.pattern
        vers_used = {ver}
        cursor = 0
        repairs_done = 0
        while cursor < len(rows):
            row = rows[cursor]
            try:
                if cursor in _marker_positions(body):
                    raise RuntimeFault(
                        f"injected fault while processing row {cursor}",
                        func_id=func,
                        ver_id=ver,
                        cursor=cursor,
                        sample_row=_plain(row),
                    )
                if body.get("kind") == "external":
                    cursor = self._external_batch(
                        stage, body, ver, rows, cursor, rel, container
                    )
                    continue
                try:
                    outs = apply_row(body, _plain(row), self.ctx)
                except ValueError as exc:
                    # data faults inside template bodies (format guards, bad
                    # JSON cells) enter the same repair path as injected ones
                    raise RuntimeFault(str(exc), cursor=cursor) from exc
            except RuntimeFault as fault:
                if fault.cursor is None:
                    fault.cursor = cursor
                fault.func_id, fault.ver_id = func, ver
                if fault.sample_row is None and fault.cursor < len(rows):
                    fault.sample_row = _plain(rows[fault.cursor])
                impl2, repairs_done = self._repair(stage, body, ver, fault, repairs_done)
                body, ver = impl2.body, impl2.ver_id
                vers_used.add(ver)
                cursor = fault.cursor
                continue
            parent = (
                row["lid"]
                if lineage.has_entries(row["lid"])
                else lineage.anchor_of(row["lid"])
            )
            for out in outs:
                child = lineage.record_row_derivation(parent, func, ver, pattern)
                rel.append_row(
                    out, lid=child, anchor_lid=container, parent_lid=parent, ver_id=ver
                )
            cursor += 1
        stage.ver_id = ver
        return sorted(vers_used)

    def _external_batch(self, stage, body, ver, rows, cursor, rel, container) -> int:
        """Run an external row body over rows[cursor:stop]; returns new cursor.

        The batch stops at the next injected marker so markers behave the
        same for external and template bodies. Rows produced before a crash
        are kept; the fault carries the absolute cursor for resume.
        """
        lineage = self.store.lineage
        markers = [m for m in _marker_positions(body) if m > cursor]
        stop = min(markers) if markers else len(rows)
        payload = {"rows": [_plain(r) for r in rows[cursor:stop]], "offset": cursor}
        result = run_external_body(body, payload, self.config.timeout_s)
        for produced in result.get("rows", []):
            source = rows[produced["parent_index"]]
            parent = (
                source["lid"]
                if lineage.has_entries(source["lid"])
                else lineage.anchor_of(source["lid"])
            )
            child = lineage.record_row_derivation(
                parent, stage.func_id, ver, self.registry.implementation(stage.func_id, ver).pattern
            )
            rel.append_row(
                produced["values"], lid=child, anchor_lid=container, parent_lid=parent, ver_id=ver
            )
        error = result.get("error")
        if error:
            raise RuntimeFault(
                error.get("message", "external body fault"),
                func_id=stage.func_id,
                ver_id=ver,
                cursor=error.get("cursor"),
            )
        return stop

    def _wide_driver(self, stage, impl, input_names, input_rows, rel, container) -> list[int]:
        lineage = self.store.lineage
        body, ver = impl.body, impl.ver_id
        repairs_done = 0
        while True:
            try:
                if _marker_positions(body):
                    raise RuntimeFault(
                        "injected fault while processing the stage input",
                        func_id=stage.func_id,
                        ver_id=ver,
                        cursor=None,
                    )
                if body.get("kind") == "external":
                    payload = {
                        "tables": [
                            {
                                "columns": self.store.relation(n).schema.to_wire(),
                                "rows": [_plain(r) for r in rows],
                            }
                            for n, rows in zip(input_names, input_rows)
                        ]
                    }
                    result = run_external_body(body, payload, self.config.timeout_s)
                    if result.get("error"):
                        raise RuntimeFault(
                            result["error"].get("message", "external body fault"),
                            func_id=stage.func_id,
                            ver_id=ver,
                        )
                    outs = [r["values"] for r in result.get("rows", [])]
                else:
                    tables = [
                        (self.store.relation(n).schema, rows)
                        for n, rows in zip(input_names, input_rows)
                    ]
                    try:
                        outs = apply_table(body, tables, self.ctx)
                    except ValueError as exc:
                        raise RuntimeFault(str(exc)) from exc
                break
            except RuntimeFault as fault:
                fault.func_id, fault.ver_id = stage.func_id, ver
                impl2, repairs_done = self._repair(stage, body, ver, fault, repairs_done)
                body, ver = impl2.body, impl2.ver_id
        for out in outs:
            lid = lineage.allocate_lid()
            rel.append_row(out, lid=lid, anchor_lid=container, ver_id=ver)
            lineage.register_row(lid, container)
        stage.ver_id = ver
        return [ver]

    # -- repair --------------------------------------------------------------------

    def _repair(self, stage, body, ver, fault: RuntimeFault, repairs_done: int):
        if repairs_done >= self.config.max_repairs:
            raise RepairFailed(
                f"{stage.func_id} v{ver} still faulting after "
                f"{repairs_done} repairs: {fault.message}"
            )
        diagnosis = self.provider.run(
            request(
                "diagnose_fault",
                {
                    "body": body,
                    "fault": {
                        "message": fault.message,
                        "cursor": fault.cursor,
                        "sample_row": fault.sample_row,
                    },
                },
            )
        ).payload
        action = diagnosis["action"]
        if action == "give_up":
            raise RepairFailed(
                f"no repair found for {stage.func_id} v{ver}: {fault.message}"
            )
        if action == "remove_fault":
            new_body = _strip_marker(body, fault.cursor)
        elif action == "patch_params":
            new_body = copy.deepcopy(body)
            patch = diagnosis.get("set") or {}
            if new_body.get("kind") == "external":
                new_body.update(patch)
            else:
                new_body.setdefault("params", {}).update(patch)
        else:
            new_body = diagnosis.get("body")
            if new_body is None:
                raise RepairFailed(f"diagnosis returned no replacement body for {stage.func_id}")
        impl = self.registry.add_implementation(stage.func_id, new_body)
        self.registry.attach_profile(
            impl.func_id,
            impl.ver_id,
            {"repaired_from": ver, "cursor": fault.cursor, "action": action},
            "PASS",
        )
        record = {
            "stage": stage.func_id,
            "from_ver": ver,
            "to_ver": impl.ver_id,
            "cursor": fault.cursor,
            "action": action,
            "summary": diagnosis.get("summary", ""),
            "message": fault.message,
        }
        self.repairs.append(record)
        self._emit("repair", **record)
        logger.info(
            "repaired %s v%d -> v%d at cursor %s", stage.func_id, ver, impl.ver_id, fault.cursor
        )
        return impl, repairs_done + 1

    # -- monitoring -------------------------------------------------------------------

    def _monitor(self, stage: PhysicalStage, input_rows: list[list[dict]]) -> Anomaly | None:
        if not self.config.monitor_enabled or stage.func_id in self._resolved_stages:
            return None
        rules = set(self.config.monitor_rules)
        impl = self.registry.implementation(stage.func_id, stage.ver_id)
        body = impl.body
        kind = body.get("kind")
        params = body.get("params", {})
        visible = self.store.visible_rows(stage.node.output_name)

        if "fan_out" in rules and kind in ("equi_join", "similarity_join") and not params.get("collect"):
            key_col = params.get("left_column")
            if key_col:
                counts: dict = {}
                for row in visible:
                    counts[row.get(key_col)] = counts.get(row.get(key_col), 0) + 1
                if counts:
                    hot_key, hot_count = max(counts.items(), key=lambda kv: kv[1])
                    if hot_count > self.config.monitor_fanout_k:
                        evidence = [
                            _plain(r) for r in visible if r.get(key_col) == hot_key
                        ][:3]
                        return self._anomaly(
                            "fan_out",
                            stage,
                            f"key {hot_key!r} of {key_col} matched {hot_count} rows "
                            f"(threshold {self.config.monitor_fanout_k})",
                            evidence,
                        )
        if "score_range" in rules:
            for column, (low, high) in score_ranges(body).items():
                bad = [
                    r for r in visible
                    if r.get(column) is not None and not (low <= r[column] <= high)
                ]
                if bad:
                    return self._anomaly(
                        "score_range",
                        stage,
                        f"{len(bad)} values of {column} fall outside [{low:g}, {high:g}]",
                        [_plain(r) for r in bad[:3]],
                    )
        if "empty_output" in rules and kind in ("filter", "equi_join", "similarity_join"):
            if not params.get("collect") and input_rows[0] and not visible:
                return self._anomaly(
                    "empty_output",
                    stage,
                    f"{len(input_rows[0])} input rows produced no output",
                    [],
                )
        if "duplicate_key" in rules and visible:
            seen: dict = {}
            for row in visible:
                key = tuple(sorted(_plain(row).items()))
                seen[key] = seen.get(key, 0) + 1
            dups = {k: c for k, c in seen.items() if c > 1}
            if dups:
                sample = dict(next(iter(dups)))
                return self._anomaly(
                    "duplicate_key",
                    stage,
                    f"{len(dups)} distinct rows appear more than once",
                    [sample],
                )
        return None

    def _anomaly(self, rule: str, stage: PhysicalStage, detail: str, evidence: list[dict]) -> Anomaly:
        self._anomaly_seq += 1
        return Anomaly(
            anomaly_id=self._anomaly_seq,
            rule=rule,
            stage=stage.func_id,
            ver_id=stage.ver_id,
            detail=detail,
            evidence=evidence,
        )
