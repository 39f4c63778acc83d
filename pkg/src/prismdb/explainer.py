"""Explanations over a finished run: pipeline summaries, per-field origins,
exclusion replay, and version-change reports.

Two granularities are offered. The coarse view summarizes every executed
stage: what it did, how many rows went in and out, which versions ran, and
any repairs or monitor findings. The fine view answers targeted questions
about a row, a column, or a value by combining three kinds of evidence: the
lineage log, the stored intermediate relations (replaying predicates on the
exact rows a filter saw), and the registry's version history.

Free-text questions are first classified by the synthesis provider, then the
facts are computed here, and the provider phrases the final answer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .backend.base import request
from .backend.deterministic import parse_description
from .templates import PIPELINE, _compare

logger = logging.getLogger(__name__)


def _bodies(body: dict) -> list[dict]:
    if body.get("kind") == PIPELINE:
        return [b for step in body.get("steps", []) for b in _bodies(step)]
    return [body]


@dataclass
class Explainer:
    store: object
    registry: object
    provider: object
    plan: object
    physical: object
    run: object

    # -- coarse --------------------------------------------------------------------

    def coarse(self) -> dict:
        """One section per executed stage, in execution order."""
        repairs_by_stage: dict[str, list[dict]] = {}
        for r in self.run.repairs:
            repairs_by_stage.setdefault(r["stage"], []).append(r)
        anomalies_by_stage: dict[str, list[dict]] = {}
        for a in self.run.anomaly_log:
            anomalies_by_stage.setdefault(a["stage"], []).append(a)
        sections = []
        for record in self.run.stage_history:
            stage = self.physical.stage(record["stage"])
            sections.append(
                {
                    "stage": record["stage"],
                    "description": stage.node.description,
                    "inputs": list(stage.node.inputs),
                    "output": record["output"],
                    "rows_in": record["rows_in"],
                    "rows_out": record["rows_out"],
                    "versions_used": record["versions_used"],
                    "chosen_version": stage.ver_id,
                    "repairs": repairs_by_stage.get(record["stage"], []),
                    "anomalies": anomalies_by_stage.get(record["stage"], []),
                }
            )
        return {
            "result": self.run.result_name,
            "stages": sections,
            "rewrites": self.physical.rewrites,
            "repairs": self.run.repairs,
            "anomalies": self.run.anomaly_log,
        }

    # -- column origins ---------------------------------------------------------------

    def column_origins(self) -> dict[str, dict]:
        """Which stage introduced each column visible anywhere in the plan."""
        origins: dict[str, dict] = {}
        catalog = self.store.catalog()["relations"]
        for name, desc in catalog.items():
            for col, _ in desc["schema"]:
                origins.setdefault(
                    col, {"stage": None, "relation": name, "kind": "stored"}
                )
        for stage in self.physical.stages:
            node = stage.node
            input_cols: set[str] = set()
            for inp in node.inputs:
                if inp in catalog:
                    input_cols.update(c for c, _ in catalog[inp]["schema"])
                else:
                    producer = self.physical.stage_by_output(inp)
                    input_cols.update(c.name for c in producer.node.output_schema.declared())
            for col in node.output_schema.declared():
                if col.name not in input_cols:
                    origins[col.name] = {
                        "stage": stage.func_id,
                        "relation": node.output_name,
                        "kind": "computed",
                    }
        return origins

    def which_function(self, column: str | None = None, lid: int | None = None) -> dict:
        facts: dict = {"sentences": []}
        if column is not None:
            origin = self.column_origins().get(column)
            if origin is None:
                facts["sentences"].append(f"No stage or stored relation defines a column named {column!r}.")
                return facts
            if origin["kind"] == "stored":
                facts["sentences"].append(
                    f"Column {column!r} comes directly from the stored relation "
                    f"{origin['relation']!r}; no function computed it."
                )
                return facts
            stage = self.physical.stage(origin["stage"])
            impl = self.registry.implementation(stage.func_id, stage.ver_id)
            facts["function"] = stage.func_id
            facts["ver_id"] = stage.ver_id
            facts["sentences"].append(
                f"Column {column!r} was written by function {stage.func_id!r} "
                f"version {stage.ver_id}."
            )
            facts["sentences"].append(f"That function does: {stage.node.description}")
            versions = self.registry.versions(stage.func_id)
            if len(versions) > 1:
                history = ", ".join(f"v{v.ver_id} ({v.verdict or 'UNTESTED'})" for v in versions)
                facts["sentences"].append(f"Version history: {history}.")
        if lid is not None:
            path = self.store.lineage.derivation_path(lid)
            if path:
                func, ver, _ = path[-1]
                facts["sentences"].append(
                    f"Record {lid} was last touched by {func!r} version {ver}."
                )
                chain = " -> ".join(f"{f} v{v}" for f, v, _ in path)
                facts["sentences"].append(f"Full derivation: {chain}.")
            else:
                facts["sentences"].append(f"Record {lid} is a source row with no derivation.")
        return facts

    # -- row level ---------------------------------------------------------------------

    def explain_row(self, lid: int) -> dict:
        """Field-by-field origin of one result row plus its derivation path."""
        rel = self.store.relation(self.run.result_name)
        row = rel.row_by_lid(lid)
        origins = self.column_origins()
        fields = {}
        for col in rel.schema.declared():
            origin = origins.get(col.name, {})
            entry = {"value": row.get(col.name), "origin": origin.get("kind", "unknown")}
            if origin.get("stage"):
                stage = self.physical.stage(origin["stage"])
                entry["function"] = origin["stage"]
                entry["ver_id"] = stage.ver_id
                entry["how"] = stage.node.description
            elif origin.get("relation"):
                entry["relation"] = origin["relation"]
            fields[col.name] = entry
        ancestors = self.store.lineage.ancestors(lid)
        return {
            "lid": lid,
            "fields": fields,
            "path": [
                {"function": f, "ver_id": v, "granularity": d}
                for f, v, d in self.store.lineage.derivation_path(lid)
            ],
            "sources": sorted({e.src_uri for e in ancestors if e.src_uri}),
        }

    # -- exclusion replay ---------------------------------------------------------------

    def why_excluded(self, value: str) -> dict:
        """Replay every filtering stage's predicate on the rows that carried
        the value, reporting exactly where and why it was dropped."""
        facts: dict = {"sentences": [], "found": False}
        included = self._find_in_result(value)
        if included is not None:
            facts["found"] = True
            facts["sentences"].append(
                f"{value!r} was not excluded: it is in the result"
                + (f" at rank {included['rank']}" if "rank" in included else "")
                + "."
            )
            return facts
        origins = self.column_origins()
        for record in self.run.stage_history:
            stage = self.physical.stage(record["stage"])
            impl = self.registry.implementation(stage.func_id, stage.ver_id)
            for body in _bodies(impl.body):
                if body.get("kind") != "filter":
                    continue
                params = body["params"]
                column, op, target = params["column"], params["op"], params.get("value")
                in_rows = self.store.visible_rows(stage.node.inputs[0])
                for row in in_rows:
                    if value not in [v for v in row.values() if isinstance(v, str)]:
                        continue
                    if _compare(op, row.get(column), target):
                        continue
                    facts["found"] = True
                    facts["sentences"].append(
                        f"{value!r} reached stage {stage.func_id!r} with "
                        f"{column} = {row.get(column)!r}."
                    )
                    facts["sentences"].append(
                        f"{stage.func_id!r} v{stage.ver_id} keeps rows where "
                        f"{column} {op} {target!r}, so the row was dropped."
                    )
                    source = origins.get(column, {})
                    if source.get("stage"):
                        self._describe_flag_source(facts, source["stage"], row, column)
                    return facts
        if not facts["found"]:
            facts["sentences"].append(
                f"No filtering stage saw a row carrying {value!r}; it may not "
                "exist in the inputs at all."
            )
        return facts

    def _describe_flag_source(self, facts: dict, stage_name: str, row: dict, column: str) -> None:
        stage = self.physical.stage(stage_name)
        impl = self.registry.implementation(stage.func_id, stage.ver_id)
        for body in _bodies(impl.body):
            if body.get("kind") != "classify_boolean" or body["params"].get("into") != column:
                continue
            params = body["params"]
            src_col = params["column"]
            facts["sentences"].append(
                f"{column} itself was computed by {stage.func_id!r} v{stage.ver_id}, "
                f"which flags rows where {src_col} {params['op']} {params['value']!r}; "
                f"this row had {src_col} = {row.get(src_col)!r}."
            )

    def why_included(self, value: str) -> dict:
        facts: dict = {"sentences": [], "found": False}
        row = self._find_in_result(value)
        if row is None:
            facts["sentences"].append(f"{value!r} is not in the result.")
            return facts
        facts["found"] = True
        detail = f"{value!r} is in the result"
        if "rank" in row:
            detail += f" at rank {row['rank']}"
        facts["sentences"].append(detail + ".")
        for col in ("final_score", "rank"):
            if col in row:
                origin = self.column_origins().get(col, {})
                if origin.get("stage"):
                    stage = self.physical.stage(origin["stage"])
                    facts["sentences"].append(
                        f"Its {col} = {row[col]!r} was computed by {stage.func_id!r} "
                        f"v{stage.ver_id}."
                    )
        passed = [
            s.func_id
            for s in self.physical.stages
            for body in _bodies(self.registry.implementation(s.func_id, s.ver_id).body)
            if body.get("kind") == "filter"
        ]
        if passed:
            facts["sentences"].append(
                "It passed the filtering stages: " + ", ".join(passed) + "."
            )
        return facts

    def _find_in_result(self, value: str) -> dict | None:
        for row in self.store.visible_rows(self.run.result_name):
            if value in [v for v in row.values() if isinstance(v, str)]:
                return row
        return None

    # -- version diffs -------------------------------------------------------------------

    def what_changed(self, func_id: str) -> dict:
        facts: dict = {"sentences": []}
        versions = self.registry.versions(func_id)
        if not versions:
            facts["sentences"].append(f"No function named {func_id!r} was synthesized.")
            return facts
        if len(versions) == 1:
            facts["sentences"].append(
                f"{func_id!r} has a single version; nothing changed during the run."
            )
            return facts
        prev, last = versions[-2], versions[-1]
        facts["sentences"].append(
            f"{func_id!r} moved from v{prev.ver_id} to v{last.ver_id}."
        )
        diffs = self._diff_bodies(prev.body, last.body)
        for diff in diffs:
            facts["sentences"].append("Changed " + diff + ".")
        facts["sentences"].append(
            f"v{prev.ver_id} was judged {prev.verdict or 'UNTESTED'}; "
            f"v{last.ver_id} {last.verdict or 'UNTESTED'}."
        )
        partition = self._version_partition(func_id)
        if partition:
            parts = ", ".join(
                f"{count} row(s) from v{ver}" for ver, count in sorted(partition.items())
            )
            facts["sentences"].append(f"The stored output splits by version: {parts}.")
        superseded = self._superseded_count(func_id)
        if superseded:
            facts["sentences"].append(
                f"{superseded} earlier row(s) were superseded by the newer version."
            )
        return facts

    def _diff_bodies(self, a: dict, b: dict) -> list[str]:
        diffs = []
        if a.get("kind") != b.get("kind"):
            diffs.append(f"kind: {a.get('kind')} -> {b.get('kind')}")
            return diffs
        pa, pb = a.get("params", {}), b.get("params", {})
        for key in sorted(set(pa) | set(pb)):
            if pa.get(key) != pb.get(key):
                diffs.append(f"{key}: {pa.get(key)!r} -> {pb.get(key)!r}")
        if (a.get("fault") or None) != (b.get("fault") or None):
            before = len(a.get("fault") or [])
            after = len(b.get("fault") or [])
            diffs.append(f"fault markers: {before} -> {after}")
        if a.get("kind") == "external" and a.get("code") != b.get("code"):
            diffs.append("external code body")
        return diffs

    def _version_partition(self, func_id: str) -> dict[int, int]:
        for stage in self.physical.stages:
            if stage.func_id != func_id:
                continue
            rel_name = stage.node.output_name
            if not self.store.has_relation(rel_name):
                return {}
            partition: dict[int, int] = {}
            for row in self.store.visible_rows(rel_name):
                ver = row.get("ver_id")
                if ver is not None:
                    partition[ver] = partition.get(ver, 0) + 1
            return partition
        return {}

    def _superseded_count(self, func_id: str) -> int:
        for stage in self.physical.stages:
            if stage.func_id != func_id:
                continue
            rel = self.store.relation(stage.node.output_name)
            visible = {r["lid"] for r in self.store.visible_rows(stage.node.output_name)}
            return sum(1 for lid in rel.lids() if lid not in visible)
        return 0

    # -- free-text questions -----------------------------------------------------------------

    def ask(self, question: str) -> dict:
        known_columns = sorted(self.column_origins())
        known_functions = [s.func_id for s in self.physical.stages]
        classified = self.provider.run(
            request(
                "answer_question",
                {
                    "phase": "classify",
                    "question": question,
                    "known_columns": known_columns,
                    "known_functions": known_functions,
                },
            )
        ).payload
        category = classified["category"]
        target = classified.get("target") or {}
        if category == "which_function":
            facts = self.which_function(column=target.get("column"), lid=target.get("lid"))
        elif category == "why_excluded":
            facts = self.why_excluded(target.get("value", ""))
        elif category == "why_included":
            facts = self.why_included(target.get("value", ""))
        elif category == "what_changed":
            func = target.get("function")
            if func is None:
                changed = [
                    f for f in known_functions if len(self.registry.versions(f)) > 1
                ]
                func = changed[0] if changed else known_functions[-1]
            facts = self.what_changed(func)
        else:
            return {
                "category": "unsupported",
                "answer": "That question is outside what the lineage and registry "
                "can answer; try asking about a column's origin, an excluded value, "
                "or what a repair changed.",
            }
        composed = self.provider.run(
            request(
                "answer_question",
                {"phase": "compose", "category": category, "facts": facts},
            )
        ).payload
        return {"category": category, "answer": composed["answer"], "facts": facts}
