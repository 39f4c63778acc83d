"""Execution runs: stage drivers, lineage capture, repair, and the monitor."""

from collections import Counter

import pytest

from prismdb.config import EngineConfig
from prismdb.errors import InvalidChoice, InvalidState
from prismdb.registry import FunctionRegistry
from prismdb.values import schema
from support import manual_stage, run_physical, store_with

PROJECT = {"kind": "project", "params": {"columns": ["title", "year"]}}

FILM_ROWS = [
    {"title": "a", "year": 2001},
    {"title": "b", "year": 2011},
    {"title": "c", "year": 1999},
]


def film_store(rows=None):
    return store_with("films", (("title", "text", True), ("year", "int64")), rows or FILM_ROWS)


def film_stage(registry, store, body, name="keep_all", output="kept"):
    return manual_stage(
        registry, name, ["films"], output, body, [store.relation("films").schema]
    )


def plain(row):
    return {k: v for k, v in row.items() if k not in ("lid", "parent_lid", "ver_id", "anchor_lid")}


class TestCleanExecution:
    def test_narrow_rows_point_at_their_sources(self, tmp_path):
        store = film_store()
        registry = FunctionRegistry(root=str(tmp_path))
        stage = film_stage(registry, store, dict(PROJECT))
        run = run_physical(store, registry, [stage])
        assert run.status == "done"
        rows = store.visible_rows("kept")
        assert len(rows) == 3
        source_anchor = store.relation("films").table_lid
        assert all(r["parent_lid"] == source_anchor for r in rows)
        assert all(r["ver_id"] == 1 for r in rows)

    def test_stage_container_sits_under_every_row(self, tmp_path):
        store = film_store()
        registry = FunctionRegistry(root=str(tmp_path))
        stage = film_stage(registry, store, dict(PROJECT))
        run_physical(store, registry, [stage])
        container = store.relation("kept").table_lid
        entries = store.lineage.entries_for(container)
        assert [e.data_type for e in entries] == ["table"]
        assert entries[0].parent_lid == store.relation("films").table_lid
        assert store.lineage.derivation_path(container) == [("keep_all", 1, "table")]
        for row in store.visible_rows("kept"):
            path = store.lineage.derivation_path(row["lid"])
            assert path == [("keep_all", 1, "row")]

    def test_chained_rows_point_at_upstream_rows(self, tmp_path):
        store = film_store()
        registry = FunctionRegistry(root=str(tmp_path))
        first = film_stage(registry, store, dict(PROJECT))
        second = manual_stage(
            registry, "drop_old", ["kept"], "recent",
            {"kind": "filter", "params": {"column": "year", "op": ">", "value": 2000}},
            [first.node.output_schema],
        )
        run = run_physical(store, registry, [first, second])
        assert run.status == "done"
        kept_lids = {r["lid"] for r in store.visible_rows("kept")}
        recent = store.visible_rows("recent")
        assert sorted(r["year"] for r in recent) == [2001, 2011]
        assert all(r["parent_lid"] in kept_lids for r in recent)
        assert [h["stage"] for h in run.stage_history] == ["keep_all", "drop_old"]

    def test_wide_rows_register_to_the_container(self, tmp_path):
        store = film_store()
        store.create_relation("tags", schema(("title", "text"), ("tag", "text")))
        store.ingest_rows(
            "tags",
            [{"title": "a", "tag": "long"}, {"title": "b", "tag": "new"}],
            "file:///data/tags.ndjson",
        )
        registry = FunctionRegistry(root=str(tmp_path))
        stage = manual_stage(
            registry, "tag_films", ["films", "tags"], "tagged",
            {"kind": "equi_join", "params": {"left_column": "title", "right_column": "title"}},
            [store.relation("films").schema, store.relation("tags").schema],
        )
        run = run_physical(store, registry, [stage])
        assert run.status == "done"
        rows = store.visible_rows("tagged")
        assert len(rows) == 2
        container = store.relation("tagged").table_lid
        parents = sorted(e.parent_lid for e in store.lineage.entries_for(container))
        assert parents == sorted(
            [store.relation("films").table_lid, store.relation("tags").table_lid]
        )
        for row in rows:
            assert row["parent_lid"] is None
            assert not store.lineage.has_entries(row["lid"])
            assert store.lineage.anchor_of(row["lid"]) == container

    def test_event_stream_covers_the_run(self, tmp_path):
        store = film_store()
        registry = FunctionRegistry(root=str(tmp_path))
        stage = film_stage(registry, store, dict(PROJECT))
        run = run_physical(store, registry, [stage])
        kinds = [e.kind for e in run.events]
        assert kinds == ["stage_started", "stage_completed", "run_completed"]
        assert [e.seq for e in run.events] == [1, 2, 3]
        assert run.events_since(0) == run.events
        assert run.events_since(run.events[-1].seq) == []
        assert run.result_name == "kept"


class TestFaultRepair:
    def faulted_run(self, tmp_path, markers, rows=None, config=None):
        store = film_store(rows)
        registry = FunctionRegistry(root=str(tmp_path))
        body = dict(PROJECT) | {"fault": [{"at_row": k} for k in markers]}
        stage = film_stage(registry, store, body)
        run = run_physical(store, registry, [stage], config=config)
        return store, registry, run

    def test_mid_stream_fault_partitions_versions(self, tmp_path):
        store, registry, run = self.faulted_run(tmp_path, [1])
        assert run.status == "done"
        assert len(run.repairs) == 1
        record = run.repairs[0]
        assert record["from_ver"] == 1
        assert record["to_ver"] == 2
        assert record["cursor"] == 1
        assert record["action"] == "remove_fault"
        rows = store.visible_rows("kept")
        assert [r["ver_id"] for r in rows] == [1, 2, 2]
        assert registry.implementation("keep_all", 2).body == PROJECT
        assert run.stage_history[0]["versions_used"] == [1, 2]

    def test_fault_on_the_first_row(self, tmp_path):
        store, _, run = self.faulted_run(tmp_path, [0])
        assert run.status == "done"
        rows = store.visible_rows("kept")
        assert [r["ver_id"] for r in rows] == [2, 2, 2]

    def test_fault_on_the_last_row(self, tmp_path):
        store, _, run = self.faulted_run(tmp_path, [2])
        assert run.status == "done"
        rows = store.visible_rows("kept")
        assert [r["ver_id"] for r in rows] == [1, 1, 2]

    def test_two_faults_make_three_versions(self, tmp_path):
        store, registry, run = self.faulted_run(tmp_path, [0, 2])
        assert run.status == "done"
        assert [r["cursor"] for r in run.repairs] == [0, 2]
        rows = store.visible_rows("kept")
        assert [r["ver_id"] for r in rows] == [2, 2, 3]
        assert [i.ver_id for i in registry.versions("keep_all")] == [1, 2, 3]

    def test_repaired_run_matches_the_clean_one(self, tmp_path):
        clean_store, _, clean = self.faulted_run(tmp_path / "clean", [])
        fixed_store, _, fixed = self.faulted_run(tmp_path / "fixed", [1])
        assert clean.status == fixed.status == "done"
        clean_rows = Counter(tuple(sorted(plain(r).items())) for r in clean_store.visible_rows("kept"))
        fixed_rows = Counter(tuple(sorted(plain(r).items())) for r in fixed_store.visible_rows("kept"))
        assert clean_rows == fixed_rows
        # the row finished before the fault keeps its original version
        assert fixed_store.visible_rows("kept")[0]["ver_id"] == 1

    def test_repair_budget_exhausts(self, tmp_path):
        _, _, run = self.faulted_run(
            tmp_path, [0, 2], config=EngineConfig(max_repairs=1)
        )
        assert run.status == "failed"
        assert "still faulting" in run.error
        assert len(run.repairs) == 1
        assert run.events[-1].kind == "run_failed"

    def test_undiagnosable_faults_fail_the_run(self, tmp_path):
        store = store_with("nums", (("n", "int64"),), [{"n": 1}, {"n": 2}])
        registry = FunctionRegistry(root=str(tmp_path))
        body = {
            "kind": "external",
            "pattern": "one_to_one",
            "mode": "row",
            "code": "def transform(row):\n    raise ValueError('boom')\n",
            "output_schema": schema(("n", "int64")),
        }
        stage = manual_stage(registry, "explode", ["nums"], "out", body, [store.relation("nums").schema])
        run = run_physical(store, registry, [stage])
        assert run.status == "failed"
        assert "no repair found" in run.error
        assert "ValueError: boom" in run.error

    def test_format_guard_fault_is_patched_in_place(self, tmp_path):
        store = store_with(
            "posters",
            (("title", "text", True), ("poster", "uri")),
            [
                {"title": "a", "poster": "art/a.png"},
                {"title": "b", "poster": "art/b.HEIC"},
                {"title": "c", "poster": "art/c.jpg"},
            ],
        )
        registry = FunctionRegistry(root=str(tmp_path))
        body = {
            "kind": "classify_boolean",
            "params": {
                "column": "title",
                "op": "==",
                "value": "b",
                "into": "is_b",
                "uri_column": "poster",
                "supported_formats": [".png", ".jpg"],
            },
        }
        stage = manual_stage(
            registry, "flag_b", ["posters"], "flagged", body, [store.relation("posters").schema]
        )
        run = run_physical(store, registry, [stage])
        assert run.status == "done"
        assert run.repairs[0]["action"] == "patch_params"
        assert run.repairs[0]["cursor"] == 1
        assert "unsupported image format" in run.repairs[0]["message"]
        patched = registry.implementation("flag_b", 2).body
        assert patched["params"]["normalize_formats"] is True
        rows = store.visible_rows("flagged")
        assert [r["ver_id"] for r in rows] == [1, 2, 2]
        assert [r["is_b"] for r in rows] == [False, True, False]

    def test_external_rows_resume_at_the_cursor(self, tmp_path):
        store = store_with("nums", (("n", "int64"),), [{"n": 1}, {"n": 2}, {"n": 3}])
        registry = FunctionRegistry(root=str(tmp_path))
        body = {
            "kind": "external",
            "pattern": "one_to_one",
            "mode": "row",
            "code": "def transform(row):\n    return {'n': row['n'] * 10}\n",
            "fault": [{"at_row": 1}],
            "output_schema": schema(("n", "int64")),
        }
        stage = manual_stage(registry, "tenfold", ["nums"], "out", body, [store.relation("nums").schema])
        run = run_physical(store, registry, [stage])
        assert run.status == "done"
        rows = store.visible_rows("out")
        assert [r["n"] for r in rows] == [10, 20, 30]
        assert [r["ver_id"] for r in rows] == [1, 2, 2]
        anchor = store.relation("nums").table_lid
        assert all(r["parent_lid"] == anchor for r in rows)

    def test_external_crash_keeps_the_finished_rows(self, tmp_path):
        store = store_with("nums", (("n", "int64"),), [{"n": 1}, {"n": 2}, {"n": 3}])
        registry = FunctionRegistry(root=str(tmp_path))
        body = {
            "kind": "external",
            "pattern": "one_to_one",
            "mode": "row",
            "code": (
                "def transform(row):\n"
                "    if row['n'] == 3:\n"
                "        raise ValueError('boom')\n"
                "    return {'n': row['n'] * 10}\n"
            ),
            "output_schema": schema(("n", "int64")),
        }
        stage = manual_stage(registry, "tenfold", ["nums"], "out", body, [store.relation("nums").schema])
        run = run_physical(store, registry, [stage])
        assert run.status == "failed"
        assert [r["n"] for r in store.visible_rows("out")] == [10, 20]

    def test_wide_fault_reruns_the_whole_stage(self, tmp_path):
        store = film_store()
        store.create_relation("tags", schema(("title", "text"), ("tag", "text")))
        store.ingest_rows("tags", [{"title": "a", "tag": "long"}], "file:///data/tags.ndjson")
        registry = FunctionRegistry(root=str(tmp_path))
        body = {
            "kind": "equi_join",
            "params": {"left_column": "title", "right_column": "title"},
            "fault": [{"at_row": 0}],
        }
        stage = manual_stage(
            registry, "tag_films", ["films", "tags"], "tagged", body,
            [store.relation("films").schema, store.relation("tags").schema],
        )
        run = run_physical(store, registry, [stage])
        assert run.status == "done"
        assert run.repairs[0]["cursor"] is None
        rows = store.visible_rows("tagged")
        assert [r["ver_id"] for r in rows] == [2]
        assert run.stage_history[0]["versions_used"] == [2]


def fan_out_setup(tmp_path, **config_kwargs):
    """One left row joining three right rows: fan-out of 3 on key 'a'."""
    store = store_with("films", (("title", "text", True), ("year", "int64")), [{"title": "a", "year": 2001}])
    store.create_relation("tags", schema(("title", "text"), ("tag", "text")))
    store.ingest_rows(
        "tags",
        [{"title": "a", "tag": t} for t in ("one", "two", "three")],
        "file:///data/tags.ndjson",
    )
    registry = FunctionRegistry(root=str(tmp_path))
    stage = manual_stage(
        registry, "tag_films", ["films", "tags"], "tagged",
        {"kind": "equi_join", "params": {"left_column": "title", "right_column": "title"}},
        [store.relation("films").schema, store.relation("tags").schema],
    )
    config = EngineConfig(monitor_fanout_k=2, **config_kwargs)
    return store, registry, stage, config


class TestMonitor:
    def test_join_fan_out_pauses_the_run(self, tmp_path):
        store, registry, stage, config = fan_out_setup(tmp_path)
        run = run_physical(store, registry, [stage], config=config, auto_resolver=lambda a: None)
        assert run.status == "paused"
        anomaly = run.pending_anomaly
        assert anomaly.rule == "fan_out"
        assert anomaly.stage == "tag_films"
        assert "matched 3 rows" in anomaly.detail
        assert len(anomaly.evidence) == 3
        assert anomaly.options == ("accept", "adjust", "rewrite")
        assert run.events[-1].kind == "anomaly"
        assert run.anomaly_log == [anomaly.to_json()]

    def test_accepting_keeps_the_output(self, tmp_path):
        store, registry, stage, config = fan_out_setup(tmp_path)
        run = run_physical(store, registry, [stage], config=config)
        assert run.status == "done"
        assert len(store.visible_rows("tagged")) == 3
        assert [i.ver_id for i in registry.versions("tag_films")] == [1]
        kinds = [e.kind for e in run.events]
        assert "anomaly" in kinds and "anomaly_resolved" in kinds

    def test_adjusting_supersedes_the_old_rows(self, tmp_path):
        store = store_with("queries", (("q", "text", True),), [{"q": "harbor chase"}])
        store.create_relation("docs", schema(("d", "text"),))
        store.ingest_rows(
            "docs",
            [{"d": "harbor chase"}, {"d": "harbor chase scene"}, {"d": "a harbor chase"}],
            "file:///data/docs.ndjson",
        )
        registry = FunctionRegistry(root=str(tmp_path))
        stage = manual_stage(
            registry, "match_docs", ["queries", "docs"], "matches",
            {
                "kind": "similarity_join",
                "params": {
                    "left_column": "q",
                    "right_column": "d",
                    "threshold": 0.5,
                    "one_to_one": False,
                },
            },
            [store.relation("queries").schema, store.relation("docs").schema],
        )
        config = EngineConfig(monitor_fanout_k=2)
        run = run_physical(
            store, registry, [stage], config=config,
            auto_resolver=lambda a: {"choice": "adjust", "params": {"one_to_one": True}},
        )
        assert run.status == "done"
        visible = store.visible_rows("matches")
        assert len(visible) == 1
        assert visible[0]["ver_id"] == 2
        assert stage.ver_id == 2
        # the paused output is superseded, not erased
        assert store.relation("matches").row_count == 4
        assert registry.implementation("match_docs", 2).body["params"]["one_to_one"] is True
        assert registry.implementation("match_docs", 2).profile["resolution"] == "adjust"
        assert [e.kind for e in run.events].count("stage_rerun") == 1

    def test_rewriting_consults_the_provider(self, tmp_path):
        store, registry, stage, config = fan_out_setup(tmp_path)
        run = run_physical(
            store, registry, [stage], config=config,
            auto_resolver=lambda a: {"choice": "rewrite", "note": "double check the matches"},
        )
        assert run.status == "done"
        visible = store.visible_rows("tagged")
        assert len(visible) == 3
        assert all(r["ver_id"] == 2 for r in visible)
        assert store.relation("tagged").row_count == 6
        assert registry.implementation("tag_films", 2).profile["resolution"] == "rewrite"
        rerun = [e for e in run.events if e.kind == "stage_rerun"]
        assert rerun[0].payload["reason"].startswith("rewritten from note")

    def test_empty_output_anomaly(self, tmp_path):
        store = film_store()
        registry = FunctionRegistry(root=str(tmp_path))
        stage = film_stage(
            registry, store,
            {"kind": "filter", "params": {"column": "title", "op": "==", "value": "zzz"}},
        )
        run = run_physical(store, registry, [stage], auto_resolver=lambda a: None)
        assert run.status == "paused"
        assert run.pending_anomaly.rule == "empty_output"
        assert "3 input rows produced no output" in run.pending_anomaly.detail
        run.resolve("accept")
        assert run.status == "done"
        assert store.visible_rows("kept") == []

    def test_duplicate_rows_anomaly(self, tmp_path):
        store = store_with("logs", (("msg", "text"),), [{"msg": "hi"}, {"msg": "hi"}])
        registry = FunctionRegistry(root=str(tmp_path))
        stage = manual_stage(
            registry, "copy_logs", ["logs"], "out",
            {"kind": "project", "params": {"columns": ["msg"]}},
            [store.relation("logs").schema],
        )
        run = run_physical(store, registry, [stage], auto_resolver=lambda a: None)
        assert run.status == "paused"
        assert run.pending_anomaly.rule == "duplicate_key"
        assert run.pending_anomaly.evidence == [{"msg": "hi"}]

    def test_score_range_anomaly_adjusts_back_into_range(self, tmp_path):
        store = film_store()
        registry = FunctionRegistry(root=str(tmp_path))
        body = {
            "kind": "numeric_score",
            "params": {"column": "year", "low": 2000, "high": 2010, "into": "s", "scale": 5},
        }
        stage = film_stage(registry, store, body, name="score_years", output="scored")
        run = run_physical(
            store, registry, [stage],
            auto_resolver=lambda a: {"choice": "adjust", "params": {"scale": 1}},
        )
        assert run.status == "done"
        anomalies = [e for e in run.events if e.kind == "anomaly"]
        assert anomalies[0].payload["rule"] == "score_range"
        visible = store.visible_rows("scored")
        assert all(0.0 <= r["s"] <= 1.0 for r in visible)
        assert all(r["ver_id"] == 2 for r in visible)

    def test_monitor_can_be_disabled(self, tmp_path):
        store, registry, stage, config = fan_out_setup(tmp_path, monitor_enabled=False)
        run = run_physical(store, registry, [stage], config=config, auto_resolver=lambda a: None)
        assert run.status == "done"
        assert run.anomaly_log == []

    def test_rule_selection_is_respected(self, tmp_path):
        store, registry, stage, config = fan_out_setup(tmp_path, monitor_rules=("empty_output",))
        run = run_physical(store, registry, [stage], config=config, auto_resolver=lambda a: None)
        assert run.status == "done"
        assert run.anomaly_log == []

    def test_resolution_guards(self, tmp_path):
        store, registry, stage, config = fan_out_setup(tmp_path)
        run = run_physical(store, registry, [stage], config=config, auto_resolver=lambda a: None)
        assert run.status == "paused"
        with pytest.raises(InvalidChoice):
            run.resolve("shrug")
        run.resolve("accept")
        assert run.status == "done"
        with pytest.raises(InvalidState):
            run.resolve("accept")
