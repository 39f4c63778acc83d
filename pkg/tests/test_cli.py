"""Command line surface, driven through click's test runner."""

import json

import pytest
from click.testing import CliRunner

from prismdb.cli import main
from prismdb.demo import DEMO_QUERY, fixture_path, scripted_inputs
from support import EXPECTED_RANKING

runner = CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """An ingested store with one scripted query already run against it."""
    root = tmp_path_factory.mktemp("cli")
    store = root / "store"
    ingested = runner.invoke(main, ["ingest", fixture_path(), "--store", str(store)])
    assert ingested.exit_code == 0, ingested.output
    answers = root / "answers.txt"
    answers.write_text("\n".join(scripted_inputs()) + "\n", encoding="utf-8")
    ran = runner.invoke(
        main,
        ["query", DEMO_QUERY, "--store", str(store), "--answers", str(answers), "--json"],
    )
    assert ran.exit_code == 0, ran.output + ran.stderr
    result = json.loads(ran.stdout)
    return {
        "root": root,
        "store": str(store),
        "answers": str(answers),
        "ingest_summary": json.loads(ingested.stdout),
        "rows": result["rows"],
        "query_stderr": ran.stderr,
    }


class TestIngest:
    def test_summary_counts_the_fixture(self, workspace):
        summary = workspace["ingest_summary"]
        assert summary["relations"]["movies"] == 8
        assert summary["texts"] == 8
        assert summary["scenes"] == 8

    def test_snapshot_directory_is_loadable(self, workspace):
        out = runner.invoke(main, ["explain", "--store", workspace["store"], "--pipeline"])
        assert out.exit_code == 0


class TestQuery:
    def test_json_result_matches_the_frozen_ranking(self, workspace):
        rows = workspace["rows"]
        assert [r["movie_title"] for r in rows] == [t for t, _ in EXPECTED_RANKING]
        assert [r["rank"] for r in rows] == [1, 2, 3, 4]

    def test_interaction_is_logged_to_stderr(self, workspace):
        err = workspace["query_stderr"]
        assert "[clarify]" in err
        assert "proposed steps:" in err
        assert "[stage_completed]" in err
        assert "[run_completed]" in err

    def test_tsv_output(self, workspace):
        answers = workspace["answers"]
        store = str(workspace["root"] / "tsv_store")
        assert runner.invoke(main, ["ingest", fixture_path(), "--store", store]).exit_code == 0
        out = runner.invoke(
            main, ["query", DEMO_QUERY, "--store", store, "--answers", answers]
        )
        assert out.exit_code == 0, out.stderr
        lines = out.stdout.strip().splitlines()
        header = lines[0].split("\t")
        assert header[0] == "movie_title" and "final_score" in header
        assert len(lines) == 5
        assert lines[1].startswith("Steel Vendetta\t")

    def test_auto_ok_accepts_anomalies(self, workspace):
        store = str(workspace["root"] / "anomaly_store")
        assert runner.invoke(main, ["ingest", fixture_path(), "--store", store]).exit_code == 0
        out = runner.invoke(
            main,
            [
                "query",
                DEMO_QUERY,
                "--store",
                store,
                "--answers",
                workspace["answers"],
                "--auto-ok",
            ],
            env={"PRISMDB_MONITOR_FANOUT_K": "0"},
        )
        assert out.exit_code == 0, out.stderr
        assert "[anomaly]" in out.stderr
        assert out.stdout.strip().splitlines()[1].startswith("Steel Vendetta\t")

    def test_planning_failure_exits_3(self):
        out = runner.invoke(main, ["query", DEMO_QUERY, "--auto-ok"])
        assert out.exit_code == 3
        assert "planning failed" in out.stderr


class TestExplain:
    def test_pipeline_summary_lists_every_relation(self, workspace):
        out = runner.invoke(main, ["explain", "--store", workspace["store"], "--pipeline"])
        assert out.exit_code == 0
        lines = dict(
            line.split(" (", 1) for line in out.stdout.strip().splitlines()
        )
        assert lines["movies"].endswith("(source)")
        assert "rank_films v1" in lines["ranked_films"]
        assert lines["ranked_films"].startswith("4 rows)")

    def test_lid_explanation_walks_to_the_sources(self, workspace):
        lid = workspace["rows"][0]["lid"]
        out = runner.invoke(main, ["explain", "--store", workspace["store"], "--lid", str(lid)])
        assert out.exit_code == 0
        assert f"derivation of lid {lid}:" in out.stdout
        assert "rank_films v1 [table]" in out.stdout
        assert "gen_recency_score v2 [table]" in out.stdout
        assert "sources:" in out.stdout
        assert "movies.ndjson" in out.stdout

    def test_unknown_lid_exits_5(self, workspace):
        out = runner.invoke(main, ["explain", "--store", workspace["store"], "--lid", "999999"])
        assert out.exit_code == 5

    def test_needs_a_target(self, workspace):
        out = runner.invoke(main, ["explain", "--store", workspace["store"]])
        assert out.exit_code == 2
        assert "pass --lid N or --pipeline" in out.stderr


class TestLineage:
    def test_entries_stream_as_json_lines(self, workspace):
        lid = workspace["rows"][0]["lid"]
        out = runner.invoke(main, ["lineage", "--store", workspace["store"], "--lid", str(lid)])
        assert out.exit_code == 0
        entries = [json.loads(line) for line in out.stdout.strip().splitlines()]
        assert any(e["func_id"] == "rank_films" for e in entries)
        roots = [e for e in entries if e["parent_lid"] is None]
        assert roots and all(e["src_uri"].startswith("file://") for e in roots)

    def test_unknown_lid_exits_5(self, workspace):
        out = runner.invoke(main, ["lineage", "--store", workspace["store"], "--lid", "999999"])
        assert out.exit_code == 5


class TestFunctions:
    def test_list_shows_version_verdicts(self, workspace):
        out = runner.invoke(main, ["functions", "--store", workspace["store"], "--list"])
        assert out.exit_code == 0
        assert "s1/gen_recency_score: v1(FAIL), v2(PASS)" in out.stdout
        assert "s1/rank_films: v1(PASS)" in out.stdout

    def test_show_dumps_signature_and_versions(self, workspace):
        out = runner.invoke(
            main, ["functions", "--store", workspace["store"], "--show", "gen_recency_score"]
        )
        assert out.exit_code == 0
        doc = json.loads(out.stdout)
        assert doc["session"] == "s1"
        assert len(doc["versions"]) == 2
        assert doc["signature"]["name"] == "gen_recency_score"

    def test_unknown_function_exits_5(self, workspace):
        out = runner.invoke(
            main, ["functions", "--store", workspace["store"], "--show", "nope"]
        )
        assert out.exit_code == 5
        assert "no function named" in out.stderr

    def test_store_without_sessions_reports_nothing(self, workspace):
        bare = str(workspace["root"] / "bare_store")
        assert runner.invoke(main, ["ingest", fixture_path(), "--store", bare]).exit_code == 0
        out = runner.invoke(main, ["functions", "--store", bare, "--list"])
        assert out.exit_code == 0
        assert "no persisted functions" in out.stderr


class TestSnapshot:
    def test_copy_preserves_relations_and_lineage(self, workspace):
        target = str(workspace["root"] / "copy")
        out = runner.invoke(main, ["snapshot", "--store", workspace["store"], "--to", target])
        assert out.exit_code == 0
        counts = json.loads(out.stdout)
        assert counts["movies"] == 8
        assert counts["ranked_films"] == 4
        lid = workspace["rows"][0]["lid"]
        replay = runner.invoke(main, ["explain", "--store", target, "--lid", str(lid)])
        assert replay.exit_code == 0
        assert "rank_films v1 [table]" in replay.stdout
