"""Synthesis backends: protocol, description grammar, rule behavior, HTTP transport."""

import socket
import time

import pytest

from prismdb.backend import (
    DeterministicProvider,
    ExternalProvider,
    MockSynthesisService,
    SynthesisResponse,
    UsageMeter,
    validate_payload,
)
from prismdb.backend.base import FORMAT_SCHEMAS, request
from prismdb.backend.deterministic import parse_description, render_description
from prismdb.config import EngineConfig
from prismdb.errors import AuthError, ProviderTimeout, SchemaViolation, TransportError

QUERY = (
    "Sort the films in the table by how exciting they are, and the poster "
    "should not be 'boring'."
)
ANSWER = "The movie plot contains scenes that are uncommon in real life."

CATALOG = {
    "relations": {
        "movies": {
            "kind": "base",
            "schema": [
                ["movie_title", "text"],
                ["release_year", "int64"],
                ["plot_doc", "text"],
                ["poster_vid", "text"],
            ],
            "keys": ["movie_title"],
        },
        "Objects": {
            "kind": "scene_objects",
            "schema": [
                ["vid", "text"],
                ["fid", "int64"],
                ["oid", "int64"],
                ["cid", "text"],
                ["x1", "float64"],
                ["y1", "float64"],
                ["x2", "float64"],
                ["y2", "float64"],
            ],
            "keys": ["vid", "fid", "oid"],
        },
        "EntityAttributes": {
            "kind": "text_entity_attributes",
            "schema": [["did", "text"], ["eid", "int64"], ["k", "text"], ["v", "text"]],
            "keys": ["did", "eid", "k"],
        },
    },
    "bundles": {
        "scene": {"objects": "Objects"},
        "text": {"attributes": "EntityAttributes"},
    },
}

JOIN_HINTS = {
    "joinability": {
        "movies|EntityAttributes": [
            {"left_column": "plot_doc", "right_column": "did", "overlap": 1.0}
        ],
        "movies|Objects": [{"left_column": "poster_vid", "right_column": "vid", "overlap": 1.0}],
    }
}


def review(provider, clarifications):
    return provider.run(
        request(
            "review_query",
            {
                "query": QUERY,
                "clarifications": clarifications,
                "lexicon": list(EngineConfig().ambiguity_lexicon),
                "ask_about_quoted": False,
                "max_rounds": 3,
            },
        )
    ).payload


def clarified(provider):
    first = review(provider, [])
    return [{"term": first["term"], "question": first["question"], "answer": ANSWER}]


class TestProtocol:
    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            request("daydream", {})

    def test_validate_payload_requires_keys(self):
        with pytest.raises(SchemaViolation):
            validate_payload(FORMAT_SCHEMAS["verify_plan"], {"verdict": "APPROVE"})

    def test_validate_payload_checks_types(self):
        with pytest.raises(SchemaViolation):
            validate_payload(
                FORMAT_SCHEMAS["verify_plan"],
                {"verdict": 1, "reasons": [], "needs": []},
            )
        with pytest.raises(SchemaViolation):
            validate_payload(
                FORMAT_SCHEMAS["verify_plan"],
                {"verdict": "APPROVE", "reasons": [7], "needs": []},
            )

    def test_validate_payload_accepts_nullable(self):
        validate_payload(
            FORMAT_SCHEMAS["review_query"],
            {"action": "forward", "question": None, "term": None, "assumptions": []},
        )

    def test_non_object_payload_rejected(self):
        with pytest.raises(SchemaViolation):
            validate_payload(FORMAT_SCHEMAS["generate_sketch"], ["steps"])

    def test_usage_meter_counts_by_task(self):
        meter = UsageMeter()
        meter.record("code_node")
        meter.record("code_node")
        meter.record("verify_plan")
        snap = meter.snapshot()
        assert snap["calls"] == 3
        assert snap["by_task"] == {"code_node": 2, "verify_plan": 1}

    def test_provider_counts_usage(self, provider):
        before = provider.usage.snapshot()["calls"]
        review(provider, [])
        assert provider.usage.snapshot()["calls"] == before + 1


CANONICAL_BODIES = [
    ({"kind": "project", "params": {"columns": ["title", "year"]}}, ["t"]),
    ({"kind": "filter", "params": {"column": "year", "op": ">", "value": 2000}}, ["t"]),
    ({"kind": "filter", "params": {"column": "name", "op": "==", "value": "x y"}}, ["t"]),
    (
        {
            "kind": "filter",
            "params": {
                "column": "flag",
                "op": "==",
                "value": False,
                "uri_column": "poster",
                "supported_formats": [".png", ".jpg"],
                "normalize_formats": False,
            },
        },
        ["t"],
    ),
    (
        {
            "kind": "classify_boolean",
            "params": {"column": "labels", "op": "contains", "value": "boring", "into": "is_boring"},
        },
        ["t"],
    ),
    ({"kind": "equi_join", "params": {"left_column": "plot_doc", "right_column": "did"}}, ["movies", "Entities"]),
    ({"kind": "equi_join", "params": {"left_column": None, "right_column": None}}, ["movies", "Entities"]),
    (
        {
            "kind": "equi_join",
            "params": {
                "left_column": "plot_doc",
                "right_column": "did",
                "right_where": {"column": "k", "op": "==", "value": "label"},
                "collect": {"column": "v", "into": "labels", "sep": " ; ", "count_into": "n"},
            },
        },
        ["movies", "EntityAttributes"],
    ),
    (
        {
            "kind": "similarity_join",
            "params": {"left_column": "t", "right_column": "u", "threshold": 0.8, "one_to_one": True},
        },
        ["a", "b"],
    ),
    (
        {
            "kind": "similarity_join",
            "params": {"left_column": "t", "right_column": "u", "threshold": 0.5, "one_to_one": False},
        },
        ["a", "b"],
    ),
    (
        {
            "kind": "keyword_score",
            "params": {"text_column": "plot", "keywords": ["gun", "chase"], "into": "s", "sep": " ; "},
        },
        ["t"],
    ),
    (
        {
            "kind": "numeric_score",
            "params": {"column": "year", "low": 1990, "high": 2020, "into": "s", "direction": "ascending"},
        },
        ["t"],
    ),
    (
        {
            "kind": "numeric_score",
            "params": {"column": "rank", "low": 1, "high": 10, "into": "s", "direction": "descending"},
        },
        ["t"],
    ),
    (
        {"kind": "combine_scores", "params": {"columns": ["a", "b"], "weights": [0.7, 0.3], "into": "s"}},
        ["t"],
    ),
    (
        {"kind": "sort_rank", "params": {"by": ["s", "year"], "descending": [True, False], "rank_into": "rank", "limit": 4}},
        ["t"],
    ),
    (
        {
            "kind": "group_aggregate",
            "params": {
                "group_by": ["g"],
                "aggregations": [
                    {"fn": "count", "column": "*", "into": "n"},
                    {"fn": "concat", "column": "v", "into": "vs"},
                ],
            },
        },
        ["t"],
    ),
    (
        {
            "kind": "populate_view",
            "params": {
                "json_column": "raw",
                "items_field": "entities",
                "fields": [["eid", "int64"], ["cid", "text"]],
                "copy": ["did"],
            },
        },
        ["t"],
    ),
]


class TestDescriptionGrammar:
    @pytest.mark.parametrize(
        "body,inputs",
        CANONICAL_BODIES,
        ids=[f"{b['kind']}-{i}" for i, (b, _) in enumerate(CANONICAL_BODIES)],
    )
    def test_render_then_parse_is_identity(self, body, inputs):
        text = render_description(body["kind"], body["params"], inputs)
        assert parse_description(text, round_no=2) == body

    def test_pipeline_chains_round_trip(self):
        first = {"kind": "numeric_score", "params": {"column": "y", "low": 0, "high": 9, "into": "s", "direction": "ascending"}}
        second = {"kind": "filter", "params": {"column": "s", "op": ">", "value": 0.5}}
        text = (
            render_description("numeric_score", first["params"], ["t"])
            + " Then: "
            + render_description("filter", second["params"], ["t"])
        )
        assert parse_description(text, round_no=2) == {"kind": "pipeline", "steps": [first, second]}

    def test_non_grammar_text_parses_to_none(self):
        assert parse_description("Fetch me a coffee.") is None

    def test_first_draft_misreads_score_direction(self):
        text = render_description(
            "numeric_score",
            {"column": "year", "low": 1990, "high": 2020, "into": "s", "direction": "ascending"},
            ["t"],
        )
        draft = parse_description(text, round_no=1)
        assert draft["params"]["direction"] == "descending"
        fixed = parse_description(text, round_no=2)
        assert fixed["params"]["direction"] == "ascending"

    def test_hints_patch_parsed_params(self):
        text = render_description(
            "numeric_score",
            {"column": "year", "low": 1990, "high": 2020, "into": "s", "direction": "ascending"},
            ["t"],
        )
        body = parse_description(text, round_no=1, hint="please set direction=ascending")
        assert body["params"]["direction"] == "ascending"

    def test_hints_reach_pipeline_steps(self):
        text = (
            "Score year over the range 1990 to 2020 into s; higher values mean higher scores."
            " Then: Keep rows where s > 0.5."
        )
        body = parse_description(text, round_no=1, hint="set direction=ascending")
        assert body["steps"][0]["params"]["direction"] == "ascending"


class TestQueryReview:
    def test_asks_about_the_ambiguous_term(self, provider):
        payload = review(provider, [])
        assert payload["action"] == "ask"
        assert payload["term"] == "exciting"
        assert "exciting" in payload["question"]

    def test_quoted_terms_become_assumptions_not_questions(self, provider):
        payload = review(provider, [])
        assert any("'boring'" in a for a in payload["assumptions"])

    def test_forwards_once_clarified(self, provider):
        payload = review(provider, clarified(provider))
        assert payload["action"] == "forward"
        assert payload["term"] is None

    def test_round_budget_forwards_with_assumptions(self, provider):
        payload = provider.run(
            request(
                "review_query",
                {
                    "query": QUERY,
                    "clarifications": [],
                    "lexicon": list(EngineConfig().ambiguity_lexicon),
                    "ask_about_quoted": False,
                    "max_rounds": 0,
                },
            )
        ).payload
        assert payload["action"] == "forward"
        assert any("exciting" in a for a in payload["assumptions"])


class TestSketching:
    def sketch(self, provider, clarifications, preferences=()):
        return provider.run(
            request(
                "generate_sketch",
                {
                    "query": QUERY,
                    "clarifications": clarifications,
                    "catalog": CATALOG,
                    "preferences": list(preferences),
                },
            )
        ).payload["steps"]

    def test_initial_sketch_has_eight_steps(self, provider):
        steps = self.sketch(provider, clarified(provider))
        assert len(steps) == 8
        assert any("keyword" in s.lower() for s in steps)

    def test_correction_grows_the_sketch(self, provider):
        clar = clarified(provider)
        steps = self.sketch(provider, clar)
        corrected = provider.run(
            request(
                "correct_sketch",
                {
                    "query": QUERY,
                    "clarifications": clar,
                    "catalog": CATALOG,
                    "steps": steps,
                    "feedback": "I prefer more recent movies when scoring",
                    "preferences": [],
                },
            )
        ).payload["steps"]
        assert len(corrected) == 11
        assert any("recen" in s.lower() or "year" in s.lower() for s in corrected)

    def test_unrelated_feedback_is_appended_as_a_note(self, provider):
        clar = clarified(provider)
        steps = self.sketch(provider, clar)
        corrected = provider.run(
            request(
                "correct_sketch",
                {
                    "query": QUERY,
                    "clarifications": clar,
                    "catalog": CATALOG,
                    "steps": steps,
                    "feedback": "Nice work.",
                    "preferences": [],
                },
            )
        ).payload["steps"]
        assert corrected[:-1] == steps
        assert "Nice work." in corrected[-1]


class TestPlanning:
    def drive(self, provider, hints):
        clar = clarified(provider)
        steps = provider.run(
            request(
                "correct_sketch",
                {
                    "query": QUERY,
                    "clarifications": clar,
                    "catalog": CATALOG,
                    "steps": TestSketching().sketch(provider, clar),
                    "feedback": "I prefer more recent movies when scoring",
                    "preferences": [],
                },
            )
        ).payload["steps"]
        draft = provider.run(
            request(
                "write_plan",
                {
                    "query": QUERY,
                    "steps": steps,
                    "clarifications": clar,
                    "catalog": CATALOG,
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
                    "catalog": CATALOG,
                },
            )
        ).payload
        return draft, verdict

    def test_without_join_hints_the_verifier_asks_for_info(self, provider):
        _, verdict = self.drive(provider, {})
        assert verdict["verdict"] == "NEED_INFO"
        assert verdict["needs"]

    def test_with_join_hints_the_plan_is_approved(self, provider):
        draft, verdict = self.drive(provider, JOIN_HINTS)
        assert verdict["verdict"] == "APPROVE", verdict
        assert len(draft["nodes"]) == 10
        names = [n["name"] for n in draft["nodes"]]
        assert "gen_recency_score" in names and "rank_films" in names

    def test_every_sketch_step_is_covered(self, provider):
        draft, _ = self.drive(provider, JOIN_HINTS)
        covered = {int(k) for k in draft["coverage"]}
        assert covered == set(range(1, 12))


class TestCoderAndCritic:
    def signature(self, description):
        return {
            "name": "gen_recency_score",
            "inputs": ["scored"],
            "output": {
                "name": "with_recency",
                "columns": [["title", "text"], ["year", "int64"], ["recency", "float64"]],
            },
            "description": description,
        }

    def test_code_node_inverts_the_description(self, provider):
        sig = self.signature(
            "Score year over the range 1990 to 2020 into recency; higher values mean higher scores."
        )
        payload = provider.run(request("code_node", {"signature": sig, "round": 1})).payload
        assert payload["body"]["kind"] == "numeric_score"

    def test_unparseable_description_returns_no_body(self, provider):
        sig = self.signature("Do something vaguely useful.")
        payload = provider.run(request("code_node", {"signature": sig, "round": 1})).payload
        assert payload["body"] is None and payload["note"]

    def test_critic_catches_the_direction_blind_spot(self, provider):
        description = (
            "Score year over the range 1990 to 2020 into recency; higher values mean higher scores."
        )
        sig = self.signature(description)
        input_wire = [[["title", "text"], ["year", "int64"]]]
        draft = provider.run(request("code_node", {"signature": sig, "round": 1})).payload["body"]
        crit = provider.run(
            request(
                "critique_node",
                {"signature": sig, "body": draft, "input_schemas": input_wire, "sample_outputs": [], "round": 1, "max_rounds": 3},
            )
        ).payload
        assert crit["verdict"] == "HINT"
        assert "direction=ascending" in crit["hint"]
        fixed = provider.run(
            request("code_node", {"signature": sig, "round": 2, "hint": crit["hint"]})
        ).payload["body"]
        assert fixed["params"]["direction"] == "ascending"
        verdict = provider.run(
            request(
                "critique_node",
                {"signature": sig, "body": fixed, "input_schemas": input_wire, "sample_outputs": [], "round": 2, "max_rounds": 3},
            )
        ).payload
        assert verdict["verdict"] == "PASS"

    def test_critic_flags_schema_mismatch(self, provider):
        sig = self.signature(
            "Score year over the range 1990 to 2020 into recency; higher values mean higher scores."
        )
        body = {"kind": "project", "params": {"columns": ["title"]}}
        crit = provider.run(
            request(
                "critique_node",
                {
                    "signature": sig,
                    "body": body,
                    "input_schemas": [[["title", "text"], ["year", "int64"]]],
                    "sample_outputs": [],
                    "round": 1,
                    "max_rounds": 3,
                },
            )
        ).payload
        assert crit["verdict"] == "HINT"
        assert "mismatch" in crit["hint"]


class TestDependencyClassification:
    def test_template_bodies_use_their_kind(self, provider):
        payload = provider.run(
            request("classify_dependency", {"body": {"kind": "sort_rank", "params": {"by": ["x"]}}})
        ).payload
        assert payload["pattern"] == "many_to_many"

    def test_descriptions_fall_back_to_phrasing(self, provider):
        cases = {
            "Expand the json, one row per item of entities.": "one_to_many",
            "Group and aggregate the rows.": "many_to_one",
            "Join the two tables.": "many_to_many",
            "Uppercase one column.": "one_to_one",
        }
        for description, want in cases.items():
            payload = provider.run(
                request("classify_dependency", {"description": description})
            ).payload
            assert payload["pattern"] == want, description


class TestFaultDiagnosis:
    def test_marked_bodies_get_the_marker_removed(self, provider):
        payload = provider.run(
            request(
                "diagnose_fault",
                {
                    "body": {"kind": "external", "fault": [{"at_row": 3}]},
                    "fault": {"message": "RuntimeError: injected", "cursor": 3},
                },
            )
        ).payload
        assert payload["action"] == "remove_fault"

    def test_format_faults_get_normalization_patch(self, provider):
        payload = provider.run(
            request(
                "diagnose_fault",
                {
                    "body": {"kind": "filter", "params": {}},
                    "fault": {"message": "unsupported image format '.heic' in 'a.heic'", "cursor": 2},
                },
            )
        ).payload
        assert payload["action"] == "patch_params"
        assert payload["set"] == {"normalize_formats": True}

    def test_unknown_faults_give_up(self, provider):
        payload = provider.run(
            request(
                "diagnose_fault",
                {"body": {"kind": "filter", "params": {}}, "fault": {"message": "KeyError: boom"}},
            )
        ).payload
        assert payload["action"] == "give_up"


class TestQuestionRouting:
    def classify(self, provider, question, **extra):
        return provider.run(
            request(
                "answer_question",
                {"phase": "classify", "question": question, "known_columns": ["final_score"], "known_functions": ["rank_films"], **extra},
            )
        ).payload

    def test_categories(self, provider):
        assert self.classify(provider, "Why is 'Quiet Meadows' not in the result?")["category"] == "why_excluded"
        assert self.classify(provider, "Why is 'Steel Vendetta' ranked first?")["category"] == "why_included"
        assert self.classify(provider, "Which function produced final_score?")["category"] == "which_function"
        assert self.classify(provider, "What changed after the repair?")["category"] == "what_changed"
        assert self.classify(provider, "How is the weather?")["category"] == "unsupported"

    def test_targets_are_extracted(self, provider):
        payload = self.classify(provider, "Which function produced final_score for lid 42?")
        assert payload["target"]["lid"] == 42
        assert payload["target"]["column"] == "final_score"
        payload = self.classify(provider, "Why is 'Glass Garden' not included?")
        assert payload["target"]["value"] == "Glass Garden"

    def test_compose_phase_joins_facts(self, provider):
        payload = provider.run(
            request(
                "answer_question",
                {
                    "category": "why_excluded",
                    "facts": {"sentences": ["It was filtered.", "The flag was true."]},
                },
            )
        ).payload
        assert payload["answer"].startswith("Why this value is missing")
        assert "It was filtered." in payload["answer"]


class _StubProvider:
    """Returns a canned payload for any task; optionally slow or failing."""

    def __init__(self, payload=None, delay=0.0, exc=None):
        self.payload = payload if payload is not None else {"action": "forward", "question": None, "term": None, "assumptions": []}
        self.delay = delay
        self.exc = exc

    def run(self, req):
        if self.delay:
            time.sleep(self.delay)
        if self.exc is not None:
            raise self.exc
        return SynthesisResponse(payload=self.payload, usage={})


def external_config(endpoint, **overrides):
    base = dict(provider="external", endpoint=endpoint, timeout_s=5.0, inflight_limit=2)
    base.update(overrides)
    return EngineConfig(**base)


class TestExternalTransport:
    def test_external_provider_matches_direct_calls(self, config):
        direct = DeterministicProvider(config)
        with MockSynthesisService(DeterministicProvider(config)) as service:
            client = ExternalProvider(external_config(service.endpoint))
            try:
                for task, ctx in (
                    ("review_query", {"query": QUERY, "clarifications": [], "lexicon": list(config.ambiguity_lexicon), "ask_about_quoted": False, "max_rounds": 3}),
                    ("generate_sketch", {"query": QUERY, "clarifications": clarified(direct), "catalog": CATALOG, "preferences": []}),
                ):
                    assert client.run(request(task, ctx)).payload == direct.run(request(task, ctx)).payload
                assert service.calls == 2
                assert client.usage.snapshot()["calls"] == 2
            finally:
                client.close()

    def test_missing_endpoint_is_a_transport_error(self):
        with pytest.raises(TransportError):
            ExternalProvider(EngineConfig(provider="external", endpoint=""))

    def test_bad_token_raises_auth_error(self):
        with MockSynthesisService(_StubProvider(), token="sesame") as service:
            client = ExternalProvider(external_config(service.endpoint, auth_token="wrong"))
            try:
                with pytest.raises(AuthError):
                    client.run(request("review_query", {"query": "x"}))
            finally:
                client.close()

    def test_good_token_is_accepted(self):
        with MockSynthesisService(_StubProvider(), token="sesame") as service:
            client = ExternalProvider(external_config(service.endpoint, auth_token="sesame"))
            try:
                payload = client.run(request("review_query", {"query": "x"})).payload
                assert payload["action"] == "forward"
            finally:
                client.close()

    def test_service_crash_raises_transport_error(self):
        with MockSynthesisService(_StubProvider(exc=RuntimeError("boom"))) as service:
            client = ExternalProvider(external_config(service.endpoint))
            try:
                with pytest.raises(TransportError, match="500"):
                    client.run(request("review_query", {"query": "x"}))
            finally:
                client.close()

    def test_slow_service_raises_provider_timeout(self):
        with MockSynthesisService(_StubProvider(delay=3.0)) as service:
            client = ExternalProvider(external_config(service.endpoint, timeout_s=0.3))
            try:
                with pytest.raises(ProviderTimeout):
                    client.run(request("review_query", {"query": "x"}))
            finally:
                client.close()

    def test_connection_refused_raises_transport_error(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        client = ExternalProvider(external_config(f"http://127.0.0.1:{port}"))
        try:
            with pytest.raises(TransportError):
                client.run(request("review_query", {"query": "x"}))
        finally:
            client.close()

    def test_malformed_payload_fails_client_side_validation(self):
        with MockSynthesisService(_StubProvider(payload={"nonsense": True})) as service:
            client = ExternalProvider(external_config(service.endpoint))
            try:
                with pytest.raises(SchemaViolation):
                    client.run(request("review_query", {"query": "x"}))
            finally:
                client.close()
