"""Clarification and sketch-drafting flow ahead of planning."""

import pytest

from prismdb.backend import DeterministicProvider
from prismdb.config import EngineConfig
from prismdb.demo import DEMO_CLARIFICATION_ANSWER, DEMO_QUERY, load_demo_store
from prismdb.errors import InvalidState
from prismdb.sketcher import Sketcher


def fresh_sketcher(catalog=None, **config_overrides):
    config = EngineConfig(**config_overrides)
    provider = DeterministicProvider(config)
    catalog = catalog if catalog is not None else load_demo_store().catalog()
    return Sketcher(provider=provider, config=config, catalog=catalog)


class TestClarificationFlow:
    def test_ambiguous_query_asks_one_question(self):
        sk = fresh_sketcher()
        first = sk.submit_query(DEMO_QUERY)
        assert first["status"] == "clarify"
        assert first["term"] == "exciting"
        assert first["round"] == 1

    def test_answer_produces_a_sketch(self):
        sk = fresh_sketcher()
        sk.submit_query(DEMO_QUERY)
        second = sk.answer_clarification(DEMO_CLARIFICATION_ANSWER)
        assert second["status"] == "sketch"
        assert second["version"] == 1
        assert len(second["steps"]) == 8
        assert sk.clarifications[0]["term"] == "exciting"
        assert sk.clarifications[0]["answer"] == DEMO_CLARIFICATION_ANSWER

    def test_unambiguous_query_skips_straight_to_sketch(self):
        sk = fresh_sketcher()
        result = sk.submit_query("Sort the movies by release_year.")
        assert result["status"] == "sketch"

    def test_quoted_label_recorded_as_assumption(self):
        sk = fresh_sketcher()
        sk.submit_query(DEMO_QUERY)
        result = sk.answer_clarification(DEMO_CLARIFICATION_ANSWER)
        assert any("'boring'" in a for a in result["assumptions"])

    def test_ask_about_quoted_questions_the_label_too(self):
        sk = fresh_sketcher(ask_about_quoted=True)
        first = sk.submit_query(DEMO_QUERY)
        assert first["status"] == "clarify"
        second = sk.answer_clarification(DEMO_CLARIFICATION_ANSWER)
        assert second["status"] == "clarify"
        assert second["term"] == "boring"

    def test_clarification_round_budget(self):
        sk = fresh_sketcher(max_clarification_rounds=0)
        result = sk.submit_query(DEMO_QUERY)
        assert result["status"] == "sketch"
        assert any("generic reading" in a for a in sk.assumptions)


class TestSketchRevisions:
    def approved_base(self):
        sk = fresh_sketcher()
        sk.submit_query(DEMO_QUERY)
        sk.answer_clarification(DEMO_CLARIFICATION_ANSWER)
        return sk

    def test_revision_appends_a_version(self):
        sk = self.approved_base()
        result = sk.revise_sketch("I prefer more recent movies when scoring")
        assert result["version"] == 2
        assert len(result["steps"]) == 11
        assert len(sk.sketches) == 2
        assert sk.sketches[1].feedback == "I prefer more recent movies when scoring"

    def test_feedback_becomes_a_sticky_preference(self):
        sk = self.approved_base()
        sk.revise_sketch("I prefer more recent movies when scoring")
        assert sk.preferences == ["I prefer more recent movies when scoring"]

    def test_approve_freezes_the_latest_version(self):
        sk = self.approved_base()
        sk.revise_sketch("I prefer more recent movies when scoring")
        steps = sk.approve_sketch()
        assert steps == sk.sketches[-1].steps
        assert sk.approved

    def test_sketch_version_serializes(self):
        sk = self.approved_base()
        wire = sk.sketches[0].to_json()
        assert wire["version"] == 1 and len(wire["steps"]) == 8


class TestStateGuards:
    def test_double_submit_rejected(self):
        sk = fresh_sketcher()
        sk.submit_query(DEMO_QUERY)
        with pytest.raises(InvalidState):
            sk.submit_query("another query")

    def test_answer_without_question_rejected(self):
        sk = fresh_sketcher()
        with pytest.raises(InvalidState):
            sk.answer_clarification("nothing was asked")

    def test_revise_before_sketch_rejected(self):
        sk = fresh_sketcher()
        with pytest.raises(InvalidState):
            sk.revise_sketch("too early")

    def test_approve_before_sketch_rejected(self):
        sk = fresh_sketcher()
        with pytest.raises(InvalidState):
            sk.approve_sketch()

    def test_no_edits_after_approval(self):
        sk = fresh_sketcher()
        sk.submit_query(DEMO_QUERY)
        sk.answer_clarification(DEMO_CLARIFICATION_ANSWER)
        sk.approve_sketch()
        with pytest.raises(InvalidState):
            sk.revise_sketch("late feedback")
        with pytest.raises(InvalidState):
            sk.approve_sketch()
