"""Query intake: ambiguity review, clarification rounds, and sketch drafting.

The sketcher owns the conversation before planning. A query is first reviewed
for subjective terms; each flagged term produces one clarification question.
Once the review forwards the query, a numbered step sketch is drafted for the
user, who may request corrections (each correction is kept as a new sketch
version) or approve it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .backend.base import request
from .errors import InvalidState

logger = logging.getLogger(__name__)


@dataclass
class SketchVersion:
    """One drafted sketch; corrections append new versions."""

    version: int
    steps: list[str]
    feedback: str | None = None

    def to_json(self) -> dict:
        return {"version": self.version, "steps": list(self.steps), "feedback": self.feedback}


@dataclass
class Sketcher:
    provider: object
    config: object
    catalog: dict
    query: str | None = None
    clarifications: list[dict] = field(default_factory=list)
    assumptions: list[str] = field(default_factory=list)
    preferences: list[str] = field(default_factory=list)
    sketches: list[SketchVersion] = field(default_factory=list)
    approved: bool = False
    _pending_question: str | None = None
    _pending_term: str | None = None

    def submit_query(self, query: str) -> dict:
        if self.query is not None:
            raise InvalidState("active", "submit_query")
        self.query = query
        return self._review()

    def answer_clarification(self, answer: str) -> dict:
        if self._pending_question is None:
            raise InvalidState("not clarifying", "answer_clarification")
        self.clarifications.append(
            {"term": self._pending_term, "question": self._pending_question, "answer": answer}
        )
        self._pending_question = None
        self._pending_term = None
        return self._review()

    def revise_sketch(self, feedback: str) -> dict:
        if not self.sketches or self.approved:
            raise InvalidState("no open sketch", "revise_sketch")
        current = self.sketches[-1]
        response = self.provider.run(
            request(
                "correct_sketch",
                {
                    "query": self.query,
                    "clarifications": self.clarifications,
                    "catalog": self.catalog,
                    "steps": current.steps,
                    "feedback": feedback,
                    "preferences": self.preferences,
                },
            )
        )
        self.preferences.append(feedback)
        version = SketchVersion(
            version=len(self.sketches) + 1,
            steps=response.payload["steps"],
            feedback=feedback,
        )
        self.sketches.append(version)
        logger.info("sketch revised to version %d (%d steps)", version.version, len(version.steps))
        return self._sketch_payload()

    def approve_sketch(self) -> list[str]:
        if not self.sketches or self.approved:
            raise InvalidState("no open sketch", "approve_sketch")
        self.approved = True
        return list(self.sketches[-1].steps)

    # -- internals -------------------------------------------------------------

    def _review(self) -> dict:
        response = self.provider.run(
            request(
                "review_query",
                {
                    "query": self.query,
                    "clarifications": self.clarifications,
                    "lexicon": list(self.config.ambiguity_lexicon),
                    "ask_about_quoted": self.config.ask_about_quoted,
                    "max_rounds": self.config.max_clarification_rounds,
                },
            )
        )
        payload = response.payload
        for note in payload.get("assumptions", []):
            if note not in self.assumptions:
                self.assumptions.append(note)
        if payload["action"] == "ask":
            self._pending_question = payload["question"]
            self._pending_term = payload["term"]
            return {
                "status": "clarify",
                "question": payload["question"],
                "term": payload["term"],
                "round": len(self.clarifications) + 1,
            }
        return self._draft_sketch()

    def _draft_sketch(self) -> dict:
        response = self.provider.run(
            request(
                "generate_sketch",
                {
                    "query": self.query,
                    "clarifications": self.clarifications,
                    "catalog": self.catalog,
                    "preferences": self.preferences,
                },
            )
        )
        version = SketchVersion(version=len(self.sketches) + 1, steps=response.payload["steps"])
        self.sketches.append(version)
        logger.info("sketch drafted, version %d (%d steps)", version.version, len(version.steps))
        return self._sketch_payload()

    def _sketch_payload(self) -> dict:
        current = self.sketches[-1]
        return {
            "status": "sketch",
            "version": current.version,
            "steps": list(current.steps),
            "assumptions": list(self.assumptions),
        }
