"""Exception taxonomy for prismdb.

Every error raised across module boundaries derives from PrismError so callers
(CLI, HTTP server) can map failures to exit codes and status codes uniformly.
"""

from __future__ import annotations

from typing import Any


class PrismError(Exception):
    """Base class for all engine errors."""


# ---------------------------------------------------------------------------
# storage and schema


class InvalidSchema(PrismError):
    pass


class DuplicateName(PrismError):
    pass


class UnknownRelation(PrismError):
    pass


class TypeMismatch(PrismError):
    pass


class KeyViolation(PrismError):
    pass


class MalformedAnnotation(PrismError):
    pass


class DanglingReference(PrismError):
    pass


class SpanOutOfRange(PrismError):
    pass


# ---------------------------------------------------------------------------
# lineage


class UnknownLid(PrismError):
    pass


class UnknownParent(PrismError):
    pass


class PatternMismatch(PrismError):
    """A wide-pattern function attempted row-level lineage, or vice versa."""


# ---------------------------------------------------------------------------
# functions and templates


class DuplicateFunction(PrismError):
    pass


class UnknownFunction(PrismError):
    pass


class UnknownVersion(PrismError):
    pass


class UnresolvableInput(PrismError):
    pass


class TemplateParamError(PrismError):
    pass


class EmptyKeywords(TemplateParamError):
    pass


class RuntimeFault(PrismError):
    """Raised while a function body processes rows.

    Carries enough context for diagnosis: the failing function, version, the
    cursor position (row index in the driving input) and the original cause.
    """

    def __init__(
        self,
        message: str,
        *,
        func_id: str | None = None,
        ver_id: int | None = None,
        cursor: int | None = None,
        sample_row: dict[str, Any] | None = None,
    ):
        super().__init__(message)
        self.message = message
        self.func_id = func_id
        self.ver_id = ver_id
        self.cursor = cursor
        self.sample_row = sample_row

    def context(self) -> dict[str, Any]:
        return {
            "message": self.message,
            "func_id": self.func_id,
            "ver_id": self.ver_id,
            "cursor": self.cursor,
            "sample_row": self.sample_row,
        }


class RepairFailed(PrismError):
    pass


# ---------------------------------------------------------------------------
# planning and synthesis


class SketchRejected(PrismError):
    pass


class PlanningFailed(PrismError):
    def __init__(self, message: str, hints: dict[str, Any] | None = None):
        super().__init__(message)
        self.hints = hints or {}


class SynthesisFailed(PrismError):
    pass


class NoViableImplementation(PrismError):
    pass


class ExecutionAborted(PrismError):
    pass


class InvalidChoice(PrismError):
    pass


# ---------------------------------------------------------------------------
# explanation


class NoExecution(PrismError):
    pass


class UnsupportedQuestion(PrismError):
    pass


# ---------------------------------------------------------------------------
# synthesis backend transport


class ProviderError(PrismError):
    pass


class SchemaViolation(ProviderError):
    """Provider returned a payload that does not match the task's format schema."""


class TransportError(ProviderError):
    pass


class ProviderTimeout(TransportError):
    pass


class AuthError(TransportError):
    pass


class BackendUnavailable(ProviderError):
    pass


# ---------------------------------------------------------------------------
# sessions


class UnknownSession(PrismError):
    pass


class InvalidState(PrismError):
    def __init__(self, state: str, action: str):
        super().__init__(f"action {action!r} is not legal in state {state!r}")
        self.state = state
        self.action = action
