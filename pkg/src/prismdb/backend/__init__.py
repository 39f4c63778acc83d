"""Pluggable synthesis backends.

Semantic work (query review, sketching, planning, code synthesis, critique,
fault diagnosis, question answering) is delegated to a provider behind one
request/response protocol. The bundled deterministic provider implements
every task with rules and templates; the external provider forwards requests
to a JSON-over-HTTP service with the same contract, and the bundled mock
service exposes the deterministic provider over that wire format.
"""

from .base import (
    FORMAT_SCHEMAS,
    TASKS,
    SynthesisRequest,
    SynthesisResponse,
    UsageMeter,
    make_provider,
    validate_payload,
)
from .deterministic import DeterministicProvider
from .external import ExternalProvider
from .mockservice import MockSynthesisService

__all__ = [
    "DeterministicProvider",
    "ExternalProvider",
    "FORMAT_SCHEMAS",
    "MockSynthesisService",
    "SynthesisRequest",
    "SynthesisResponse",
    "TASKS",
    "UsageMeter",
    "make_provider",
    "validate_payload",
]
