"""HTTP client for a remote synthesis service.

Speaks a one-endpoint protocol: POST the JSON body
``{"task": ..., "context": ..., "format_schema": ...}`` and receive
``{"payload": ..., "usage": ...}``. Responses are validated against the
task's format schema on the client side so a misbehaving service surfaces
as a SchemaViolation rather than a crash deeper in the engine.
"""

from __future__ import annotations

import logging
import threading

import httpx

from ..errors import AuthError, ProviderTimeout, TransportError
from .base import SynthesisRequest, SynthesisResponse, UsageMeter, validate_payload

logger = logging.getLogger(__name__)


class ExternalProvider:
    """Synthesis provider backed by an HTTP endpoint."""

    def __init__(self, config):
        if not config.endpoint:
            raise TransportError("external provider requires an endpoint")
        self.config = config
        self.usage = UsageMeter()
        self._semaphore = threading.BoundedSemaphore(max(1, config.inflight_limit))
        headers = {}
        if config.auth_token:
            headers["Authorization"] = f"Bearer {config.auth_token}"
        self._client = httpx.Client(
            base_url=config.endpoint, headers=headers, timeout=config.timeout_s
        )

    def close(self) -> None:
        self._client.close()

    def run(self, request: SynthesisRequest) -> SynthesisResponse:
        body = request.to_json()
        with self._semaphore:
            try:
                response = self._client.post("/synthesize", json=body)
            except httpx.TimeoutException as exc:
                raise ProviderTimeout(
                    f"synthesis call {request.task!r} timed out after "
                    f"{self.config.timeout_s}s"
                ) from exc
            except httpx.HTTPError as exc:
                raise TransportError(f"synthesis call failed: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(f"synthesis service rejected credentials ({response.status_code})")
        if response.status_code >= 400:
            raise TransportError(
                f"synthesis service returned {response.status_code}: {response.text[:200]}"
            )
        try:
            data = response.json()
        except ValueError as exc:
            raise TransportError("synthesis service returned malformed JSON") from exc
        payload = data.get("payload")
        validate_payload(request.format_schema, payload)
        self.usage.record(request.task)
        logger.debug("external synthesis %s ok", request.task)
        return SynthesisResponse(payload=payload, usage=data.get("usage", {}))
