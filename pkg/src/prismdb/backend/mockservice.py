"""In-process HTTP service exposing a synthesis provider.

Wraps any provider (by default the deterministic one) behind the same wire
protocol the external client speaks, so the full engine can be exercised
against a real HTTP boundary inside one test process.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..errors import SchemaViolation
from .base import SynthesisRequest

logger = logging.getLogger(__name__)


class MockSynthesisService:
    """Serves POST /synthesize on a local ephemeral port."""

    def __init__(self, provider=None, token: str | None = None):
        if provider is None:
            from .deterministic import DeterministicProvider

            provider = DeterministicProvider()
        self.provider = provider
        self.token = token
        self.calls = 0
        self._lock = threading.Lock()
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug("mock synthesis: " + fmt, *args)

            def do_POST(self):
                if self.path.rstrip("/") != "/synthesize":
                    self._reply(404, {"error": "unknown path"})
                    return
                if service.token is not None:
                    header = self.headers.get("Authorization", "")
                    if header != f"Bearer {service.token}":
                        self._reply(401, {"error": "bad token"})
                        return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    body = json.loads(self.rfile.read(length) or b"{}")
                    request = SynthesisRequest(
                        task=body["task"],
                        context=body.get("context", {}),
                        format_schema=body.get("format_schema", {}),
                    )
                    response = service.provider.run(request)
                except SchemaViolation as exc:
                    self._reply(422, {"error": str(exc)})
                    return
                except Exception as exc:
                    self._reply(500, {"error": str(exc)})
                    return
                with service._lock:
                    service.calls += 1
                self._reply(200, {"payload": response.payload, "usage": response.usage})

            def _reply(self, status, obj):
                data = json.dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockSynthesisService":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockSynthesisService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
