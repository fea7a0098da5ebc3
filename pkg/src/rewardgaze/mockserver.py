"""In-process mock of the embedding service, for tests and offline demos.

    with MockEmbeddingServer(dim=16) as srv:
        client = EmbeddingClient(srv.url)
        client.embed("visual", "a", [1.0, 2.0])
        srv.requests  # every request received, in arrival order
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import numpy as np


def hashed_embedding(kind: str, sample_id: str, payload, dim: int) -> list[float]:
    """Deterministic pseudo-embedding of a request."""
    key = hashlib.blake2b(json.dumps([kind, sample_id, payload]).encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(key, "little"))
    return rng.normal(size=dim).astype(np.float32).tolist()


class MockEmbeddingServer:
    """Threaded HTTP server answering ``POST /embed``.

    ``fail_first`` makes the first N requests answer ``fail_status``;
    ``responder(kind, id, payload)`` overrides the embedding; ``delay`` sleeps
    before answering (to provoke client timeouts).
    """

    def __init__(self, dim: int = 16, responder: Callable | None = None, fail_first: int = 0,
                 fail_status: int = 503, delay: float = 0.0, dims: dict[str, int] | None = None):
        self.dim = dim
        self.dims = dims or {}
        self.responder = responder
        self.fail_first = fail_first
        self.fail_status = fail_status
        self.delay = delay
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _handle(self, body: dict) -> tuple[int, dict | None]:
        with self._lock:
            n = len(self.requests)
            self.requests.append({"t": time.monotonic(), **body})
        if n < self.fail_first:
            return self.fail_status, None
        if self.delay:
            time.sleep(self.delay)
        kind, sid, payload = body.get("kind"), body.get("id"), body.get("payload")
        if self.responder is not None:
            emb = self.responder(kind, sid, payload)
        else:
            emb = hashed_embedding(kind, sid, payload, self.dims.get(kind, self.dim))
        return 200, {"id": sid, "embedding": list(emb)}

    def start(self) -> "MockEmbeddingServer":
        owner = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                if self.path.rstrip("/") != "/embed":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length).decode("utf-8"))
                except ValueError:
                    self.send_error(400)
                    return
                status, resp = owner._handle(body)
                raw = json.dumps(resp).encode("utf-8") if resp is not None else b"{}"
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def __enter__(self) -> "MockEmbeddingServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
