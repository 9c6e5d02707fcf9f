"""Minimal HTTP routing service over a loaded checkpoint.

POST /route  {"embedding": [floats]} -> routing decision plus latency_ms
GET  /healthz -> catalog hash and model config

Requests are served against read-only parameters; handlers never mutate
model state, so concurrent requests are safe.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .training import Checkpoint

log = logging.getLogger("radialrouter.service")


class RoutingService:
    def __init__(self, checkpoint: Checkpoint):
        self.params = checkpoint.params
        self.catalog = checkpoint.catalog
        self.config = checkpoint.config
        self.catalog_hash = checkpoint.catalog.content_hash()

    def health(self) -> dict:
        return {"status": "ok",
                "catalog_hash": self.catalog_hash,
                "llms": self.catalog.names,
                "model": {"d": self.config.d, "layers": self.config.layers,
                          "heads": self.config.heads,
                          "d_enc": self.params.d_enc,
                          "backbone": self.config.backbone,
                          "alpha": self.config.alpha}}

    def route(self, embedding: list) -> tuple[int, dict]:
        if not isinstance(embedding, list) or not embedding or \
                not all(isinstance(x, (int, float)) for x in embedding):
            return 400, {"error": "embedding must be a non-empty number array"}
        arr = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
        if not np.isfinite(arr).all():
            return 400, {"error": "embedding contains non-finite values"}
        if arr.shape[1] != self.params.d_enc:
            return 422, {"error": f"embedding has dimension {arr.shape[1]}, "
                                  f"checkpoint expects {self.params.d_enc}"}
        t0 = time.perf_counter()
        decision = self.params.decide(arr, self.catalog)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        body = decision.to_dict()
        body["latency_ms"] = round(latency_ms, 4)
        return 200, body


def make_handler(service: RoutingService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("%s - %s", self.address_string(), fmt % args)

        def _send(self, status: int, body: dict) -> None:
            payload = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, service.health())
            else:
                self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            if self.path != "/route":
                self._send(404, {"error": f"unknown path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                payload = json.loads(raw)
            except (ValueError, json.JSONDecodeError) as e:
                self._send(400, {"error": f"malformed JSON body: {e}"})
                return
            if not isinstance(payload, dict) or "embedding" not in payload:
                self._send(400, {"error": "body must be {\"embedding\": [...]}"})
                return
            status, body = service.route(payload["embedding"])
            self._send(status, body)

    return Handler


class _Httpd(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128  # default backlog of 5 drops concurrent bursts


class Server:
    """Threading HTTP server wrapper; use as a context manager in tests."""

    def __init__(self, checkpoint: Checkpoint, host: str = "127.0.0.1",
                 port: int = 0):
        self.service = RoutingService(checkpoint)
        self.httpd = _Httpd((host, port), make_handler(self.service))

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def serve_forever(self):
        host, port = self.address
        log.info("serving on http://%s:%d", host, port)
        self.httpd.serve_forever()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self) -> "Server":
        self.start_background()
        return self

    def __exit__(self, *exc):
        self.shutdown()
