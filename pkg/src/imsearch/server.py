"""HTTP/1.1 + JSON wire protocol over the search engine.

POST /search  {"image_b64"|"vector", "page_size", "request_id"?}
              -> {"request_id", "items": [{"product_id", "score", "rank"}],
                  "timings"}
POST /event   {"request_id", "kind", "product_id"} -> {"ok": true}
GET  /healthz -> {"status", "index_counts"}

Images travel as base64-encoded row-major float64 pixels plus an
"image_shape" field (defaults to the model's input size).
"""

from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .engine import SearchEngine, SearchRequest, new_request_id


def encode_image_b64(image: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(image, dtype=np.float64).tobytes()).decode("ascii")


def decode_image_b64(payload: str, shape: tuple[int, int]) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    expected = 8 * shape[0] * shape[1]
    if len(raw) != expected:
        raise ValueError(f"image payload is {len(raw)} bytes, "
                         f"expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def engine(self) -> SearchEngine:
        return self.server.engine

    def log_message(self, fmt, *args):   # requests go to the activity log instead
        pass

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        body = json.loads(raw)
        if not isinstance(body, dict):
            raise ValueError("request body must be a JSON object")
        return body

    def do_GET(self):
        if self.path != "/healthz":
            self._reply(404, {"error": f"unknown path {self.path}"})
            return
        self._reply(200, {"status": "ok",
                          "index_counts": self.engine.index_counts()})

    def do_POST(self):
        if self.path == "/search":
            self._search()
        elif self.path == "/event":
            self._event()
        else:
            self._reply(404, {"error": f"unknown path {self.path}"})

    def _search(self):
        request_id = new_request_id()
        try:
            body = self._read_json()
            request_id = str(body.get("request_id", request_id))
            size = self.engine.model.cfg.image_size
            image = vector = None
            if "image_b64" in body:
                shape = tuple(body.get("image_shape", (size, size)))
                image = decode_image_b64(body["image_b64"], shape)
            if "vector" in body:
                vector = np.asarray(body["vector"], dtype=np.float64)
            request = SearchRequest(request_id, image=image, vector=vector,
                                    page_size=int(body.get("page_size", 10)))
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            self.engine.log.append("request", request_id, error=str(exc))
            self._reply(400, {"error": str(exc), "request_id": request_id})
            return
        response = self.engine.handle_search(request)
        self._reply(200, {
            "request_id": response.request_id,
            "items": [{"product_id": item.product_id, "score": item.score,
                       "rank": item.rank} for item in response.items],
            "timings": response.timings,
        })

    def _event(self):
        try:
            body = self._read_json()
            self.engine.handle_event(str(body["request_id"]), str(body["kind"]),
                                     str(body["product_id"]))
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            self._reply(400, {"error": str(exc)})
            return
        self._reply(200, {"ok": True})


def make_server(engine: SearchEngine, host: str = "127.0.0.1",
                port: int = 0) -> ThreadingHTTPServer:
    """Bind the HTTP server (port 0 picks a free port); caller runs it."""
    server = ThreadingHTTPServer((host, port), _Handler)
    server.engine = engine
    return server


def start_in_thread(engine: SearchEngine,
                    host: str = "127.0.0.1") -> tuple[ThreadingHTTPServer, threading.Thread]:
    server = make_server(engine, host=host, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
