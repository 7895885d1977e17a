"""Deterministic stand-in for a local model server, for offline runs and tests.

Serves ``/api/generate``, ``/api/embeddings`` and ``/score``. Every request
is appended to ``requests`` so tests can inspect ordering and payloads.
"""
from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .retrieval import HashingEmbedder

_CONTEXT_RX = re.compile(r"Patient information: (.*)\.\s*\Z", re.DOTALL)
_WORDS_RX = re.compile(r"(?:should be|around) (\d+)")


@dataclass
class StubOptions:
    fail_first: int = 0
    fail_status: int = 503
    empty: bool = False
    canned: dict[str, str] = field(default_factory=dict)
    score: float = 0.5
    echo_words: int = 40


def _task_of(prompt: str) -> str:
    return "DI" if "DI Instructions:" in prompt else "BHC"


def echo_completion(prompt: str, max_words: int = 40) -> str:
    """Canned completion built from the first words of the prompt's context."""
    m = _CONTEXT_RX.search(prompt)
    context = m.group(1) if m else prompt
    wm = _WORDS_RX.search(prompt)
    n = min(max_words, int(wm.group(1))) if wm else max_words
    words = " ".join(context.split()[:n])
    if _task_of(prompt) == "BHC":
        return f"Brief hospital course:\n# Introduction\n{words}\n# Active Issues\n- {words[:80]}"
    return f"Dear ___,\n\nYou were admitted to the hospital. {words}\n\nWe wish you the best!\nYour ___ Team"


class _Handler(BaseHTTPRequestHandler):
    server: "_Server"

    def log_message(self, *args):  # keep test output quiet
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw or b"{}")
        except ValueError:
            self._send(400, {"error": "invalid JSON"})
            return
        stub = self.server.stub
        with stub.lock:
            stub.requests.append((self.path, body))
            if self.path == "/api/generate":
                stub.generate_calls += 1
                failing = stub.generate_calls <= stub.options.fail_first
            else:
                failing = False
        if failing:
            self._send(stub.options.fail_status, {"error": "injected failure"})
            return
        if self.path == "/api/generate":
            prompt = body.get("prompt")
            if not isinstance(prompt, str) or body.get("stream") is not False or "model" not in body:
                self._send(400, {"error": "expected {model, prompt, stream: false, options}"})
                return
            if stub.options.empty:
                text = ""
            else:
                task = _task_of(prompt)
                text = stub.options.canned.get(task) or echo_completion(prompt, stub.options.echo_words)
            self._send(200, {"model": body["model"], "response": text, "done": True})
        elif self.path == "/api/embeddings":
            prompt = body.get("prompt")
            if not isinstance(prompt, str):
                self._send(400, {"error": "expected {model, prompt}"})
                return
            self._send(200, {"embedding": [float(x) for x in stub.embedder.embed(prompt)]})
        elif self.path == "/score":
            self._send(200, {"score": stub.options.score})
        else:
            self._send(404, {"error": f"no route {self.path}"})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    stub: "StubServer"


class StubServer:
    """Run with ``with StubServer() as s: ... s.url ...``."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, options: StubOptions | None = None):
        self.options = options or StubOptions()
        self.embedder = HashingEmbedder()
        self.requests: list[tuple[str, dict]] = []
        self.generate_calls = 0
        self.lock = threading.Lock()
        self._httpd = _Server((host, port), _Handler)
        self._httpd.stub = self
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
