"""HTTP front end: one server in front of the orchestrator.

Endpoints: ``POST /v1/generate``, ``GET /v1/health`` and ``GET /v1/metrics``.
Waveforms travel as base64 of little-endian int32 samples.
"""

from __future__ import annotations

import base64
import itertools
import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from statistics import fmean
from typing import Any

import numpy as np

from .clock import Clock
from .core import Registry, Request
from .metrics import FinalOutput, IncompleteRecord, jct, ttft
from .orchestrator import DeploymentPlan, Orchestrator, Overloaded, Rejected

log = logging.getLogger(__name__)

_GENERATE_KEYS = {"request_id", "prompt_tokens", "seed", "stream"}


class BadRequest(ValueError):
    pass


def waveform_b64(samples: list[int] | bytes) -> str:
    raw = samples if isinstance(samples, bytes) else np.asarray(samples, dtype="<i4").tobytes()
    return base64.b64encode(raw).decode("ascii")


def decode_waveform(b64: str) -> list[int]:
    return np.frombuffer(base64.b64decode(b64), dtype="<i4").tolist()


def output_body(out: FinalOutput) -> dict[str, Any]:
    return {
        "request_id": out.request_id,
        "text_tokens": out.text_tokens,
        "codec_tokens": out.codec_tokens,
        "waveform_b64": waveform_b64(out.waveform),
        "metrics": out.metrics.to_json() if out.metrics else None,
    }


def error_body(out: FinalOutput) -> dict[str, Any]:
    return {
        "type": "error",
        "request_id": out.request_id,
        "status": out.status,
        "failed_stage": out.failed_stage,
        "error": out.error,
    }


def parse_generate(body: bytes) -> dict[str, Any]:
    try:
        doc = json.loads(body or b"null")
    except json.JSONDecodeError as exc:
        raise BadRequest(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise BadRequest("body must be a JSON object")
    unknown = sorted(set(doc) - _GENERATE_KEYS)
    if unknown:
        raise BadRequest(f"unknown field(s): {', '.join(unknown)}")
    prompt = doc.get("prompt_tokens")
    if not isinstance(prompt, list) or not prompt:
        raise BadRequest("prompt_tokens must be a non-empty list")
    if any(not isinstance(t, int) or isinstance(t, bool) for t in prompt):
        raise BadRequest("prompt_tokens must be integers")
    for key in ("request_id", "seed"):
        v = doc.get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
            raise BadRequest(f"{key} must be an integer")
    if not isinstance(doc.get("stream", False), bool):
        raise BadRequest("stream must be a boolean")
    return doc


class OmniServer:
    """Owns the orchestrator (background mode) and the HTTP listener."""

    def __init__(
        self,
        plan: DeploymentPlan,
        listen: str = "127.0.0.1:8000",
        *,
        registry: Registry | None = None,
        clock: Clock | None = None,
        request_timeout_s: float = 600.0,
    ):
        self.plan = plan
        host, _, port = listen.rpartition(":")
        self.address = (host or "127.0.0.1", int(port))
        self.orch = Orchestrator(plan, registry=registry, clock=clock, background=True)
        self.request_timeout_s = request_timeout_s
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max(1, plan.admission_cap))
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        assert self._httpd is not None
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "OmniServer":
        self.orch.start()
        try:
            self._httpd = ThreadingHTTPServer(self.address, _make_handler(self))
        except OSError:
            self.orch.shutdown(drain=False)
            raise
        self._httpd.daemon_threads = False
        self._httpd.block_on_close = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True, name="omni-http")
        self._thread.start()
        log.info("listening on %s", self.url)
        return self

    def stop(self, drain: bool = True) -> None:
        """Refuse new work, finish or abort in-flight requests, then close."""
        report = self.orch.shutdown(drain=drain)
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        log.info("stopped: drained=%d aborted=%d", report.drained, report.aborted)

    def __enter__(self) -> "OmniServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop(drain=False)

    def next_id(self) -> int:
        with self._id_lock:
            return next(self._ids)

    def submit(self, doc: dict[str, Any]):
        explicit = doc.get("request_id")
        for _ in range(1000):
            rid = explicit if explicit is not None else self.next_id()
            try:
                req = Request(rid, tuple(doc["prompt_tokens"]), seed=doc.get("seed", 0), stream=doc.get("stream", False))
            except ValueError as exc:
                raise BadRequest(str(exc)) from None
            try:
                return self.orch.submit(req)
            except Rejected as exc:
                if explicit is None and "already used" in str(exc):
                    continue
                raise
        raise Rejected("could not allocate a request id")

    def metrics(self) -> dict[str, Any]:
        stats = self.orch.stats()
        with self.orch._lock:
            done = [o for o in self.orch.results.values() if o.ok and o.metrics]
        jcts, ttfts = [], []
        for o in done:
            try:
                jcts.append(jct(o.metrics))
                ttfts.append(ttft(o.metrics))
            except IncompleteRecord:
                pass
        stats["mean_jct_us"] = fmean(jcts) if jcts else None
        stats["mean_ttft_us"] = fmean(ttfts) if ttfts else None
        return stats


def _make_handler(server: OmniServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

        def _json(self, status: int, body: Any) -> None:
            data = json.dumps(body, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self) -> None:
            if self.path == "/v1/health":
                self._json(200, server.orch.health())
            elif self.path == "/v1/metrics":
                self._json(200, server.metrics())
            else:
                self._json(404, {"error": f"no route {self.path}"})

        def do_POST(self) -> None:
            if self.path != "/v1/generate":
                self._json(404, {"error": f"no route {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length)
            if not server._slots.acquire(blocking=False):
                self._json(503, {"error": "too many concurrent requests"})
                return
            try:
                self._generate(body)
            finally:
                server._slots.release()

        def _generate(self, body: bytes) -> None:
            try:
                doc = parse_generate(body)
                handle = server.submit(doc)
            except BadRequest as exc:
                self._json(400, {"error": str(exc)})
                return
            except Overloaded as exc:
                self._json(503, {"error": str(exc)})
                return
            except Rejected as exc:
                status = 409 if "already used" in str(exc) else 503
                self._json(status, {"error": str(exc)})
                return
            if not doc.get("stream", False):
                try:
                    out = handle.collect(timeout=server.request_timeout_s)
                except TimeoutError as exc:
                    self._json(504, {"error": str(exc)})
                    return
                if out.ok:
                    self._json(200, output_body(out))
                else:
                    self._json(500, error_body(out))
                return
            self._stream(handle)

        def _stream(self, handle) -> None:
            self.send_response(HTTPStatus.OK)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Connection", "close")
            self.end_headers()
            self.close_connection = True

            def frame(obj: dict) -> None:
                self.wfile.write(json.dumps(obj, sort_keys=True).encode() + b"\n")
                self.wfile.flush()

            try:
                for chunk in handle.chunks(timeout=server.request_timeout_s):
                    if chunk.payload.nbytes:
                        frame({"type": "waveform_chunk", "seq": chunk.seq,
                               "data_b64": waveform_b64(chunk.payload.data)})
                out = handle.collect(timeout=server.request_timeout_s)
            except Exception as exc:  # timeout or broken pipe
                log.warning("stream for request %d ended early: %s", handle.request_id, exc)
                try:
                    frame({"type": "error", "request_id": handle.request_id, "error": str(exc)})
                except OSError:
                    pass
                return
            if out.ok:
                frame({"type": "done", "request_id": out.request_id,
                       "metrics": out.metrics.to_json() if out.metrics else None})
            else:
                frame(error_body(out))

    return Handler


__all__ = ["BadRequest", "OmniServer", "decode_waveform", "output_body", "parse_generate", "waveform_b64"]
