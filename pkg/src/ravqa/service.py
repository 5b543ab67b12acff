"""JSON HTTP API over the annotation store, on the standard library only.

Routes (all JSON in and out, CORS open for the review frontend):

    GET  /api/health                    liveness and record count
    GET  /api/queue[?state=...]         records, optionally filtered by state
    GET  /api/records/{id}              one record
    GET  /api/conflicts                 cross-record answer inconsistencies
    POST /api/records/{id}/generate     {expected_version}
    POST /api/records/{id}/verdict      {expected_version, accurate, relevant, complete, note?}
    POST /api/records/{id}/expert       {expected_version, rationale}
    POST /api/export                    {mode: "strict" | "permissive"}

Error mapping: malformed input 400, unknown record or route 404, stale
version or illegal transition 409, upstream generator failure 502, missing
generator 503. Conflict responses carry the current record so a client can
refresh instead of guessing.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from . import data as dat
from .annotate import (
    AnnotationStore,
    GeneratorClient,
    RecordState,
    ReviewVerdict,
    detect_inconsistencies,
)
from .errors import (
    ContractViolation,
    DataError,
    TransitionError,
    TransportError,
    VersionConflictError,
)


class _BadRequest(Exception):
    """Client-side input problem; message goes into the 400 body."""


def _sample_json(sample: dat.VqaSample) -> dict:
    return asdict(sample)


class AnnotationServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, store: AnnotationStore, client: GeneratorClient | None):
        super().__init__(address, _Handler)
        self.store = store
        self.generator = client

    @property
    def port(self) -> int:
        return self.server_address[1]


class _Handler(BaseHTTPRequestHandler):
    server: AnnotationServer

    # Quiet by default; the CLI announces the address once instead.
    def log_message(self, format, *args):
        pass

    # -- plumbing ------------------------------------------------------------

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send(self, code: int, payload: dict | list) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self._cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str, **extra) -> None:
        self._send(code, {"error": message, **extra})

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise _BadRequest("request body must be JSON")
        try:
            parsed = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise _BadRequest(f"unreadable JSON body: {exc}") from exc
        if not isinstance(parsed, dict):
            raise _BadRequest("JSON body must be an object")
        return parsed

    @staticmethod
    def _expected_version(body: dict) -> int:
        value = body.get("expected_version")
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise _BadRequest("expected_version must be a positive integer")
        return value

    @staticmethod
    def _flag(body: dict, key: str) -> bool:
        value = body.get(key)
        if not isinstance(value, bool):
            raise _BadRequest(f"{key} must be true or false")
        return value

    # -- verbs ---------------------------------------------------------------

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.end_headers()

    def do_GET(self):
        try:
            self._route_get()
        except _BadRequest as exc:
            self._error(400, str(exc))
        except DataError as exc:
            self._error(404, str(exc))
        except Exception as exc:  # last resort: never leak a traceback as HTML
            self._error(500, f"internal error: {exc}")

    def do_POST(self):
        try:
            self._route_post()
        except _BadRequest as exc:
            self._error(400, str(exc))
        except VersionConflictError as exc:
            record = self.server.store.get(exc.record_id)
            self._error(409, str(exc), kind="version-conflict", record=record.to_json())
        except TransitionError as exc:
            self._error(409, str(exc), kind="transition")
        except TransportError as exc:
            self._error(502, str(exc), kind="transport")
        except ContractViolation as exc:
            self._error(400, str(exc))
        except DataError as exc:
            self._error(404, str(exc))
        except Exception as exc:
            self._error(500, f"internal error: {exc}")

    # -- routing -------------------------------------------------------------

    def _route_get(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if parts == ["api", "health"]:
            self._send(200, {"status": "ok", "records": len(self.server.store)})
            return
        if parts == ["api", "queue"]:
            query = parse_qs(url.query)
            state = query.get("state", [None])[0]
            if state is not None:
                try:
                    RecordState(state)
                except ValueError:
                    known = ", ".join(s.value for s in RecordState)
                    raise _BadRequest(f"unknown state {state!r}; known: {known}") from None
            rows = self.server.store.records(state)
            self._send(200, {"records": [r.to_json() for r in rows]})
            return
        if parts == ["api", "conflicts"]:
            findings = detect_inconsistencies(self.server.store.records())
            self._send(
                200,
                {
                    "conflicts": [
                        {"rule": f.rule, "record_ids": list(f.record_ids), "message": f.message}
                        for f in findings
                    ]
                },
            )
            return
        if len(parts) == 3 and parts[:2] == ["api", "records"]:
            record = self.server.store.get(parts[2])
            self._send(200, record.to_json())
            return
        self._error(404, f"no route for GET {url.path}")

    def _route_post(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        if parts == ["api", "export"]:
            body = self._body()
            mode = body.get("mode")
            if mode not in ("strict", "permissive"):
                raise _BadRequest("mode must be strict or permissive")
            samples = self.server.store.export_annotated(mode)
            self._send(200, {"mode": mode, "samples": [_sample_json(s) for s in samples]})
            return
        if len(parts) == 4 and parts[:2] == ["api", "records"]:
            record_id, action = parts[2], parts[3]
            body = self._body()
            version = self._expected_version(body)
            if action == "generate":
                if self.server.generator is None:
                    self._error(503, "no generator configured on this server")
                    return
                updated = self.server.store.request_generation(record_id, version, self.server.generator)
                self._send(200, updated.to_json())
                return
            if action == "verdict":
                verdict = ReviewVerdict(
                    accurate=self._flag(body, "accurate"),
                    relevant=self._flag(body, "relevant"),
                    complete=self._flag(body, "complete"),
                    note=body.get("note"),
                )
                if verdict.note is not None and not isinstance(verdict.note, str):
                    raise _BadRequest("note must be a string when present")
                updated = self.server.store.record_review(record_id, version, verdict)
                self._send(200, updated.to_json())
                return
            if action == "expert":
                rationale = body.get("rationale")
                if not isinstance(rationale, str) or not rationale.strip():
                    raise _BadRequest("rationale must be a non-empty string")
                updated = self.server.store.submit_expert(record_id, version, rationale)
                self._send(200, updated.to_json())
                return
        self._error(404, f"no route for POST {url.path}")


def seed_demo(store: AnnotationStore, n: int, seed: int = 0) -> int:
    """Fill the store with synthetic samples for demos and frontend work."""
    if n < 1:
        raise ContractViolation(f"demo seeding needs at least 1 record, got {n}")
    return store.add_samples(dat.synth_generate(n, seed=seed))


def make_server(
    store: AnnotationStore,
    client: GeneratorClient | None = None,
    host: str = "127.0.0.1",
    port: int = 0,
) -> AnnotationServer:
    """Bind (port 0 picks a free one); call serve_forever() to run."""
    return AnnotationServer((host, port), store, client)
