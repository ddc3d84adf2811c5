"""JSON-over-HTTP sampler protocol: a loopback server wrapping any local
backend, and the client speaking the same wire format.

Endpoints:

* ``POST /program``  body = the program wire document, response
  ``{"format_version": 1, "handle_id": str}``
* ``POST /read``  body ``{"format_version": 1, "handle_id": str,
  "num_reads": int, "seed": int?, "pause": bool?}``, response
  ``{"format_version": 1, "states": [[-1|1, ...], ...],
  "effective_metadata": {...}}``

Transport failures, malformed payloads, wire-version mismatches and stale
handles surface as distinct exception types so callers can react
differently to a dead network and a misbehaving peer.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .annealer import TimingReport, VirtualAnnealer
from .errors import ProtocolError, StaleHandleError, TransportError, VersionMismatchError
from .ising import WIRE_FORMAT_VERSION, IsingProgram, program_from_wire, program_to_wire
from .rbm import SampleBatch


class AnnealerServer:
    """Serves a local backend over the wire protocol (loopback by default).

    Programming is serialized behind a lock; reads run concurrently.
    """

    def __init__(self, backend: VirtualAnnealer, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self._handles: dict[str, object] = {}
        self._program_lock = threading.Lock()
        self._rng = np.random.default_rng()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, code: int, payload: dict) -> None:
                body = json.dumps(payload).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    payload = json.loads(self.rfile.read(length).decode())
                except (ValueError, json.JSONDecodeError):
                    self._reply(400, {"error": "protocol", "detail": "unreadable body"})
                    return
                try:
                    if self.path == "/program":
                        self._reply(200, server._handle_program(payload))
                    elif self.path == "/read":
                        self._reply(200, server._handle_read(payload))
                    else:
                        self._reply(404, {"error": "protocol", "detail": "unknown endpoint"})
                except _WireError as exc:
                    self._reply(exc.code, exc.payload)
                except Exception as exc:  # surface, don't hang the client
                    self._reply(500, {"error": "internal", "detail": str(exc)})

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "AnnealerServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _handle_program(self, payload: dict) -> dict:
        if payload.get("format_version") != WIRE_FORMAT_VERSION:
            raise _WireError(400, {"error": "version_mismatch",
                                   "detail": f"server speaks version {WIRE_FORMAT_VERSION}"})
        try:
            program = program_from_wire(payload)
        except (KeyError, TypeError, ValueError) as exc:
            raise _WireError(400, {"error": "protocol", "detail": str(exc)})
        with self._program_lock:
            handle = self.backend.program(program)
            handle_id = uuid.uuid4().hex
            self._handles[handle_id] = handle
        return {"format_version": WIRE_FORMAT_VERSION, "handle_id": handle_id}

    def _handle_read(self, payload: dict) -> dict:
        if payload.get("format_version") != WIRE_FORMAT_VERSION:
            raise _WireError(400, {"error": "version_mismatch",
                                   "detail": f"server speaks version {WIRE_FORMAT_VERSION}"})
        handle_id = payload.get("handle_id")
        handle = self._handles.get(handle_id)
        if handle is None:
            raise _WireError(404, {"error": "stale_handle",
                                   "detail": f"unknown handle {handle_id!r}"})
        try:
            num_reads = int(payload["num_reads"])
            seed = payload.get("seed")
            seed = int(seed) if seed is not None else int(self._rng.integers(2**63))
            pause = bool(payload.get("pause", False))
        except (KeyError, TypeError, ValueError) as exc:
            raise _WireError(400, {"error": "protocol", "detail": str(exc)})
        batch = self.backend.read(handle, num_reads, seed=seed, pause=pause)
        spins = (2 * batch.stacked().astype(np.int64) - 1).tolist()
        timing = TimingReport(num_reads=num_reads)
        return {
            "format_version": WIRE_FORMAT_VERSION,
            "states": spins,
            "effective_metadata": {
                "reads_served": handle.reads_served,
                "simulated_ms": timing.total_ms,
            },
        }


class _WireError(Exception):
    def __init__(self, code: int, payload: dict):
        self.code = code
        self.payload = payload


@dataclass
class RemoteProgramHandle:
    """Client-side view of a programmed device; the temperature stays hidden."""

    handle_id: str
    program: IsingProgram
    reads_served: int = 0
    metadata: dict = field(default_factory=dict)


class RemoteAnnealer:
    """Client for the wire protocol; mirrors the local backend surface."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout

    def _post(self, path: str, payload: dict) -> dict:
        try:
            response = requests.post(
                f"{self.endpoint}{path}", json=payload, timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransportError(f"cannot reach {self.endpoint}{path}: {exc}") from exc
        try:
            body = response.json()
        except ValueError as exc:
            raise ProtocolError(f"non-JSON response from {path}") from exc
        if response.status_code != 200:
            kind = body.get("error", "protocol")
            detail = body.get("detail", "")
            if kind == "stale_handle":
                raise StaleHandleError(detail)
            if kind == "version_mismatch":
                raise VersionMismatchError(detail)
            raise ProtocolError(f"{kind}: {detail}")
        if body.get("format_version") != WIRE_FORMAT_VERSION:
            raise VersionMismatchError(
                f"peer answered with wire version {body.get('format_version')!r}"
            )
        return body

    def program(self, ising: IsingProgram) -> RemoteProgramHandle:
        body = self._post("/program", program_to_wire(ising))
        handle_id = body.get("handle_id")
        if not isinstance(handle_id, str) or not handle_id:
            raise ProtocolError("missing handle_id in program response")
        return RemoteProgramHandle(handle_id=handle_id, program=ising)

    def read(
        self,
        handle: RemoteProgramHandle,
        num_reads: int,
        seed: int | None = None,
        pause: bool = False,
    ) -> SampleBatch:
        if num_reads < 1:
            raise ValueError("num_reads must be >= 1")
        payload = {
            "format_version": WIRE_FORMAT_VERSION,
            "handle_id": handle.handle_id,
            "num_reads": int(num_reads),
            "pause": bool(pause),
        }
        if seed is not None:
            payload["seed"] = int(seed)
        body = self._post("/read", payload)
        states = body.get("states")
        total = handle.program.layout.total
        if not isinstance(states, list) or len(states) != num_reads:
            raise ProtocolError("read response does not carry one state per requested read")
        arr = np.asarray(states)
        if arr.ndim != 2 or arr.shape[1] != total or not np.all(np.isin(arr, (-1, 1))):
            raise ProtocolError("read response states have the wrong shape or alphabet")
        handle.reads_served += num_reads
        handle.metadata = body.get("effective_metadata", {})
        binary = ((arr + 1) // 2).astype(np.uint8)
        return SampleBatch.from_stacked(
            handle.program.layout,
            binary,
            source="annealer",
            seed=seed if seed is not None else -1,
            steps=0,
        )
