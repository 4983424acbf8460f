"""Client for external patch scorers speaking newline-delimited JSON.

Request::

    {"id": 7, "slide": "s01", "x": 512, "y": 256, "side": 512}

Response (any order, matched by id)::

    {"id": 7, "p": 0.83}

A response carrying an ``"error"`` field fails the request. Addresses are
``stdio:<command line>`` (spawn a subprocess and talk over its pipes),
``unix:<path>`` or ``[tcp:]host:port``.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import socket
import subprocess
import sys
import threading
import time
from typing import Callable, Sequence

from .imaging import Tile
from .inference import ClassifierError

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
CLOSE_GRACE = 1.0


class ProtocolError(ClassifierError):
    pass


class ProtocolClassifier:
    kind = "external-protocol"

    def __init__(self, address: str, timeout: float = DEFAULT_TIMEOUT, window: int = 64):
        self.address = address
        self.timeout = timeout
        self.window = max(1, window)
        self._proc: subprocess.Popen | None = None
        self._sock: socket.socket | None = None
        self._rfile = self._wfile = None
        self._lines: queue.Queue = queue.Queue()
        self._pump_thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._next_id = 0

    # connection handling -------------------------------------------------

    def connect(self) -> None:
        if self._wfile is not None:
            return
        addr = self.address
        try:
            if addr.startswith("stdio:"):
                self._proc = subprocess.Popen(
                    shlex.split(addr[len("stdio:"):]), stdin=subprocess.PIPE, stdout=subprocess.PIPE
                )
                self._rfile, self._wfile = self._proc.stdout, self._proc.stdin
            else:
                if addr.startswith("unix:"):
                    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                    sock.settimeout(self.timeout)
                    sock.connect(addr[len("unix:"):])
                else:
                    host, _, port = addr.removeprefix("tcp:").rpartition(":")
                    sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=self.timeout)
                sock.settimeout(None)
                self._sock = sock
                self._rfile = sock.makefile("rb")
                self._wfile = sock.makefile("wb")
        except (OSError, ValueError) as exc:
            raise ProtocolError(f"cannot reach scorer at {addr!r}: {exc}") from exc
        self._pump_thread = threading.Thread(target=self._pump, args=(self._rfile, self._lines), daemon=True)
        self._pump_thread.start()

    @staticmethod
    def _pump(rfile, lines: queue.Queue) -> None:
        try:
            for line in iter(rfile.readline, b""):
                lines.put(line)
        except (OSError, ValueError):
            pass
        lines.put(None)

    def close(self) -> None:
        # EOF first; the reader handle is closed only after the pump has
        # seen end-of-stream, since closing it under a blocked readline hangs
        if self._wfile is not None:
            try:
                self._wfile.close()
            except OSError:
                pass
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=CLOSE_GRACE)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._pump_thread is not None:
            self._pump_thread.join(timeout=CLOSE_GRACE)
        if self._rfile is not None:
            try:
                self._rfile.close()
            except OSError:
                pass
        if self._sock is not None:
            self._sock.close()
        self._wfile = self._rfile = self._sock = self._proc = self._pump_thread = None
        self._lines = queue.Queue()

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    # scoring ---------------------------------------------------------------

    def _send(self, msg: dict) -> None:
        try:
            self._wfile.write((json.dumps(msg) + "\n").encode())
            self._wfile.flush()
        except (OSError, ValueError) as exc:
            raise ProtocolError(f"scorer connection lost: {exc}") from exc

    def _parse(self, line: bytes, pending: dict) -> tuple[int, float]:
        try:
            msg = json.loads(line)
            rid = msg["id"]
        except (ValueError, KeyError, TypeError):
            raise ProtocolError(f"malformed response: {line[:200]!r}") from None
        if rid not in pending:
            raise ProtocolError(f"response for unknown request id {rid!r}")
        if "error" in msg:
            raise ProtocolError(f"scorer error for request {rid}: {msg['error']}")
        p = msg.get("p")
        if isinstance(p, bool) or not isinstance(p, (int, float)) or not (math.isfinite(p) and 0.0 <= p <= 1.0):
            raise ProtocolError(f"malformed probability for request {rid}: {p!r}")
        return rid, float(p)

    def score(self, slide, tiles: Sequence[Tile]) -> list[float]:
        """Pipeline up to ``window`` requests; each must be answered within ``timeout``."""
        slide_id = getattr(slide, "slide_id", str(slide))
        with self._lock:
            self.connect()
            try:
                return self._score_locked(slide_id, tiles)
            except ProtocolError:
                # late answers would poison the next batch; start afresh
                self.close()
                raise

    def _score_locked(self, slide_id: str, tiles: Sequence[Tile]) -> list[float]:
        out: list[float | None] = [None] * len(tiles)
        pending: dict[int, tuple[int, float]] = {}
        nxt = 0
        while nxt < len(tiles) or pending:
            while nxt < len(tiles) and len(pending) < self.window:
                t = tiles[nxt]
                rid = self._next_id
                self._next_id += 1
                self._send({"id": rid, "slide": slide_id, "x": t.x, "y": t.y, "side": t.side})
                pending[rid] = (nxt, time.monotonic() + self.timeout)
                nxt += 1
            oldest = min(pending, key=lambda r: pending[r][1])
            wait = pending[oldest][1] - time.monotonic()
            try:
                line = self._lines.get(timeout=max(wait, 0.0))
            except queue.Empty:
                raise ProtocolError(f"timeout after {self.timeout:g}s waiting for request {oldest}") from None
            if line is None:
                raise ProtocolError("scorer closed the connection")
            if not line.strip():
                continue
            rid, p = self._parse(line, pending)
            idx, _ = pending.pop(rid)
            out[idx] = p
        return out  # type: ignore[return-value]


def serve(score_fn: Callable[[dict], float], rfile=None, wfile=None) -> None:
    """Answer requests in order with ``score_fn(request)``; for writing scorers in Python."""
    rfile = rfile or sys.stdin
    wfile = wfile or sys.stdout
    for line in rfile:
        if not line.strip():
            continue
        req = json.loads(line)
        try:
            resp = {"id": req["id"], "p": float(score_fn(req))}
        except Exception as exc:  # noqa: BLE001 - reported to the client
            resp = {"id": req.get("id"), "error": str(exc)}
        wfile.write(json.dumps(resp) + "\n")
        wfile.flush()
