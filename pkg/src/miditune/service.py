"""Streaming session endpoint.

One JSON object per frame, one engine session per connection. The same
message schema is served over WebSocket (default) or newline-delimited JSON
on a raw TCP socket. Client timestamps (t_ms) drive delta buckets; the
server clock never leaks into the protocol except as measured latency.
"""

from __future__ import annotations

import json
import socketserver
import threading
import time
from dataclasses import replace

from .engine import BACKEND_CONTEXT, BACKEND_MODEL, CorrectionConfig, Session
from .midi_codec import NOTE_OFF, NOTE_ON, NoteEvent
from .neural import LstmModel
from .theory import MODES, MusicalContext

DEFAULT_AID_LEVEL = 0.5
DEFAULT_THRESHOLD = 0.02

# Client milliseconds to reference ticks: 480 ticks per beat at 120 bpm.
_TICKS_PER_MS = 480 / 500


def _frame(pairs: list[tuple[str, object]]) -> bytes:
    return json.dumps(dict(pairs), separators=(",", ":")).encode()


def _error(code: str, message: str) -> bytes:
    return _frame([("type", "error"), ("code", code), ("message", message)])


def _ack(for_type: str) -> bytes:
    return _frame([("type", "ack"), ("for", for_type)])


class ServiceSession:
    """Protocol state machine for one connection."""

    def __init__(self, model: LstmModel, warmup: int = 0,
                 context_window: int | None = None, clock=time.perf_counter_ns):
        cfg = CorrectionConfig(
            backend=BACKEND_MODEL,
            aid_level=DEFAULT_AID_LEVEL,
            detection_threshold=DEFAULT_THRESHOLD,
            warmup=warmup,
        )
        self._session = Session(cfg, model, context_window=context_window, clock=clock)
        self._last_t_ms: float | None = None

    def handle(self, raw: str) -> list[bytes]:
        """Process one inbound frame; returns the reply frames, in order."""
        try:
            message = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return [_error("bad_json", "frame is not valid JSON")]
        if not isinstance(message, dict) or "type" not in message:
            return [_error("bad_json", "frame must be an object with a type field")]
        kind = message["type"]
        if kind == "config":
            return self._handle_config(message)
        if kind == "note_on":
            return self._handle_note(message, NOTE_ON)
        if kind == "note_off":
            return self._handle_note(message, NOTE_OFF)
        if kind == "reset":
            self._session.reset()
            self._last_t_ms = None
            return [_ack("reset")]
        return [_error("bad_type", f"unknown message type {kind!r}")]

    def _handle_config(self, message: dict) -> list[bytes]:
        cfg = self._session.cfg
        try:
            if "key" in message or "mode" in message:
                key = message.get("key", cfg.context.key if cfg.context else None)
                mode = message.get("mode", cfg.context.mode if cfg.context else None)
                if not isinstance(key, int) or not isinstance(mode, str):
                    raise ValueError("key must be an integer and mode a string")
                cfg = replace(cfg, context=MusicalContext(key, mode.lower()))
            if "backend" in message:
                cfg = replace(cfg, backend=message["backend"])
            if "aid_level" in message:
                if not isinstance(message["aid_level"], (int, float)):
                    raise ValueError("aid_level must be a number")
                cfg = replace(cfg, aid_level=float(message["aid_level"]))
            if "threshold" in message:
                if not isinstance(message["threshold"], (int, float)):
                    raise ValueError("threshold must be a number")
                cfg = replace(cfg, detection_threshold=float(message["threshold"]))
            self._session.set_backend(cfg)
        except (ValueError, TypeError) as exc:
            return [_error("bad_config", str(exc))]
        return [_ack("config")]

    def _handle_note(self, message: dict, kind: str) -> list[bytes]:
        pitch = message.get("pitch")
        t_ms = message.get("t_ms")
        velocity = message.get("velocity", 0) if kind == NOTE_ON else 0
        if (
            not isinstance(pitch, int) or not 0 <= pitch <= 127
            or not isinstance(velocity, int) or not 0 <= velocity <= 127
            or not isinstance(t_ms, (int, float))
        ):
            return [_error("bad_note", "pitch, velocity and t_ms out of range or missing")]
        delta_ms = 0.0 if self._last_t_ms is None else max(0.0, t_ms - self._last_t_ms)
        self._last_t_ms = float(t_ms)
        event = NoteEvent(kind, pitch, velocity, round(delta_ms * _TICKS_PER_MS))
        decision = self._session.process_event(event)
        if kind == NOTE_OFF:
            return []
        pairs: list[tuple[str, object]] = [
            ("type", "decision"),
            ("orig_pitch", decision.original_pitch),
            ("out_pitch", decision.emitted_pitch),
            ("overridden", decision.overridden),
            ("flagged", decision.flagged_error),
        ]
        if decision.p_original is not None:
            pairs.append(("p_orig", round(decision.p_original, 6)))
        if decision.p_emitted is not None:
            pairs.append(("p_out", round(decision.p_emitted, 6)))
        pairs.append(("latency_us", decision.latency_us))
        return [_frame(pairs)]

    @property
    def backend(self) -> str:
        return self._session.cfg.backend


# ---------------------------------------------------------------------------
# Transports


class _RawHandler(socketserver.StreamRequestHandler):
    def handle(self):
        session = ServiceSession(
            self.server.model, self.server.warmup,
            self.server.context_window, self.server.clock,
        )
        for line in self.rfile:
            text = line.decode("utf-8", errors="replace").strip()
            if not text:
                continue
            for reply in session.handle(text):
                self.wfile.write(reply + b"\n")
            self.wfile.flush()


class RawSocketServer(socketserver.ThreadingTCPServer):
    """Newline-delimited JSON over TCP; one session per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, model, host="127.0.0.1", port=0, warmup=0,
                 context_window=None, clock=time.perf_counter_ns):
        super().__init__((host, port), _RawHandler)
        self.model = model
        self.warmup = warmup
        self.context_window = context_window
        self.clock = clock

    @property
    def port(self) -> int:
        return self.server_address[1]


class WebSocketServer:
    """One JSON object per text frame; one session per connection."""

    def __init__(self, model, host="127.0.0.1", port=0, warmup=0,
                 context_window=None, clock=time.perf_counter_ns):
        from websockets.sync.server import serve

        self.model = model
        self.warmup = warmup
        self.context_window = context_window
        self.clock = clock
        self._server = serve(self._handler, host, port)
        self.port = self._server.socket.getsockname()[1]

    def _handler(self, connection):
        session = ServiceSession(self.model, self.warmup,
                                 self.context_window, self.clock)
        for message in connection:
            if isinstance(message, bytes):
                message = message.decode("utf-8", errors="replace")
            for reply in session.handle(message):
                connection.send(reply.decode())

    def serve_forever(self):
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()


def start_in_background(server) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread


def serve(model: LstmModel, host: str, port: int, raw_socket: bool = False,
          warmup: int = 0, context_window: int | None = None) -> None:
    """Run the endpoint until interrupted."""
    if raw_socket:
        server = RawSocketServer(model, host, port, warmup, context_window)
    else:
        server = WebSocketServer(model, host, port, warmup, context_window)
    print(f"listening on {'tcp' if raw_socket else 'ws'}://{host}:{server.port}")
    server.serve_forever()
