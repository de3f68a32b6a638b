"""Classical-channel message framing and transports.

Wire format: newline-delimited JSON objects, one message per line, with fields
``type``, ``session_id``, ``seq`` and ``payload``. Timestamps travel as integer
picoseconds; bit arrays as base64 of MSB-first packed bits. Messages within a
session carry a strictly increasing shared sequence number.

The same actor code runs over an in-process queue pair (used by tests and the
single-process harness) and a TCP byte stream (used by the ``keys`` CLI
subcommand); actors only ever see ``ActorChannel``.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

# Message types. EC_* belong to the reconciliation sub-protocol.
SESSION_INIT = "SESSION_INIT"
TIMETAGS = "TIMETAGS"
MATCH_RESULT = "MATCH_RESULT"
QBER_SAMPLE_REQUEST = "QBER_SAMPLE_REQUEST"
QBER_SAMPLE_REVEAL = "QBER_SAMPLE_REVEAL"
SECURITY_VERDICT = "SECURITY_VERDICT"
EC_START = "EC_START"
EC_PARITIES_REQUEST = "EC_PARITIES_REQUEST"
EC_PARITIES = "EC_PARITIES"
EC_QUERY = "EC_QUERY"
EC_PARITY_REPLY = "EC_PARITY_REPLY"
EC_DONE = "EC_DONE"
EC_HASH_CHALLENGE = "EC_HASH_CHALLENGE"
EC_HASH_RESPONSE = "EC_HASH_RESPONSE"
EC_VERIFY = "EC_VERIFY"
PA_SEED = "PA_SEED"
ABORT = "ABORT"


class ChannelError(RuntimeError):
    """Transport failure (closed socket, malformed frame)."""


class ProtocolViolation(RuntimeError):
    """Out-of-order, unexpected or malformed message content."""


class SessionAborted(RuntimeError):
    def __init__(self, reason: str, **info):
        super().__init__(reason)
        self.reason = reason
        self.info = info


class ReconciliationFailed(RuntimeError):
    pass


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, default=_jsonable, separators=(",", ":")) + "\n").encode("utf-8")


def decode_message(line: bytes) -> dict:
    try:
        msg = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChannelError(f"malformed frame: {exc}") from exc
    for key in ("type", "session_id", "seq", "payload"):
        if key not in msg:
            raise ChannelError(f"frame missing field {key!r}")
    return msg


class InProcChannel:
    """One endpoint of an in-process duplex channel (pair of queues)."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, msg: dict) -> None:
        self._outbox.put(msg)

    def recv(self, timeout: float | None = 60.0) -> dict:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ChannelError("channel receive timed out") from None

    def close(self) -> None:
        pass


def channel_pair() -> tuple[InProcChannel, InProcChannel]:
    a2b: queue.Queue = queue.Queue()
    b2a: queue.Queue = queue.Queue()
    return InProcChannel(b2a, a2b), InProcChannel(a2b, b2a)


class TcpChannel:
    """Newline-delimited JSON messages over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._rfile = sock.makefile("rb")

    def send(self, msg: dict) -> None:
        try:
            self._sock.sendall(encode_message(msg))
        except OSError as exc:
            raise ChannelError(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = 60.0) -> dict:
        self._sock.settimeout(timeout)
        line = self._rfile.readline()
        if not line:
            raise ChannelError("connection closed by peer")
        return decode_message(line)

    def close(self) -> None:
        try:
            self._rfile.close()
            self._sock.close()
        except OSError:
            pass


class TcpListener:
    """Bound listening socket; separates bind (to learn the port) from accept."""

    def __init__(self, host: str, port: int):
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._srv.bind((host, port))
        self._srv.listen(1)
        self.host, self.port = self._srv.getsockname()

    def accept(self, timeout: float | None = 60.0) -> TcpChannel:
        self._srv.settimeout(timeout)
        try:
            conn, _ = self._srv.accept()
        except OSError as exc:
            raise ChannelError(f"accept failed: {exc}") from exc
        finally:
            self._srv.close()
        return TcpChannel(conn)


def tcp_connect(host: str, port: int, retries: int = 50, delay_s: float = 0.1) -> TcpChannel:
    import time

    last: Exception | None = None
    for _ in range(retries):
        try:
            return TcpChannel(socket.create_connection((host, port), timeout=10.0))
        except OSError as exc:
            last = exc
            time.sleep(delay_s)
    raise ChannelError(f"could not connect to {host}:{port}: {last}")


@dataclass
class Transcript:
    """Ordered record of every message placed on the channel."""

    entries: list[tuple[str, dict]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, sender: str, msg: dict) -> None:
        with self._lock:
            self.entries.append((sender, msg))

    def messages(self, *types: str) -> Iterable[tuple[str, dict]]:
        for sender, msg in self.entries:
            if not types or msg["type"] in types:
                yield sender, msg

    def __len__(self) -> int:
        return len(self.entries)


class ActorChannel:
    """Session-scoped channel view: stamps/validates session id and seq numbers.

    The sequence number is shared between both directions; each endpoint sends
    seq = last-seen + 1, which stays consistent because the protocol is
    strictly turn-based.
    """

    def __init__(self, raw, session_id: int, party: str, transcript: Transcript | None = None):
        self._raw = raw
        self.session_id = int(session_id)
        self.party = party
        self._transcript = transcript
        self._last_seq = 0

    def send(self, msg_type: str, **payload: Any) -> None:
        self._last_seq += 1
        msg = {
            "type": msg_type,
            "session_id": self.session_id,
            "seq": self._last_seq,
            "payload": payload,
        }
        if self._transcript is not None:
            self._transcript.record(self.party, msg)
        self._raw.send(msg)

    def recv(self, timeout: float | None = 60.0) -> tuple[str, dict]:
        msg = self._raw.recv(timeout=timeout)
        if msg["session_id"] != self.session_id:
            raise ProtocolViolation(
                f"session id mismatch: got {msg['session_id']}, expected {self.session_id}"
            )
        if msg["seq"] != self._last_seq + 1:
            raise ProtocolViolation(f"sequence gap: got {msg['seq']}, expected {self._last_seq + 1}")
        self._last_seq = msg["seq"]
        return msg["type"], msg["payload"]

    def expect(self, *types: str, timeout: float | None = 60.0) -> tuple[str, dict]:
        """recv() that raises SessionAborted on ABORT and on unexpected types."""
        msg_type, payload = self.recv(timeout=timeout)
        if msg_type == ABORT:
            raise SessionAborted(
                payload.get("reason", "unspecified"),
                **{k: v for k, v in payload.items() if k != "reason"},
            )
        if types and msg_type not in types:
            raise ProtocolViolation(f"expected one of {types}, got {msg_type}")
        return msg_type, payload

    def close(self) -> None:
        self._raw.close()
