"""Socket-level message channel with per-frame accounting.

One channel per connection; sending and receiving are each single-threaded.
Counters aggregate frames and payload bytes by message type and direction,
shared across channels (a server passes one counter set to every
connection it accepts).
"""

from __future__ import annotations

import socket
import threading
from typing import Optional

from dacp.errors import MalformedFrame
from dacp.wire import (
    FRAME_CAP,
    FrameDecoder,
    Message,
    MESSAGE_TYPE_NAMES,
    encode_frame,
    message_type_of,
)


class FrameCounters:
    """Thread-safe frame/byte counters keyed by (direction, message name)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._table: dict[tuple[str, str], list[int]] = {}

    def record(self, direction: str, name: str, payload_len: int) -> None:
        with self._lock:
            entry = self._table.setdefault((direction, name), [0, 0])
            entry[0] += 1
            entry[1] += payload_len

    def frames(self, direction: str, name: str) -> int:
        with self._lock:
            return self._table.get((direction, name), [0, 0])[0]

    def payload_bytes(self, direction: str, name: str) -> int:
        with self._lock:
            return self._table.get((direction, name), [0, 0])[1]

    def snapshot(self) -> dict[str, dict[str, tuple[int, int]]]:
        with self._lock:
            out: dict[str, dict[str, tuple[int, int]]] = {"in": {}, "out": {}}
            for (direction, name), (frames, payload) in self._table.items():
                out.setdefault(direction, {})[name] = (frames, payload)
            return out

    def reset(self) -> None:
        with self._lock:
            self._table.clear()


class FrameChannel:
    """Blocking send/recv of protocol messages over a connected socket."""

    def __init__(
        self,
        sock: socket.socket,
        cap: int = FRAME_CAP,
        counters: Optional[FrameCounters] = None,
    ):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._cap = cap
        self._decoder = FrameDecoder(cap)
        self._counters = counters
        self._closed = False

    @property
    def peer(self) -> str:
        try:
            host, port = self._sock.getpeername()[:2]
            return f"{host}:{port}"
        except OSError:
            return "?"

    def send(self, msg: Message) -> None:
        data = encode_frame(msg, self._cap)
        if self._counters is not None:
            name = MESSAGE_TYPE_NAMES[message_type_of(msg)]
            self._counters.record("out", name, len(data) - 5)
        self._sock.sendall(data)

    def recv(self, timeout: Optional[float] = None) -> Optional[Message]:
        """Next message; None on clean EOF. Raises TimeoutError when the
        peer sends nothing within ``timeout`` and MalformedFrame on damage
        (including EOF inside a frame)."""
        while True:
            msg = self._decoder.next_message()
            if msg is not None:
                if self._counters is not None:
                    name = MESSAGE_TYPE_NAMES[message_type_of(msg)]
                    self._counters.record("in", name, self._decoder.last_payload_len)
                return msg
            self._sock.settimeout(timeout)
            try:
                data = self._sock.recv(65536)
            finally:
                self._sock.settimeout(None)
            if not data:
                if self._decoder.pending_bytes:
                    raise MalformedFrame("connection closed mid-frame")
                return None
            self._decoder.push(data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()

    @property
    def closed(self) -> bool:
        return self._closed
