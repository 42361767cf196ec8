"""Raw protocol-level test client: speaks frames directly, no SDK sugar,
so state-machine and flow-control behavior can be asserted frame by frame.
"""

from __future__ import annotations

import socket
from typing import Optional

from dacp.channel import FrameChannel
from dacp.uri import split_endpoint
from dacp import wire


class RawClient:
    def __init__(self, endpoint: str, timeout: float = 10.0):
        host, port = split_endpoint(endpoint)
        sock = socket.create_connection((host, port), timeout=timeout)
        self.chan = FrameChannel(sock)
        self.timeout = timeout

    def send(self, msg: wire.Message) -> None:
        self.chan.send(msg)

    def recv(self, timeout: Optional[float] = None) -> Optional[wire.Message]:
        return self.chan.recv(timeout=self.timeout if timeout is None else timeout)

    def hello(self, version: int = wire.PROTOCOL_VERSION) -> None:
        self.send(wire.Hello(version))

    def auth_anonymous(self) -> wire.AuthOk:
        self.send(wire.Auth(wire.AUTH_ANONYMOUS))
        reply = self.recv()
        assert isinstance(reply, wire.AuthOk), reply
        return reply

    def auth_basic(self, username: str, password: str) -> wire.Message:
        self.send(wire.Auth(wire.AUTH_BASIC, username, password))
        return self.recv()

    def open(self) -> str:
        """HELLO + anonymous AUTH; returns the session token."""
        self.hello()
        return self.auth_anonymous().token

    def drain_stream(self, schema) -> tuple[list, int]:
        """Read BATCH*/END_STREAM, decoding against schema; grants credit
        greedily. Returns (rows, batch_frames)."""
        rows: list = []
        batches = 0
        while True:
            msg = self.recv()
            if isinstance(msg, wire.BatchMsg):
                batches += 1
                rows.extend(wire.decode_batch(msg.payload, schema).rows())
                self.send(wire.Credit(4))
            elif isinstance(msg, wire.EndStream):
                return rows, batches
            else:
                raise AssertionError(f"unexpected frame {msg}")

    def close(self) -> None:
        self.chan.close()

    def __enter__(self) -> "RawClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
