"""Client SDK: connect/authenticate, GET/PUT/COOK, the chainable frame
builder, and lazy row iteration over remote streams.

A connection carries one in-flight data stream at a time; open parallel
connections for parallel streams. Received streams replenish credit
automatically as the consumer drains them, so the server never runs more
than one window ahead.
"""

from __future__ import annotations

import os
import socket
import time
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Union

from dacp.channel import FrameChannel, FrameCounters
from dacp.dag import (
    DagNode,
    DagTask,
    FilterOp,
    GetSource,
    LimitOp,
    MapOp,
    NodeKind,
    SelectOp,
    UnionOp,
    serialize_dag,
)
from dacp.errors import (
    DacpError,
    InternalError,
    StreamConsumedError,
    error_from_code,
)
from dacp.expr import parse_map_expr, parse_predicate
from dacp.sdf import RecordBatch, Schema, StreamingDataFrame
from dacp.uri import split_endpoint
from dacp.wire import (
    FRAME_CAP,
    Auth,
    AuthOk,
    AUTH_ANONYMOUS,
    AUTH_BASIC,
    BatchMsg,
    Cook,
    CookPublish,
    Credit,
    EndStream,
    ErrorMsg,
    Get,
    Hello,
    Message,
    PublishOk,
    Pull,
    PutAck,
    PutBegin,
    SchemaMsg,
    decode_batch,
    encode_batch_frames,
)

DEFAULT_WINDOW = 4
REAUTH_MARGIN = 60.0
TOKEN_ENV_VAR = "DACP_TOKEN"


@dataclass(frozen=True)
class Credentials:
    username: str
    password: str


class RemoteStream(StreamingDataFrame):
    """A streaming data frame arriving over a connection, with stream
    bookkeeping the latency tests observe."""

    def __init__(self, schema: Schema, batches, *, on_close=None):
        super().__init__(schema, batches, on_close=on_close, check=False)
        self.end_stream_seen = False
        self.total_rows: Optional[int] = None


class Connection:
    """One authenticated protocol connection."""

    def __init__(
        self,
        endpoint: str,
        *,
        credentials: Optional[Credentials] = None,
        token: Optional[str] = None,
        window: int = DEFAULT_WINDOW,
        timeout: float = 30.0,
        now_fn=time.time,
        counters: Optional[FrameCounters] = None,
    ):
        if token is None:
            token = os.environ.get(TOKEN_ENV_VAR) or None
        host, port = split_endpoint(endpoint)
        self.endpoint = endpoint
        self.window = max(1, window)
        self.timeout = timeout
        self._now = now_fn
        self._credentials = credentials
        self._injected_token = token
        self._token = token or ""
        self._token_expiry: Optional[int] = None
        self.auth_count = 0
        self._busy = False
        self._dead = False
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise InternalError(f"cannot connect to {endpoint}: {exc}") from None
        self._chan = FrameChannel(sock, counters=counters)
        self._chan.send(Hello())
        self._authenticate()

    # -- session plumbing

    def _authenticate(self) -> None:
        if self._credentials is not None:
            msg = Auth(AUTH_BASIC, self._credentials.username, self._credentials.password)
        else:
            msg = Auth(AUTH_ANONYMOUS)
        self._chan.send(msg)
        reply = self._recv_reply()
        if not isinstance(reply, AuthOk):
            raise InternalError(f"expected AUTH_OK, got {type(reply).__name__}")
        self.auth_count += 1
        if self._injected_token is None:
            self._token = reply.token
            self._token_expiry = reply.expiry

    def _recv_reply(self) -> Message:
        msg = self._chan.recv(timeout=self.timeout)
        if msg is None:
            self._dead = True
            raise InternalError("server closed the connection")
        if isinstance(msg, ErrorMsg):
            raise error_from_code(msg.code, msg.message)
        return msg

    def _prepare_request(self) -> None:
        if self._dead:
            raise InternalError("connection is closed")
        if self._busy:
            raise StreamConsumedError(
                "a stream is in flight on this connection; finish it or open another connection"
            )
        if (
            self._injected_token is None
            and self._token_expiry is not None
            and self._token_expiry - self._now() < REAUTH_MARGIN
        ):
            self._authenticate()

    # -- data plane

    def get(
        self,
        uri: str,
        projection: Optional[list[str]] = None,
        predicate: Optional[str] = None,
    ) -> RemoteStream:
        """Request a resource as a lazily consumable stream. The predicate
        is evaluated server-side, over the projected view when a projection
        is given."""
        if predicate is not None:
            parse_predicate(predicate)  # fail locally with a byte offset
        self._prepare_request()
        msg = Get(
            self._token,
            uri,
            tuple(projection) if projection is not None else None,
            predicate,
            self.window,
        )
        return self._open_stream(msg)

    def cook(self, dag: Union[str, DagTask]) -> RemoteStream:
        """Submit an operator DAG; the result streams as it is computed."""
        self._prepare_request()
        doc = serialize_dag(dag) if isinstance(dag, DagTask) else dag
        return self._open_stream(Cook(self._token, doc, self.window))

    def cook_publish(self, dag: Union[str, DagTask], ttl_seconds: int = 600) -> PublishOk:
        """Register a deferred stream; execution happens at PULL time."""
        self._prepare_request()
        doc = serialize_dag(dag) if isinstance(dag, DagTask) else dag
        self._chan.send(CookPublish(self._token, doc, ttl_seconds))
        reply = self._recv_reply()
        if not isinstance(reply, PublishOk):
            raise InternalError(f"expected PUBLISH_OK, got {type(reply).__name__}")
        return reply

    def pull(self, stream_id: str, stream_token: str) -> RemoteStream:
        """Consume a published stream (single use)."""
        if self._dead:
            raise InternalError("connection is closed")
        if self._busy:
            raise StreamConsumedError("a stream is in flight on this connection")
        return self._open_stream(Pull(stream_id, stream_token, self.window))

    def put(self, uri: str, sdf: StreamingDataFrame) -> int:
        """Stream a data frame into the server; returns rows written."""
        self._prepare_request()
        self._chan.send(PutBegin(self._token, uri, sdf.schema))
        total = 0
        try:
            for batch in sdf.batches():
                for payload in encode_batch_frames(batch, FRAME_CAP):
                    self._chan.send(BatchMsg(payload))
                total += batch.row_count
            self._chan.send(EndStream(total))
        except (BrokenPipeError, ConnectionError, OSError):
            # the server rejected mid-stream; surface its buffered ERROR
            self._dead = True
            try:
                reply = self._chan.recv(timeout=self.timeout)
            except (DacpError, OSError):
                reply = None
            if isinstance(reply, ErrorMsg):
                raise error_from_code(reply.code, reply.message) from None
            raise InternalError("connection lost during PUT") from None
        reply = self._recv_reply()
        if not isinstance(reply, PutAck):
            raise InternalError(f"expected PUT_ACK, got {type(reply).__name__}")
        return reply.rows_written

    # -- stream reception

    def _open_stream(self, request: Message) -> RemoteStream:
        self._busy = True
        try:
            self._chan.send(request)
            first = self._recv_reply()
        except BaseException:
            self._busy = False
            raise
        if not isinstance(first, SchemaMsg):
            self._busy = False
            raise InternalError(f"expected SCHEMA, got {type(first).__name__}")
        schema = first.schema
        stream: RemoteStream

        def gen() -> Iterator[RecordBatch]:
            granted = self.window
            received = 0
            try:
                while True:
                    msg = self._chan.recv(timeout=None)
                    if msg is None:
                        self._dead = True
                        raise InternalError("server closed the connection mid-stream")
                    if isinstance(msg, BatchMsg):
                        batch = decode_batch(msg.payload, schema)
                        received += 1
                        ahead = granted - received
                        if ahead < self.window / 2:
                            top_up = self.window - ahead
                            self._chan.send(Credit(top_up))
                            granted += top_up
                        yield batch
                    elif isinstance(msg, EndStream):
                        stream.end_stream_seen = True
                        stream.total_rows = msg.total_rows
                        self._busy = False
                        return
                    elif isinstance(msg, ErrorMsg):
                        self._dead = True
                        raise error_from_code(msg.code, msg.message)
                    else:
                        self._dead = True
                        raise InternalError(f"unexpected frame {type(msg).__name__} in stream")
            finally:
                if not stream.end_stream_seen:
                    # abandonment: the connection is the cancellation boundary
                    self._dead = True
                    self._busy = False
                    self._chan.close()

        stream = RemoteStream(schema, gen())
        return stream

    def close(self) -> None:
        self._dead = True
        self._chan.close()

    def __enter__(self) -> "Connection":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def connect(
    endpoint: str,
    username: Optional[str] = None,
    password: Optional[str] = None,
    **kwargs: Any,
) -> Connection:
    creds = Credentials(username, password or "") if username is not None else None
    return Connection(endpoint, credentials=creds, **kwargs)


def open_pull(
    endpoint: str,
    stream_id: str,
    stream_token: str,
    *,
    window: int = DEFAULT_WINDOW,
    timeout: float = 30.0,
    counters: Optional[FrameCounters] = None,
) -> RemoteStream:
    """PULL a published stream using only its stream token (no session
    auth); used by federation coordinators and remote-stream sources."""
    host, port = split_endpoint(endpoint)
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise InternalError(f"cannot connect to {endpoint}: {exc}") from None
    chan = FrameChannel(sock, counters=counters)
    window = max(1, window)
    try:
        chan.send(Hello())
        chan.send(Pull(stream_id, stream_token, window))
        first = chan.recv(timeout=timeout)
    except BaseException:
        chan.close()
        raise
    if first is None:
        chan.close()
        raise InternalError("server closed the connection")
    if isinstance(first, ErrorMsg):
        chan.close()
        raise error_from_code(first.code, first.message)
    if not isinstance(first, SchemaMsg):
        chan.close()
        raise InternalError(f"expected SCHEMA, got {type(first).__name__}")
    schema = first.schema
    stream: RemoteStream

    def gen() -> Iterator[RecordBatch]:
        granted = window
        received = 0
        try:
            while True:
                msg = chan.recv(timeout=None)
                if msg is None:
                    raise InternalError("server closed the connection mid-stream")
                if isinstance(msg, BatchMsg):
                    batch = decode_batch(msg.payload, schema)
                    received += 1
                    ahead = granted - received
                    if ahead < window / 2:
                        top_up = window - ahead
                        chan.send(Credit(top_up))
                        granted += top_up
                    yield batch
                elif isinstance(msg, EndStream):
                    stream.end_stream_seen = True
                    stream.total_rows = msg.total_rows
                    return
                elif isinstance(msg, ErrorMsg):
                    raise error_from_code(msg.code, msg.message)
                else:
                    raise InternalError(f"unexpected frame {type(msg).__name__} in stream")
        finally:
            chan.close()

    stream = RemoteStream(schema, gen())
    return stream


# ---------------------------------------------------------------------------
# chainable builder


class FrameBuilder:
    """Builds an operator DAG with a chainable API; every method returns a
    new builder, so partial chains can be shared and unioned safely."""

    def __init__(self, conn: Optional[Connection], base: Any, steps: tuple = ()):
        self._conn = conn
        self._base = base  # uri text, or ("union", left_builder, right_builder)
        self._steps = steps

    def filter(self, predicate: str) -> "FrameBuilder":
        return self._with(FilterOp(parse_predicate(predicate)))

    def select(self, columns: list[str]) -> "FrameBuilder":
        return self._with(SelectOp(tuple(columns)))

    def map(self, new_column: str, expr: str) -> "FrameBuilder":
        return self._with(MapOp(new_column, parse_map_expr(expr)))

    def limit(self, n: int) -> "FrameBuilder":
        return self._with(LimitOp(n))

    def union(self, other: "FrameBuilder") -> "FrameBuilder":
        return FrameBuilder(self._conn or other._conn, ("union", self, other))

    def _with(self, op: NodeKind) -> "FrameBuilder":
        return FrameBuilder(self._conn, self._base, self._steps + (op,))

    def task(self) -> DagTask:
        """The DAG this chain denotes."""
        nodes: dict[str, DagNode] = {}
        counter = [0]
        sink = _assemble(self, nodes, counter)
        return DagTask(nodes, sink)

    def collect(self) -> RemoteStream:
        """Serialize the DAG and submit it for streaming execution."""
        if self._conn is None:
            raise InternalError("builder has no connection")
        return self._conn.cook(self.task())


def _assemble(builder: FrameBuilder, nodes: dict[str, DagNode], counter: list[int]) -> str:
    def next_id() -> str:
        nid = f"n{counter[0]}"
        counter[0] += 1
        return nid

    if isinstance(builder._base, tuple):
        _, left, right = builder._base
        left_id = _assemble(left, nodes, counter)
        right_id = _assemble(right, nodes, counter)
        cur = next_id()
        nodes[cur] = DagNode(cur, UnionOp(), (left_id, right_id))
    else:
        cur = next_id()
        nodes[cur] = DagNode(cur, GetSource(builder._base))
    for op in builder._steps:
        nid = next_id()
        nodes[nid] = DagNode(nid, op, (cur,))
        cur = nid
    return cur


def frame(conn: Optional[Connection], uri: str) -> FrameBuilder:
    """Start a chain over a resource URI."""
    return FrameBuilder(conn, uri)
