"""The server daemon: accepts connections, authenticates and issues
tokens, and serves GET/PUT/COOK/COOK_PUBLISH/PULL with credit-based flow
control.

Connections are handled by one thread each; processing within a connection
is sequential. Data frames follow the fixed order SCHEMA, BATCH*,
END_STREAM (or an ERROR terminating the stream); BATCH frames are sent
only while the client has granted credit. Published streams defer all
execution until their single PULL arrives.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from dacp.channel import FrameChannel, FrameCounters
from dacp.dag import (
    DagNode,
    DagTask,
    GetSource,
    StreamSource,
    apply_filter,
    apply_select,
    execute,
    infer_schema,
    parse_dag,
    plan,
    project_schema,
)
from dacp.datasource import DatasetEntry, DatasetRegistry, LocalStore, resolve
from dacp.errors import (
    AuthFailedError,
    BadRequestError,
    DacpError,
    DacpTypeError,
    ForbiddenError,
    InternalError,
    NotFoundError,
    ProtocolError,
    TokenExpiredError,
)
from dacp.expr import compile_predicate, parse_predicate
from dacp.sdf import Schema, StreamingDataFrame
from dacp.uri import parse_uri, split_endpoint
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
    PROTOCOL_VERSION,
    PublishOk,
    Pull,
    PutAck,
    PutBegin,
    SchemaMsg,
    decode_batch,
    encode_batch_frames,
)

log = logging.getLogger("dacp.server")

DEFAULT_TOKEN_TTL = 3600
DEFAULT_INITIAL_CREDIT = 4
MAX_PUBLISH_TTL = 3600
SWEEP_INTERVAL = 30.0


class _CloseConnection(Exception):
    """Internal: unwind a connection after a stream-terminating error."""


# ---------------------------------------------------------------------------
# credentials and tokens


def hash_password(password: str) -> str:
    return hashlib.sha256(password.encode("utf-8")).hexdigest()


class UserTable:
    """username -> sha256(password) hex digests."""

    def __init__(self, users: dict[str, str] | None = None):
        self._users = dict(users or {})

    @classmethod
    def from_file(cls, path: str | Path) -> "UserTable":
        try:
            doc = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BadRequestError(f"cannot load users file {path}: {exc}") from None
        if not isinstance(doc, list):
            raise BadRequestError("users file must be a list of objects")
        users = {}
        for obj in doc:
            users[obj["username"]] = obj["password_hash"]
        return cls(users)

    def verify(self, username: str, password: str) -> bool:
        stored = self._users.get(username)
        if stored is None:
            # burn the same work to keep timing flat for unknown users
            hmac.compare_digest(hash_password(password), hash_password(password))
            return False
        return hmac.compare_digest(hash_password(password), stored)


@dataclass
class TokenRecord:
    principal: Optional[str]
    scope: str  # "session" | "stream"
    expiry: int
    stream_id: Optional[str] = None


def _new_token() -> tuple[str, bytes]:
    raw = secrets.token_bytes(32)
    text = base64.urlsafe_b64encode(raw).decode("ascii").rstrip("=")
    return text, hashlib.sha256(text.encode("ascii")).digest()


def _token_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


class TokenTable:
    """Session tokens, stored hashed; lookups go through the digest so raw
    tokens never sit in the table."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._table: dict[bytes, TokenRecord] = {}

    def issue(self, principal: Optional[str], ttl: int, now: Optional[float] = None) -> tuple[str, int]:
        now = time.time() if now is None else now
        text, digest = _new_token()
        expiry = int(now) + ttl
        with self._lock:
            self._table[digest] = TokenRecord(principal, "session", expiry)
        return text, expiry

    def check(self, token: str, now: Optional[float] = None) -> TokenRecord:
        now = time.time() if now is None else now
        with self._lock:
            rec = self._table.get(_token_digest(token))
        if rec is None:
            raise ForbiddenError("invalid token")
        if now >= rec.expiry:
            raise TokenExpiredError("token expired")
        return rec


# ---------------------------------------------------------------------------
# published streams


@dataclass
class PublishedStream:
    stream_id: str
    token_digest: bytes
    expiry: int
    principal: Optional[str]
    task: Optional[DagTask]
    schema: Optional[Schema]
    state: str = "pending"  # pending | consumed | expired


class PublishRegistry:
    """Deferred tasks addressable by stream id, guarded by single-use
    stream tokens. Expired entries are kept as tombstones so that a late
    PULL reports expiry rather than an unknown stream."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._streams: dict[str, PublishedStream] = {}

    def register(
        self,
        task: DagTask,
        schema: Schema,
        ttl: int,
        principal: Optional[str],
        now: Optional[float] = None,
    ) -> tuple[str, str, int]:
        now = time.time() if now is None else now
        stream_id = secrets.token_hex(16)
        token, digest = _new_token()
        expiry = int(now) + ttl
        entry = PublishedStream(stream_id, digest, expiry, principal, task, schema)
        with self._lock:
            self._streams[stream_id] = entry
        return stream_id, token, expiry

    def claim(self, stream_id: str, token: str, now: Optional[float] = None) -> PublishedStream:
        now = time.time() if now is None else now
        with self._lock:
            entry = self._streams.get(stream_id)
            if entry is None:
                raise NotFoundError(f"unknown stream {stream_id!r}")
            if not hmac.compare_digest(_token_digest(token), entry.token_digest):
                raise ForbiddenError("stream token mismatch")
            if entry.state == "expired" or now >= entry.expiry:
                entry.state = "expired"
                entry.task = None
                entry.schema = None
                raise TokenExpiredError("published stream expired")
            if entry.state == "consumed" or entry.task is None:
                raise NotFoundError(f"stream {stream_id!r} already consumed")
            entry.state = "consumed"
            task, schema = entry.task, entry.schema
            entry.task = None
        claimed = PublishedStream(
            stream_id, entry.token_digest, entry.expiry, entry.principal, task, schema,
            state="consumed",
        )
        return claimed

    def sweep(self, now: Optional[float] = None) -> int:
        now = time.time() if now is None else now
        reaped = 0
        with self._lock:
            for entry in self._streams.values():
                if entry.state == "pending" and now >= entry.expiry:
                    entry.state = "expired"
                    entry.task = None
                    entry.schema = None
                    reaped += 1
        return reaped

    def pending_count(self) -> int:
        with self._lock:
            return sum(1 for e in self._streams.values() if e.state == "pending")


# ---------------------------------------------------------------------------
# execution context backed by the local store


class ServerExecutionContext:
    """Source access for the engine: local datasets through the store,
    remote streams pulled over the wire on demand."""

    def __init__(self, store: LocalStore, principal: Optional[str], window: int = DEFAULT_INITIAL_CREDIT):
        self.store = store
        self.principal = principal
        self.window = window
        self._streams: dict[str, tuple[Schema, StreamingDataFrame]] = {}

    def _resolve_checked(self, uri: str):
        parsed = parse_uri(uri)
        res = resolve(parsed, self.store.registry)
        if res.dataset.access == "authenticated" and self.principal is None:
            raise ForbiddenError(f"dataset {res.dataset.name!r} requires authentication")
        return res

    def source_schema(self, node: DagNode) -> Schema:
        k = node.kind
        if isinstance(k, GetSource):
            res = self._resolve_checked(k.uri)
            schema = self.store.schema_of(res)
            if k.projection is not None:
                schema = project_schema(schema, k.projection)
            if k.predicate is not None:
                compile_predicate(k.predicate, schema)
            return schema
        return self._remote(node)[0]

    def open_source(self, node: DagNode) -> StreamingDataFrame:
        k = node.kind
        if isinstance(k, GetSource):
            res = self._resolve_checked(k.uri)
            sdf = self.store.open_resource(res)
            if k.projection is not None:
                sdf = apply_select(sdf, k.projection)
            if k.predicate is not None:
                sdf = apply_filter(sdf, k.predicate)
            return sdf
        return self._remote(node)[1]

    def _remote(self, node: DagNode) -> tuple[Schema, StreamingDataFrame]:
        """PULL handshake for a stream source; the data flows lazily but the
        remote schema arrives up front."""
        cached = self._streams.get(node.id)
        if cached is None:
            from dacp.client import open_pull  # deferred: client imports this module's peers

            k = node.kind
            sdf = open_pull(k.endpoint, k.stream_id, k.stream_token, window=self.window)
            cached = (sdf.schema, sdf)
            self._streams[node.id] = cached
        return cached


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:0"
    datasets_file: Optional[Path] = None
    users_file: Optional[Path] = None
    batch_size: int = 4096
    frame_cap: int = FRAME_CAP
    token_ttl_seconds: int = DEFAULT_TOKEN_TTL

    @classmethod
    def from_file(cls, path: str | Path) -> "ServerConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BadRequestError(f"cannot load server config {path}: {exc}") from None
        base = path.parent

        def _path(key: str) -> Optional[Path]:
            v = doc.get(key)
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() else base / p

        return cls(
            listen=doc.get("listen", "127.0.0.1:0"),
            datasets_file=_path("datasets_file"),
            users_file=_path("users_file"),
            batch_size=int(doc.get("batch_size", 4096)),
            frame_cap=int(doc.get("frame_cap", FRAME_CAP)),
            token_ttl_seconds=int(doc.get("token_ttl_seconds", DEFAULT_TOKEN_TTL)),
        )


# ---------------------------------------------------------------------------
# the daemon


class DacpServer:
    """One listening socket, one thread per connection.

    ``store_factory`` builds the data store once the advertised endpoint is
    known (the port may be ephemeral); the default is a plain LocalStore.
    """

    def __init__(
        self,
        registry: DatasetRegistry,
        *,
        users: Optional[UserTable] = None,
        host: str = "127.0.0.1",
        port: int = 0,
        advertised_host: Optional[str] = None,
        batch_size: int = 4096,
        frame_cap: int = FRAME_CAP,
        token_ttl: int = DEFAULT_TOKEN_TTL,
        store_factory: Optional[Callable[[str], LocalStore]] = None,
        sweep_interval: float = SWEEP_INTERVAL,
    ):
        self.registry = registry
        self.users = users or UserTable()
        self.host = host
        self.port = port
        self.advertised_host = advertised_host or host
        self.batch_size = batch_size
        self.frame_cap = frame_cap
        self.token_ttl = token_ttl
        self.counters = FrameCounters()
        self.tokens = TokenTable()
        self.published = PublishRegistry()
        self._store_factory = store_factory or (
            lambda endpoint: LocalStore(registry, endpoint, batch_size=batch_size)
        )
        self._sweep_interval = sweep_interval
        self.store: Optional[LocalStore] = None
        self.endpoint = ""
        self._listener: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._channels: set[FrameChannel] = set()
        self._chan_lock = threading.Lock()
        self._stop = threading.Event()

    @classmethod
    def from_config(cls, config: ServerConfig) -> "DacpServer":
        host, port = split_endpoint(config.listen)
        registry = (
            DatasetRegistry.from_file(config.datasets_file)
            if config.datasets_file
            else DatasetRegistry([])
        )
        users = UserTable.from_file(config.users_file) if config.users_file else UserTable()
        return cls(
            registry,
            users=users,
            host=host,
            port=port,
            batch_size=config.batch_size,
            frame_cap=config.frame_cap,
            token_ttl=config.token_ttl_seconds,
        )

    # -- lifecycle

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen(64)
        self._listener = listener
        self.port = listener.getsockname()[1]
        self.endpoint = f"{self.advertised_host}:{self.port}"
        self.store = self._store_factory(self.endpoint)
        accept = threading.Thread(target=self._accept_loop, name=f"dacp-accept-{self.port}", daemon=True)
        accept.start()
        sweeper = threading.Thread(target=self._sweep_loop, name=f"dacp-sweep-{self.port}", daemon=True)
        sweeper.start()
        self._threads = [accept, sweeper]
        log.info("event=start endpoint=%s datasets=%s", self.endpoint, ",".join(self.registry.names()))

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._chan_lock:
            channels = list(self._channels)
        for chan in channels:
            chan.close()
        for t in self._threads:
            t.join(timeout=5.0)
        log.info("event=stop endpoint=%s", self.endpoint)

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def issue_token(
        self, principal: Optional[str] = None, ttl: Optional[int] = None, now: Optional[float] = None
    ) -> tuple[str, int]:
        """Mint a session token directly (test support and operator use)."""
        return self.tokens.issue(principal, self.token_ttl if ttl is None else ttl, now=now)

    # -- accept/sweep loops

    def _accept_loop(self) -> None:
        assert self._listener is not None
        self._listener.settimeout(0.2)  # closing the listener does not wake accept()
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            sock.settimeout(None)
            t = threading.Thread(
                target=self._handle_conn, args=(sock, addr), name="dacp-conn", daemon=True
            )
            t.start()

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self._sweep_interval):
            reaped = self.published.sweep()
            if reaped:
                log.info("event=sweep reaped=%d", reaped)

    # -- connection state machine

    def _handle_conn(self, sock: socket.socket, addr: Any) -> None:
        chan = FrameChannel(sock, self.frame_cap, self.counters)
        with self._chan_lock:
            self._channels.add(chan)
        try:
            self._session(chan)
        except _CloseConnection:
            pass
        except ProtocolError as exc:
            self._try_send(chan, ErrorMsg(exc.code, str(exc)))
        except (OSError, ConnectionError):
            pass
        except Exception:
            log.exception("event=conn_crash peer=%s", chan.peer)
            self._try_send(chan, ErrorMsg(InternalError.code, "internal error"))
        finally:
            chan.close()
            with self._chan_lock:
                self._channels.discard(chan)

    @staticmethod
    def _try_send(chan: FrameChannel, msg: Message) -> None:
        try:
            chan.send(msg)
        except (OSError, ConnectionError):
            pass

    def _session(self, chan: FrameChannel) -> None:
        first = chan.recv(timeout=30.0)
        if first is None:
            return
        if not isinstance(first, Hello):
            self._try_send(chan, ErrorMsg(BadRequestError.code, "first frame must be HELLO"))
            return
        if first.version != PROTOCOL_VERSION:
            self._try_send(
                chan, ErrorMsg(BadRequestError.code, f"unsupported version {first.version}")
            )
            return
        authed = False
        while True:
            msg = chan.recv()
            if msg is None:
                return
            try:
                if isinstance(msg, Auth):
                    self._do_auth(chan, msg)
                    authed = True
                elif isinstance(msg, Pull):
                    # carries its own capability; no session auth required
                    self._do_pull(chan, msg)
                elif isinstance(msg, Credit):
                    pass  # late replenishment after a finished stream
                elif isinstance(msg, (Get, Cook, CookPublish, PutBegin)):
                    if not authed:
                        raise BadRequestError("authenticate before data-plane requests")
                    if isinstance(msg, Get):
                        self._do_get(chan, msg)
                    elif isinstance(msg, Cook):
                        self._do_cook(chan, msg)
                    elif isinstance(msg, CookPublish):
                        self._do_cook_publish(chan, msg)
                    else:
                        self._do_put(chan, msg)
                else:
                    raise ProtocolError(f"unexpected frame {type(msg).__name__}")
            except AuthFailedError as exc:
                self._try_send(chan, ErrorMsg(exc.code, str(exc)))
                return
            except ProtocolError:
                raise
            except DacpError as exc:
                # request-level rejection: report and keep the connection
                log.info("event=reject peer=%s code=%d msg=%s", chan.peer, exc.code, exc)
                self._try_send(chan, ErrorMsg(exc.code, str(exc)))

    # -- request handlers

    def _do_auth(self, chan: FrameChannel, msg: Auth) -> None:
        if msg.method == AUTH_ANONYMOUS:
            principal = None
        elif msg.method == AUTH_BASIC:
            if not self.users.verify(msg.username, msg.password):
                raise AuthFailedError("bad credentials")
            principal = msg.username
        else:
            raise BadRequestError(f"unsupported auth method {msg.method}")
        token, expiry = self.tokens.issue(principal, self.token_ttl)
        chan.send(AuthOk(token, expiry))
        log.info("event=auth peer=%s principal=%s", chan.peer, principal or "anonymous")

    def _session_token(self, token: str) -> TokenRecord:
        rec = self.tokens.check(token)
        if rec.scope != "session":
            raise ForbiddenError("stream-scoped token not valid for this request")
        return rec

    def _do_get(self, chan: FrameChannel, msg: Get) -> None:
        rec = self._session_token(msg.token)
        pred = parse_predicate(msg.predicate) if msg.predicate is not None else None
        node = DagNode("get", GetSource(msg.uri, msg.projection, pred))
        task = plan(DagTask({"get": node}, "get"))
        log.info("event=get peer=%s uri=%s", chan.peer, msg.uri)
        self._run_stream(chan, task, rec.principal, msg.initial_credit)

    def _do_cook(self, chan: FrameChannel, msg: Cook) -> None:
        rec = self._session_token(msg.token)
        task = parse_dag(msg.dag)
        self._check_local_sources(task)
        planned = plan(task)
        log.info("event=cook peer=%s nodes=%d", chan.peer, len(task.nodes))
        self._run_stream(chan, planned, rec.principal, msg.initial_credit)

    def _do_cook_publish(self, chan: FrameChannel, msg: CookPublish) -> None:
        rec = self._session_token(msg.token)
        if not 1 <= msg.ttl_seconds <= MAX_PUBLISH_TTL:
            raise BadRequestError(f"ttl_seconds must be in 1..{MAX_PUBLISH_TTL}")
        task = parse_dag(msg.dag)
        self._check_local_sources(task)
        planned = plan(task)
        ctx = ServerExecutionContext(self.store, rec.principal)
        schema = infer_schema(planned, ctx.source_schema)
        stream_id, token, expiry = self.published.register(
            planned, schema, msg.ttl_seconds, rec.principal
        )
        chan.send(PublishOk(stream_id, token, expiry, schema))
        log.info("event=publish peer=%s stream=%s ttl=%d", chan.peer, stream_id, msg.ttl_seconds)

    def _do_pull(self, chan: FrameChannel, msg: Pull) -> None:
        entry = self.published.claim(msg.stream_id, msg.stream_token)
        log.info("event=pull peer=%s stream=%s", chan.peer, msg.stream_id)
        self._run_stream(
            chan,
            entry.task,
            entry.principal,
            msg.initial_credit,
            expect_schema=entry.schema,
        )

    def _check_local_sources(self, task: DagTask) -> None:
        for node in task.sources():
            if isinstance(node.kind, GetSource):
                parsed = parse_uri(node.kind.uri)
                if parsed.endpoint != self.endpoint:
                    raise BadRequestError(
                        f"node {node.id!r}: source {parsed.endpoint} is not local to "
                        f"this server ({self.endpoint})"
                    )

    # -- streaming with credit control

    def _run_stream(
        self,
        chan: FrameChannel,
        task: DagTask,
        principal: Optional[str],
        initial_credit: int,
        expect_schema: Optional[Schema] = None,
    ) -> None:
        ctx = ServerExecutionContext(self.store, principal)
        sdf = execute(task, ctx)
        if expect_schema is not None and sdf.schema != expect_schema:
            sdf.close()
            raise DacpTypeError("source schema changed since the stream was published")
        chan.send(SchemaMsg(sdf.schema))
        self._pump(chan, sdf, initial_credit)

    def _pump(self, chan: FrameChannel, sdf: StreamingDataFrame, initial_credit: int) -> None:
        credit = initial_credit if initial_credit > 0 else DEFAULT_INITIAL_CREDIT
        total_rows = 0
        try:
            for batch in sdf.batches():
                for payload in encode_batch_frames(batch, self.frame_cap):
                    credit = self._await_credit(chan, credit)
                    chan.send(BatchMsg(payload))
                    credit -= 1
                total_rows += batch.row_count
            chan.send(EndStream(total_rows))
        except _CloseConnection:
            sdf.close()
            raise
        except DacpError as exc:
            sdf.close()
            log.info("event=stream_error peer=%s code=%d msg=%s", chan.peer, exc.code, exc)
            self._try_send(chan, ErrorMsg(exc.code, str(exc)))
            raise _CloseConnection() from None
        except (OSError, ConnectionError):
            sdf.close()
            raise _CloseConnection() from None
        except Exception:
            sdf.close()
            log.exception("event=stream_crash peer=%s", chan.peer)
            self._try_send(chan, ErrorMsg(InternalError.code, "internal error"))
            raise _CloseConnection() from None

    def _await_credit(self, chan: FrameChannel, credit: int) -> int:
        while credit == 0:
            msg = chan.recv()
            if msg is None:
                raise _CloseConnection()  # consumer abandoned the stream
            if isinstance(msg, Credit):
                credit += msg.additional
            else:
                raise ProtocolError(
                    f"only CREDIT is valid while streaming, got {type(msg).__name__}"
                )
        return credit

    # -- PUT

    def _do_put(self, chan: FrameChannel, msg: PutBegin) -> None:
        rec = self._session_token(msg.token)
        if rec.principal is None:
            parsed = parse_uri(msg.uri)
            if parsed.dataset:
                entry = self.registry.get(parsed.dataset)
                if entry.access == "authenticated":
                    raise ForbiddenError(f"dataset {entry.name!r} requires authentication")
        writer = self.store.begin_put(parse_uri(msg.uri), msg.schema)
        log.info("event=put_begin peer=%s uri=%s", chan.peer, msg.uri)
        try:
            while True:
                frame = chan.recv()
                if frame is None:
                    writer.abort()
                    return
                if isinstance(frame, BatchMsg):
                    batch = decode_batch(frame.payload, msg.schema)
                    writer.write_batch(batch)
                elif isinstance(frame, EndStream):
                    rows = writer.commit()
                    chan.send(PutAck(rows))
                    log.info("event=put_done peer=%s uri=%s rows=%d", chan.peer, msg.uri, rows)
                    return
                else:
                    raise ProtocolError(
                        f"only BATCH/END_STREAM are valid during PUT, got {type(frame).__name__}"
                    )
        except DacpError as exc:
            writer.abort()
            self._try_send(chan, ErrorMsg(exc.code, str(exc)))
            raise _CloseConnection() from None
        except (OSError, ConnectionError):
            writer.abort()
            raise _CloseConnection() from None


# ---------------------------------------------------------------------------
# helpers for building registries in code (tests, harness, examples)


def make_registry(entries: list[dict[str, Any]]) -> DatasetRegistry:
    """Build a registry from plain dicts: {"name", "root", ...}."""
    return DatasetRegistry(
        [
            DatasetEntry(
                name=e["name"],
                root=Path(e["root"]),
                description=e.get("description", ""),
                access=e.get("access", "public"),
                writable=bool(e.get("writable", False)),
            )
            for e in entries
        ]
    )
