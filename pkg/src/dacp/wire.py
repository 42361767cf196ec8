"""Bit-exact wire codec for all protocol messages.

Frame layout: ``[length u32 LE][msg_type u8][payload]`` where ``length``
counts the type byte plus the payload and must not exceed the 16 MiB cap.
All multi-byte integers are little-endian, all text is UTF-8 with a u32
length prefix, and there is no alignment padding anywhere.

Schema payload: ``[field_count u16]`` then per field
``[name: u32 len + UTF-8][dtype u8][nullable u8]``.

Batch payload: ``[row_count u32]`` then, per column in schema order, a
validity bitmap of ceil(n/8) bytes (LSB-first, bit j of byte j//8 is row
j, pad bits zero) followed by the data region:

* Bool: a second ceil(n/8)-byte LSB-first bitmap;
* Int32/Int64/Float32/Float64: n fixed-width little-endian values;
* Utf8/Binary: (n+1) u32 offsets (offsets[0] = 0, non-decreasing, tight)
  then offsets[n] bytes of concatenated values (null rows zero-length);
* BlobRef: variable-width like Binary where each value is
  ``[size_bytes u64][uri UTF-8]``.

Encoding is canonical (zero pad bits, zeroed null slots, tight offsets);
decoding normalizes rather than rejects non-canonical null slots.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

from dacp import kernels
from dacp.errors import (
    DacpTypeError,
    FrameTooLarge,
    MalformedBatch,
    MalformedFrame,
    MalformedSchema,
)
from dacp.sdf import (
    MAX_BATCH_ROWS,
    BlobRef,
    Column,
    DataType,
    Field,
    RecordBatch,
    Schema,
    _check_blob_ref,
)

FRAME_CAP = 16 * 1024 * 1024
FRAME_HEADER = 5  # length u32 + type u8
MAGIC = b"DACP"
PROTOCOL_VERSION = 1

MSG_HELLO = 0x01
MSG_AUTH = 0x02
MSG_AUTH_OK = 0x03
MSG_GET = 0x04
MSG_PUT_BEGIN = 0x05
MSG_COOK = 0x06
MSG_COOK_PUBLISH = 0x07
MSG_SCHEMA = 0x10
MSG_BATCH = 0x11
MSG_END_STREAM = 0x12
MSG_CREDIT = 0x13
MSG_ERROR = 0x14
MSG_PUT_ACK = 0x15
MSG_PUBLISH_OK = 0x16
MSG_PULL = 0x20

AUTH_ANONYMOUS = 0
AUTH_BASIC = 1

GET_FLAG_PROJECTION = 0x01
GET_FLAG_PREDICATE = 0x02


# ---------------------------------------------------------------------------
# message objects


@dataclass(frozen=True)
class Hello:
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Auth:
    method: int = AUTH_ANONYMOUS
    username: str = ""
    password: str = ""


@dataclass(frozen=True)
class AuthOk:
    token: str
    expiry: int


@dataclass(frozen=True)
class Get:
    token: str
    uri: str
    projection: Optional[tuple[str, ...]] = None
    predicate: Optional[str] = None
    initial_credit: int = 0


@dataclass(frozen=True)
class PutBegin:
    token: str
    uri: str
    schema: Schema


@dataclass(frozen=True)
class Cook:
    token: str
    dag: str
    initial_credit: int = 0


@dataclass(frozen=True)
class CookPublish:
    token: str
    dag: str
    ttl_seconds: int


@dataclass(frozen=True)
class SchemaMsg:
    schema: Schema


@dataclass(frozen=True)
class BatchMsg:
    """Raw batch payload; decoding needs the stream's schema."""

    payload: bytes = field(repr=False)


@dataclass(frozen=True)
class EndStream:
    total_rows: int


@dataclass(frozen=True)
class Credit:
    additional: int


@dataclass(frozen=True)
class ErrorMsg:
    code: int
    message: str


@dataclass(frozen=True)
class PutAck:
    rows_written: int


@dataclass(frozen=True)
class PublishOk:
    stream_id: str
    stream_token: str
    expiry: int
    schema: Schema


@dataclass(frozen=True)
class Pull:
    stream_id: str
    stream_token: str
    initial_credit: int = 0


Message = (
    Hello
    | Auth
    | AuthOk
    | Get
    | PutBegin
    | Cook
    | CookPublish
    | SchemaMsg
    | BatchMsg
    | EndStream
    | Credit
    | ErrorMsg
    | PutAck
    | PublishOk
    | Pull
)


# ---------------------------------------------------------------------------
# cursor helpers


class _Reader:
    """Bounds-checked cursor over one payload; never reads past the end."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise MalformedFrame("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        n = self.u32()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame(f"invalid UTF-8 in string: {exc}") from None

    def rest(self) -> bytes:
        return self.take(len(self.buf) - self.pos)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedFrame(f"{len(self.buf) - self.pos} trailing bytes in payload")


def _w_text(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    out += struct.pack("<I", len(raw))
    out += raw


# ---------------------------------------------------------------------------
# schema codec


def encode_schema(schema: Schema) -> bytes:
    out = bytearray(struct.pack("<H", len(schema.fields)))
    for f in schema.fields:
        _w_text(out, f.name)
        out.append(int(f.dtype))
        out.append(1 if f.nullable else 0)
    return bytes(out)


def _read_schema(r: _Reader) -> Schema:
    count = r.u16()
    fields = []
    for _ in range(count):
        try:
            name = r.text()
        except MalformedFrame as exc:
            raise MalformedSchema(str(exc)) from None
        tag = r.u8()
        nullable = r.u8()
        if nullable not in (0, 1):
            raise MalformedSchema(f"nullable flag must be 0 or 1, got {nullable}")
        try:
            dtype = DataType(tag)
        except ValueError:
            raise MalformedSchema(f"unknown dtype tag 0x{tag:02x}") from None
        try:
            fields.append(Field(name, dtype, bool(nullable)))
        except ValueError as exc:
            raise MalformedSchema(str(exc)) from None
    try:
        return Schema(fields)
    except ValueError as exc:
        raise MalformedSchema(str(exc)) from None


def decode_schema(buf: bytes) -> Schema:
    r = _Reader(buf)
    try:
        schema = _read_schema(r)
        r.done()
    except MalformedFrame as exc:
        raise MalformedSchema(str(exc)) from None
    return schema


# ---------------------------------------------------------------------------
# batch codec


def encode_batch(batch: RecordBatch) -> bytes:
    """Encode a validated batch into its canonical byte form."""
    n = batch.row_count
    out = bytearray(struct.pack("<I", n))
    for col in batch.columns:
        values = col.values
        out += kernels.pack_validity(values, n)
        dt = col.dtype
        if dt == DataType.BOOL:
            out += kernels.pack_bools(values, n)
        elif dt == DataType.INT32:
            out += kernels.pack_int32(values, n)
        elif dt == DataType.INT64:
            out += kernels.pack_int64(values, n)
        elif dt == DataType.FLOAT32:
            out += kernels.pack_float32(values, n)
        elif dt == DataType.FLOAT64:
            out += kernels.pack_float64(values, n)
        else:
            chunks = _varwidth_chunks(dt, values)
            try:
                out += kernels.build_offsets([len(c) for c in chunks])
            except ValueError as exc:
                raise MalformedBatch(str(exc)) from None
            for c in chunks:
                out += c
    return bytes(out)


def _varwidth_chunks(dt: DataType, values: tuple) -> list[bytes]:
    if dt == DataType.UTF8:
        return [b"" if v is None else v.encode("utf-8") for v in values]
    if dt == DataType.BINARY:
        return [b"" if v is None else v for v in values]
    # BlobRef: [size u64][uri]
    return [
        b"" if v is None else struct.pack("<Q", v.size_bytes) + v.uri.encode("utf-8")
        for v in values
    ]


def decode_batch(buf: bytes, schema: Schema) -> RecordBatch:
    """Decode a batch payload against its stream schema.

    Structural damage raises MalformedBatch; a null in a non-nullable
    column raises DacpTypeError (the batch contradicts the schema).
    """
    r = _Reader(buf)
    try:
        n = r.u32()
        if not 1 <= n <= MAX_BATCH_ROWS:
            raise MalformedBatch(f"row count {n} outside 1..{MAX_BATCH_ROWS}")
        nb = (n + 7) // 8
        columns = []
        for f in schema.fields:
            validity = r.take(nb)
            present = kernels.count_set(validity, n)
            if not f.nullable and present != n:
                raise DacpTypeError(f"column {f.name!r}: null in non-nullable column")
            dt = f.dtype
            if dt == DataType.BOOL:
                values = kernels.unpack_bools(r.take(nb), n, validity)
            elif dt == DataType.INT32:
                values = kernels.unpack_int32(r.take(4 * n), n, validity)
            elif dt == DataType.INT64:
                values = kernels.unpack_int64(r.take(8 * n), n, validity)
            elif dt == DataType.FLOAT32:
                values = kernels.unpack_float32(r.take(4 * n), n, validity)
            elif dt == DataType.FLOAT64:
                values = kernels.unpack_float64(r.take(8 * n), n, validity)
            else:
                values = _decode_varwidth(r, dt, n, validity, f.name)
            columns.append(Column(dt, values))
        r.done()
    except MalformedFrame as exc:
        raise MalformedBatch(str(exc)) from None
    return RecordBatch(schema, columns, validate=False)


def _decode_varwidth(r: _Reader, dt: DataType, n: int, validity: bytes, name: str) -> list:
    try:
        offsets = kernels.parse_offsets(r.take(4 * (n + 1)), n)
    except ValueError as exc:
        raise MalformedBatch(f"column {name!r}: {exc}") from None
    data = r.take(offsets[n])
    flags = kernels.unpack_flags(validity, n)
    values: list = [None] * n
    for i in range(n):
        if not flags[i]:
            continue  # non-canonical content in null slots is dropped
        chunk = data[offsets[i] : offsets[i + 1]]
        if dt == DataType.UTF8:
            try:
                values[i] = chunk.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedBatch(f"column {name!r}: invalid UTF-8: {exc}") from None
        elif dt == DataType.BINARY:
            values[i] = chunk
        else:
            if len(chunk) < 8:
                raise MalformedBatch(f"column {name!r}: blob ref shorter than its size field")
            size = struct.unpack("<Q", chunk[:8])[0]
            try:
                uri = chunk[8:].decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedBatch(f"column {name!r}: invalid UTF-8 in blob uri: {exc}") from None
            ref = BlobRef(uri, size)
            if not _check_blob_ref(ref):
                raise MalformedBatch(f"column {name!r}: invalid blob reference {uri!r}")
            values[i] = ref
    return values


def encode_batch_frames(batch: RecordBatch, cap: int = FRAME_CAP) -> Iterator[bytes]:
    """Encode a batch as one or more BATCH payloads, splitting rows so that
    no frame exceeds the cap. A single unsplittable row raises FrameTooLarge."""
    data = encode_batch(batch)
    if len(data) <= cap - 1:
        yield data
        return
    if batch.row_count == 1:
        raise FrameTooLarge("a single row exceeds the frame cap")
    mid = batch.row_count // 2
    yield from encode_batch_frames(batch.slice(0, mid), cap)
    yield from encode_batch_frames(batch.slice(mid, batch.row_count), cap)


# ---------------------------------------------------------------------------
# message codec


def _enc_hello(m: Hello, out: bytearray) -> None:
    out += MAGIC
    out += struct.pack("<H", m.version)


def _dec_hello(r: _Reader) -> Hello:
    magic = r.take(4)
    if magic != MAGIC:
        raise MalformedFrame(f"bad magic {magic!r}")
    return Hello(version=r.u16())


def _enc_auth(m: Auth, out: bytearray) -> None:
    out.append(m.method)
    if m.method == AUTH_BASIC:
        _w_text(out, m.username)
        _w_text(out, m.password)


def _dec_auth(r: _Reader) -> Auth:
    method = r.u8()
    if method == AUTH_ANONYMOUS:
        return Auth(method=method)
    if method == AUTH_BASIC:
        return Auth(method=method, username=r.text(), password=r.text())
    raise MalformedFrame(f"unknown auth method {method}")


def _enc_auth_ok(m: AuthOk, out: bytearray) -> None:
    _w_text(out, m.token)
    out += struct.pack("<Q", m.expiry)


def _dec_auth_ok(r: _Reader) -> AuthOk:
    return AuthOk(token=r.text(), expiry=r.u64())


def _enc_get(m: Get, out: bytearray) -> None:
    _w_text(out, m.token)
    _w_text(out, m.uri)
    flags = 0
    if m.projection is not None:
        flags |= GET_FLAG_PROJECTION
    if m.predicate is not None:
        flags |= GET_FLAG_PREDICATE
    out.append(flags)
    if m.projection is not None:
        out += struct.pack("<H", len(m.projection))
        for name in m.projection:
            _w_text(out, name)
    if m.predicate is not None:
        _w_text(out, m.predicate)
    out += struct.pack("<I", m.initial_credit)


def _dec_get(r: _Reader) -> Get:
    token = r.text()
    uri = r.text()
    flags = r.u8()
    if flags & ~(GET_FLAG_PROJECTION | GET_FLAG_PREDICATE):
        raise MalformedFrame(f"unknown GET flags 0x{flags:02x}")
    projection = None
    if flags & GET_FLAG_PROJECTION:
        projection = tuple(r.text() for _ in range(r.u16()))
    predicate = r.text() if flags & GET_FLAG_PREDICATE else None
    return Get(token, uri, projection, predicate, r.u32())


def _enc_put_begin(m: PutBegin, out: bytearray) -> None:
    _w_text(out, m.token)
    _w_text(out, m.uri)
    out += encode_schema(m.schema)


def _dec_put_begin(r: _Reader) -> PutBegin:
    token = r.text()
    uri = r.text()
    return PutBegin(token, uri, decode_schema(r.rest()))


def _enc_cook(m: Cook, out: bytearray) -> None:
    _w_text(out, m.token)
    _w_text(out, m.dag)
    out += struct.pack("<I", m.initial_credit)


def _dec_cook(r: _Reader) -> Cook:
    return Cook(r.text(), r.text(), r.u32())


def _enc_cook_publish(m: CookPublish, out: bytearray) -> None:
    _w_text(out, m.token)
    _w_text(out, m.dag)
    out += struct.pack("<I", m.ttl_seconds)


def _dec_cook_publish(r: _Reader) -> CookPublish:
    return CookPublish(r.text(), r.text(), r.u32())


def _enc_schema_msg(m: SchemaMsg, out: bytearray) -> None:
    out += encode_schema(m.schema)


def _dec_schema_msg(r: _Reader) -> SchemaMsg:
    return SchemaMsg(decode_schema(r.rest()))


def _enc_batch_msg(m: BatchMsg, out: bytearray) -> None:
    out += m.payload


def _dec_batch_msg(r: _Reader) -> BatchMsg:
    return BatchMsg(r.rest())


def _enc_end_stream(m: EndStream, out: bytearray) -> None:
    out += struct.pack("<Q", m.total_rows)


def _dec_end_stream(r: _Reader) -> EndStream:
    return EndStream(r.u64())


def _enc_credit(m: Credit, out: bytearray) -> None:
    out += struct.pack("<I", m.additional)


def _dec_credit(r: _Reader) -> Credit:
    return Credit(r.u32())


def _enc_error(m: ErrorMsg, out: bytearray) -> None:
    out += struct.pack("<H", m.code)
    _w_text(out, m.message)


def _dec_error(r: _Reader) -> ErrorMsg:
    return ErrorMsg(r.u16(), r.text())


def _enc_put_ack(m: PutAck, out: bytearray) -> None:
    out += struct.pack("<Q", m.rows_written)


def _dec_put_ack(r: _Reader) -> PutAck:
    return PutAck(r.u64())


def _enc_publish_ok(m: PublishOk, out: bytearray) -> None:
    _w_text(out, m.stream_id)
    _w_text(out, m.stream_token)
    out += struct.pack("<Q", m.expiry)
    out += encode_schema(m.schema)


def _dec_publish_ok(r: _Reader) -> PublishOk:
    return PublishOk(r.text(), r.text(), r.u64(), decode_schema(r.rest()))


def _enc_pull(m: Pull, out: bytearray) -> None:
    _w_text(out, m.stream_id)
    _w_text(out, m.stream_token)
    out += struct.pack("<I", m.initial_credit)


def _dec_pull(r: _Reader) -> Pull:
    return Pull(r.text(), r.text(), r.u32())


_ENCODERS: dict[type, tuple[int, Callable]] = {
    Hello: (MSG_HELLO, _enc_hello),
    Auth: (MSG_AUTH, _enc_auth),
    AuthOk: (MSG_AUTH_OK, _enc_auth_ok),
    Get: (MSG_GET, _enc_get),
    PutBegin: (MSG_PUT_BEGIN, _enc_put_begin),
    Cook: (MSG_COOK, _enc_cook),
    CookPublish: (MSG_COOK_PUBLISH, _enc_cook_publish),
    SchemaMsg: (MSG_SCHEMA, _enc_schema_msg),
    BatchMsg: (MSG_BATCH, _enc_batch_msg),
    EndStream: (MSG_END_STREAM, _enc_end_stream),
    Credit: (MSG_CREDIT, _enc_credit),
    ErrorMsg: (MSG_ERROR, _enc_error),
    PutAck: (MSG_PUT_ACK, _enc_put_ack),
    PublishOk: (MSG_PUBLISH_OK, _enc_publish_ok),
    Pull: (MSG_PULL, _enc_pull),
}

_DECODERS: dict[int, Callable[[_Reader], Message]] = {
    MSG_HELLO: _dec_hello,
    MSG_AUTH: _dec_auth,
    MSG_AUTH_OK: _dec_auth_ok,
    MSG_GET: _dec_get,
    MSG_PUT_BEGIN: _dec_put_begin,
    MSG_COOK: _dec_cook,
    MSG_COOK_PUBLISH: _dec_cook_publish,
    MSG_SCHEMA: _dec_schema_msg,
    MSG_BATCH: _dec_batch_msg,
    MSG_END_STREAM: _dec_end_stream,
    MSG_CREDIT: _dec_credit,
    MSG_ERROR: _dec_error,
    MSG_PUT_ACK: _dec_put_ack,
    MSG_PUBLISH_OK: _dec_publish_ok,
    MSG_PULL: _dec_pull,
}

MESSAGE_TYPE_NAMES = {
    MSG_HELLO: "HELLO",
    MSG_AUTH: "AUTH",
    MSG_AUTH_OK: "AUTH_OK",
    MSG_GET: "GET",
    MSG_PUT_BEGIN: "PUT_BEGIN",
    MSG_COOK: "COOK",
    MSG_COOK_PUBLISH: "COOK_PUBLISH",
    MSG_SCHEMA: "SCHEMA",
    MSG_BATCH: "BATCH",
    MSG_END_STREAM: "END_STREAM",
    MSG_CREDIT: "CREDIT",
    MSG_ERROR: "ERROR",
    MSG_PUT_ACK: "PUT_ACK",
    MSG_PUBLISH_OK: "PUBLISH_OK",
    MSG_PULL: "PULL",
}


def message_type_of(msg: Message) -> int:
    return _ENCODERS[type(msg)][0]


def encode_frame(msg: Message, cap: int = FRAME_CAP) -> bytes:
    """Encode a message into a complete frame. Deterministic: identical
    messages encode to identical bytes."""
    msg_type, enc = _ENCODERS[type(msg)]
    payload = bytearray()
    enc(msg, payload)
    length = 1 + len(payload)
    if length > cap:
        raise FrameTooLarge(f"frame length {length} exceeds cap {cap}")
    return struct.pack("<IB", length, msg_type) + bytes(payload)


def decode_payload(msg_type: int, payload: bytes) -> Message:
    dec = _DECODERS.get(msg_type)
    if dec is None:
        raise MalformedFrame(f"unknown message type 0x{msg_type:02x}")
    r = _Reader(payload)
    msg = dec(r)
    r.done()
    return msg


class FrameDecoder:
    """Incremental frame reassembly: feed arbitrary byte chunks, pull
    complete messages. Partial frames are retained across feeds."""

    def __init__(self, cap: int = FRAME_CAP):
        self.cap = cap
        self._buf = bytearray()
        self.last_payload_len = 0

    def push(self, data: bytes) -> None:
        self._buf += data

    def next_message(self) -> Optional[Message]:
        """Decode one message if fully buffered, else None."""
        if len(self._buf) < 4:
            return None
        length = struct.unpack_from("<I", self._buf)[0]
        if length < 1:
            raise MalformedFrame(f"frame length {length} < 1")
        if length > self.cap:
            raise MalformedFrame(f"frame length {length} exceeds cap {self.cap}")
        if len(self._buf) < 4 + length:
            return None
        msg_type = self._buf[4]
        payload = bytes(self._buf[5 : 4 + length])
        del self._buf[: 4 + length]
        self.last_payload_len = len(payload)
        return decode_payload(msg_type, payload)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


def decode_frames(chunks: Iterable[bytes], cap: int = FRAME_CAP) -> Iterator[Message]:
    """Decode a byte stream (any chunking) into its message sequence.

    Raises MalformedFrame on damage, including a truncated trailing frame.
    """
    dec = FrameDecoder(cap)
    for chunk in chunks:
        dec.push(chunk)
        while True:
            msg = dec.next_message()
            if msg is None:
                break
            yield msg
    if dec.pending_bytes:
        raise MalformedFrame("truncated frame at end of stream")
