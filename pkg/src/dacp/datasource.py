"""Maps physical storage (CSV files, raw binary files, directories) into
logical streaming data frames under a dataset registry.

Directories use file-list framing: one row per direct child file with a
fixed metadata schema and an expandable blob-reference column. CSV files
stream with schema inference over the first 1000 data rows, or with the
exact declared schema when a ``<file>.schema`` sidecar (written by PUT)
is present. Raw binary files stream as fixed-size chunks.

CSV dialect is RFC-4180 (header required, UTF-8). A bare empty cell is a
null; a quoted empty cell ``""`` is an empty string (empty Binary). Binary
cells are base64 text; blob-reference cells are JSON objects.
"""

from __future__ import annotations

import base64
import codecs
import json
import os
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Sequence

from dacp.errors import (
    BadRequestError,
    DacpTypeError,
    ForbiddenError,
    InternalError,
    NotFoundError,
)
from dacp.sdf import (
    DEFAULT_BATCH_SIZE,
    BlobRef,
    DataType,
    Field,
    RecordBatch,
    Schema,
    StreamingDataFrame,
)
from dacp.uri import DATASET_NAME_RE, ParsedUri, make_uri, parse_uri

INFERENCE_SAMPLE_ROWS = 1000
DEFAULT_CHUNK_SIZE = 1024 * 1024
SIDECAR_SUFFIX = ".schema"

FILE_LIST_SCHEMA = Schema(
    [
        Field("name", DataType.UTF8),
        Field("path", DataType.UTF8),
        Field("format", DataType.UTF8),
        Field("size_bytes", DataType.INT64),
        Field("modified_unix", DataType.INT64),
        Field("content", DataType.BLOB_REF),
    ]
)

BINARY_CHUNK_SCHEMA = Schema(
    [
        Field("chunk_index", DataType.INT64),
        Field("data", DataType.BINARY),
    ]
)


class ResourceKind(Enum):
    CSV_FILE = "csv"
    BINARY_FILE = "binary"
    DIRECTORY = "directory"


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    root: Path
    description: str = ""
    access: str = "public"  # public | authenticated
    writable: bool = False


@dataclass(frozen=True)
class ResolvedResource:
    kind: ResourceKind
    path: Path
    dataset: DatasetEntry
    rel_path: str  # dataset-relative, "" for the root


class DatasetRegistry:
    """Named dataset roots with access levels; reloadable atomically."""

    def __init__(self, entries: Sequence[DatasetEntry]):
        self._lock = threading.Lock()
        self._entries = self._index(entries)

    @staticmethod
    def _index(entries: Sequence[DatasetEntry]) -> dict[str, DatasetEntry]:
        out: dict[str, DatasetEntry] = {}
        for e in entries:
            if not DATASET_NAME_RE.match(e.name):
                raise BadRequestError(f"invalid dataset name {e.name!r}")
            if e.name in out:
                raise BadRequestError(f"duplicate dataset name {e.name!r}")
            if e.access not in ("public", "authenticated"):
                raise BadRequestError(f"dataset {e.name!r}: bad access {e.access!r}")
            if not e.root.is_dir():
                raise BadRequestError(f"dataset {e.name!r}: root {e.root} does not exist")
            out[e.name] = e
        return out

    @classmethod
    def from_file(cls, path: str | Path) -> "DatasetRegistry":
        path = Path(path)
        try:
            doc = json.loads(path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BadRequestError(f"cannot load dataset registry {path}: {exc}") from None
        return cls(_entries_from_doc(doc, path.parent))

    def reload(self, entries: Sequence[DatasetEntry]) -> None:
        table = self._index(entries)
        with self._lock:
            self._entries = table

    def get(self, name: str) -> DatasetEntry:
        with self._lock:
            entry = self._entries.get(name)
        if entry is None:
            raise NotFoundError(f"unknown dataset {name!r}")
        return entry

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)


def _entries_from_doc(doc: Any, base: Path) -> list[DatasetEntry]:
    if not isinstance(doc, dict) or not isinstance(doc.get("datasets"), list):
        raise BadRequestError("registry document must be {'datasets': [...]}")
    entries = []
    for obj in doc["datasets"]:
        if not isinstance(obj, dict) or not isinstance(obj.get("name"), str):
            raise BadRequestError("each dataset needs at least a 'name'")
        root = Path(obj.get("root", ""))
        if not root.is_absolute():
            root = base / root
        entries.append(
            DatasetEntry(
                name=obj["name"],
                root=root,
                description=obj.get("description", ""),
                access=obj.get("access", "public"),
                writable=bool(obj.get("writable", False)),
            )
        )
    return entries


def resolve(uri: str | ParsedUri, registry: DatasetRegistry) -> ResolvedResource:
    """Resolve a URI against the registry. The host:port part is not
    re-checked here; the server already owns the connection."""
    parsed = parse_uri(uri) if isinstance(uri, str) else uri
    if parsed.dataset is None:
        raise NotFoundError("URI names no dataset")
    entry = registry.get(parsed.dataset)
    root = entry.root.resolve()
    target = root
    for seg in parsed.path.split("/") if parsed.path else []:
        if seg in (".", ".."):
            raise ForbiddenError(f"path escapes dataset root: {parsed.path!r}")
        target = target / seg
    target = target.resolve()
    if target != root and root not in target.parents:
        raise ForbiddenError(f"path escapes dataset root: {parsed.path!r}")
    if not target.exists():
        raise NotFoundError(f"no such resource: {parsed.dataset}/{parsed.path}")
    if target.is_dir():
        kind = ResourceKind.DIRECTORY
    elif target.suffix.lower() == ".csv":
        kind = ResourceKind.CSV_FILE
    else:
        kind = ResourceKind.BINARY_FILE
    return ResolvedResource(kind, target, entry, parsed.path)


# ---------------------------------------------------------------------------
# CSV cell rendering / parsing

_INT_RE = re.compile(r"^[+-]?[0-9]+$")
_FLOAT_RE = re.compile(r"^[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?$")


def render_cell(value: Any) -> tuple[str, bool]:
    """Render a cell to CSV text; the flag forces quoting (used to keep an
    empty string distinct from a null, which renders as a bare empty cell)."""
    if value is None:
        return "", False
    if isinstance(value, bool):
        return ("true" if value else "false"), False
    if isinstance(value, (int, float)):
        return repr(value) if isinstance(value, float) else str(value), False
    if isinstance(value, str):
        return value, value == ""
    if isinstance(value, bytes):
        text = base64.b64encode(value).decode("ascii")
        return text, value == b""
    if isinstance(value, BlobRef):
        return json.dumps({"uri": value.uri, "size_bytes": value.size_bytes}), False
    raise InternalError(f"cannot render {type(value).__name__} to CSV")


def _quote(text: str, force: bool) -> str:
    if force or any(c in text for c in ',"\r\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def format_csv_row(cells: Sequence[tuple[str, bool]]) -> str:
    return ",".join(_quote(text, force) for text, force in cells)


def _typed_cell(text: str, quoted: bool, field: Field) -> Any:
    """Parse a CSV cell under a declared field type."""
    if text == "" and not quoted:
        if not field.nullable:
            raise DacpTypeError(f"column {field.name!r}: null in non-nullable column")
        return None
    dt = field.dtype
    try:
        if dt in (DataType.INT32, DataType.INT64):
            return int(text)
        if dt in (DataType.FLOAT32, DataType.FLOAT64):
            return float(text)
        if dt == DataType.BOOL:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if dt == DataType.UTF8:
            return text
        if dt == DataType.BINARY:
            return base64.b64decode(text.encode("ascii"), validate=True)
        obj = json.loads(text)
        return BlobRef(obj["uri"], int(obj["size_bytes"]))
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DacpTypeError(
            f"column {field.name!r}: cell {text!r} is not a valid {dt.name}"
        ) from None


# ---------------------------------------------------------------------------
# streaming CSV records


class _CountingFile:
    """Binary file wrapper that counts bytes actually read from disk."""

    def __init__(self, path: Path, stats: Optional["StoreStats"]):
        self._f = open(path, "rb")
        self._stats = stats

    def read(self, n: int = -1) -> bytes:
        data = self._f.read(n)
        if self._stats is not None:
            self._stats.add_bytes(len(data))
        return data

    def readable(self) -> bool:
        return True

    def close(self) -> None:
        self._f.close()


class _RecordReader:
    """Incremental RFC-4180 record reader.

    Yields (cells, quoted_flags) per record. Quoted cells may span lines;
    a record is complete when its double-quote count is even.
    """

    def __init__(self, raw: _CountingFile, read_chunk: int = 32 * 1024):
        self._raw = raw
        self._chunk = read_chunk
        self._buf = ""
        self._eof = False
        self._decoder = codecs.getincrementaldecoder("utf-8")()

    def _fill(self) -> bool:
        if self._eof:
            return False
        data = self._raw.read(self._chunk)
        try:
            if not data:
                self._eof = True
                self._decoder.decode(b"", final=True)
                return False
            self._buf += self._decoder.decode(data)
        except UnicodeDecodeError as exc:
            raise DacpTypeError(f"CSV is not valid UTF-8: {exc}") from None
        return True

    def _next_line(self) -> Optional[str]:
        """One physical line including its newline, or None at EOF."""
        while True:
            idx = self._buf.find("\n")
            if idx >= 0:
                line = self._buf[: idx + 1]
                self._buf = self._buf[idx + 1 :]
                return line
            if not self._fill():
                if self._buf:
                    line, self._buf = self._buf, ""
                    return line
                return None

    def next_record(self) -> Optional[tuple[list[str], list[bool]]]:
        line = self._next_line()
        if line is None:
            return None
        while line.count('"') % 2 == 1:
            cont = self._next_line()
            if cont is None:
                raise DacpTypeError("CSV ends inside a quoted cell")
            line += cont
        # the final newline is outside any quoted cell (quote parity is even)
        record = line
        if record.endswith("\n"):
            record = record[:-1]
            if record.endswith("\r"):
                record = record[:-1]
        if '"' not in record:
            cells = record.split(",")
            return cells, [False] * len(cells)
        return _split_quoted(record)

    def close(self) -> None:
        self._raw.close()


def _split_quoted(record: str) -> tuple[list[str], list[bool]]:
    cells: list[str] = []
    quoted: list[bool] = []
    i, n = 0, len(record)
    while True:
        if i < n and record[i] == '"':
            i += 1
            out = []
            while True:
                if i >= n:
                    raise DacpTypeError("unterminated quoted CSV cell")
                c = record[i]
                if c == '"':
                    if i + 1 < n and record[i + 1] == '"':
                        out.append('"')
                        i += 2
                        continue
                    i += 1
                    break
                out.append(c)
                i += 1
            cells.append("".join(out))
            quoted.append(True)
        else:
            j = record.find(",", i)
            end = n if j < 0 else j
            cells.append(record[i:end])
            quoted.append(False)
            i = end
        if i >= n:
            return cells, quoted
        if record[i] != ",":
            raise DacpTypeError(f"malformed CSV near offset {i}")
        i += 1


# ---------------------------------------------------------------------------
# schema inference


class _ColumnGuess:
    __slots__ = ("could_int", "could_float", "could_bool", "saw_null")

    def __init__(self) -> None:
        self.could_int = True
        self.could_float = True
        self.could_bool = True
        self.saw_null = False

    def observe(self, text: str, is_quoted: bool) -> None:
        if text == "" and not is_quoted:
            self.saw_null = True
            return
        if self.could_int and not _INT_RE.match(text):
            self.could_int = False
        if self.could_float and not _FLOAT_RE.match(text):
            self.could_float = False
        if self.could_bool and text.lower() not in ("true", "false"):
            self.could_bool = False

    def field(self, name: str) -> Field:
        if self.could_int:
            dtype = DataType.INT64
        elif self.could_float:
            dtype = DataType.FLOAT64
        elif self.could_bool:
            dtype = DataType.BOOL
        else:
            dtype = DataType.UTF8
        return Field(name, dtype, nullable=self.saw_null)


def _load_sidecar(path: Path) -> Optional[Schema]:
    sidecar = path.with_name(path.name + SIDECAR_SUFFIX)
    if not sidecar.is_file():
        return None
    try:
        doc = json.loads(sidecar.read_text("utf-8"))
        fields = [
            Field(f["name"], DataType[f["dtype"]], bool(f["nullable"]))
            for f in doc["fields"]
        ]
        return Schema(fields)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InternalError(f"corrupt schema sidecar {sidecar}: {exc}") from None


def _sidecar_doc(schema: Schema) -> str:
    return json.dumps(
        {
            "fields": [
                {"name": f.name, "dtype": f.dtype.name, "nullable": f.nullable}
                for f in schema.fields
            ]
        }
    )


# ---------------------------------------------------------------------------
# store


class StoreStats:
    """Observability counters used by tests and the cluster harness."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.sources_opened = 0
        self.source_batches = 0
        self.bytes_read = 0

    def add_open(self) -> None:
        with self._lock:
            self.sources_opened += 1

    def add_batch(self) -> None:
        with self._lock:
            self.source_batches += 1

    def add_bytes(self, n: int) -> None:
        with self._lock:
            self.bytes_read += n


class LocalStore:
    """Opens dataset resources as streaming data frames and persists PUT
    uploads. ``endpoint`` is the advertised host:port used to mint blob
    reference URIs in directory listings."""

    def __init__(
        self,
        registry: DatasetRegistry,
        endpoint: str,
        batch_size: int = DEFAULT_BATCH_SIZE,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
    ):
        self.registry = registry
        self.endpoint = endpoint
        self.batch_size = batch_size
        self.chunk_size = chunk_size
        self.stats = StoreStats()

    # -- schema-only inspection (bounded metadata reads, no batch production)

    def schema_of(self, resource: ResolvedResource) -> Schema:
        if resource.kind == ResourceKind.DIRECTORY:
            return FILE_LIST_SCHEMA
        if resource.kind == ResourceKind.BINARY_FILE:
            return BINARY_CHUNK_SCHEMA
        sidecar = _load_sidecar(resource.path)
        if sidecar is not None:
            return sidecar
        reader = _RecordReader(_CountingFile(resource.path, self.stats))
        try:
            schema, _, _ = self._infer(reader)
        finally:
            reader.close()
        return schema

    # -- opening

    def open_resource(self, resource: ResolvedResource) -> StreamingDataFrame:
        self.stats.add_open()
        if resource.kind == ResourceKind.DIRECTORY:
            sdf = self.open_directory(resource)
        elif resource.kind == ResourceKind.CSV_FILE:
            sdf = self.open_csv(resource)
        else:
            sdf = self.open_binary(resource)
        return self._counted(sdf)

    def _counted(self, sdf: StreamingDataFrame) -> StreamingDataFrame:
        inner = sdf.batches()

        def gen() -> Iterator[RecordBatch]:
            for batch in inner:
                self.stats.add_batch()
                yield batch

        return StreamingDataFrame(sdf.schema, gen(), on_close=sdf.close, check=False)

    def open_csv(self, resource: ResolvedResource) -> StreamingDataFrame:
        sidecar = _load_sidecar(resource.path)
        reader = _RecordReader(_CountingFile(resource.path, self.stats))
        try:
            if sidecar is not None:
                schema, header = self._check_header(reader, sidecar)
                buffered: list[list[Any]] = []
            else:
                schema, header, buffered = self._infer(reader)
        except BaseException:
            reader.close()
            raise
        return StreamingDataFrame(
            schema,
            self._csv_batches(reader, schema, buffered),
            on_close=reader.close,
        )

    def _check_header(
        self, reader: _RecordReader, schema: Schema
    ) -> tuple[Schema, list[str]]:
        header = reader.next_record()
        if header is None:
            raise BadRequestError("CSV file is empty (no header)")
        names = header[0]
        if tuple(names) != schema.names:
            raise DacpTypeError("CSV header does not match its schema sidecar")
        return schema, names

    def _infer(
        self, reader: _RecordReader
    ) -> tuple[Schema, list[str], list[list[Any]]]:
        header = reader.next_record()
        if header is None:
            raise BadRequestError("CSV file is empty (no header)")
        names = header[0]
        if any(n == "" for n in names):
            raise BadRequestError("CSV header has an empty column name")
        guesses = [_ColumnGuess() for _ in names]
        sample: list[tuple[list[str], list[bool]]] = []
        for _ in range(INFERENCE_SAMPLE_ROWS):
            rec = reader.next_record()
            if rec is None:
                break
            cells, quoted = rec
            if len(cells) != len(names):
                raise DacpTypeError(
                    f"CSV row has {len(cells)} cells, header has {len(names)}"
                )
            for g, text, q in zip(guesses, cells, quoted):
                g.observe(text, q)
            sample.append(rec)
        try:
            schema = Schema([g.field(n) for g, n in zip(guesses, names)])
        except ValueError as exc:
            raise BadRequestError(f"cannot infer CSV schema: {exc}") from None
        buffered = [
            [_typed_cell(t, q, f) for t, q, f in zip(cells, quoted, schema.fields)]
            for cells, quoted in sample
        ]
        return schema, names, buffered

    def _csv_batches(
        self,
        reader: _RecordReader,
        schema: Schema,
        buffered: list[list[Any]],
    ) -> Iterator[RecordBatch]:
        rows: list[list[Any]] = []
        try:
            for row in buffered:
                rows.append(row)
                if len(rows) >= self.batch_size:
                    yield RecordBatch.from_rows(schema, rows)
                    rows = []
            while True:
                rec = reader.next_record()
                if rec is None:
                    break
                cells, quoted = rec
                if len(cells) != len(schema.fields):
                    raise DacpTypeError(
                        f"CSV row has {len(cells)} cells, schema has {len(schema.fields)}"
                    )
                rows.append(
                    [_typed_cell(t, q, f) for t, q, f in zip(cells, quoted, schema.fields)]
                )
                if len(rows) >= self.batch_size:
                    yield RecordBatch.from_rows(schema, rows)
                    rows = []
            if rows:
                yield RecordBatch.from_rows(schema, rows)
        finally:
            reader.close()

    def open_directory(self, resource: ResolvedResource) -> StreamingDataFrame:
        try:
            children = sorted(
                p for p in resource.path.iterdir() if p.is_file()
            )
        except OSError as exc:
            raise NotFoundError(f"cannot list directory: {exc}") from None

        def gen() -> Iterator[RecordBatch]:
            rows = []
            for child in children:
                st = child.stat()
                rel = f"{resource.rel_path}/{child.name}" if resource.rel_path else child.name
                ext = child.suffix[1:].lower() if child.suffix else ""
                uri = make_uri(self.endpoint, resource.dataset.name, rel)
                rows.append(
                    [
                        child.name,
                        rel,
                        ext,
                        st.st_size,
                        int(st.st_mtime),
                        BlobRef(uri, st.st_size),
                    ]
                )
            for start in range(0, len(rows), self.batch_size):
                yield RecordBatch.from_rows(FILE_LIST_SCHEMA, rows[start : start + self.batch_size])

        return StreamingDataFrame(FILE_LIST_SCHEMA, gen())

    def open_binary(self, resource: ResolvedResource) -> StreamingDataFrame:
        chunk_size = self.chunk_size

        def gen() -> Iterator[RecordBatch]:
            f = _CountingFile(resource.path, self.stats)
            try:
                index = 0
                while True:
                    data = f.read(chunk_size)
                    if not data:
                        break
                    yield RecordBatch.from_rows(BINARY_CHUNK_SCHEMA, [[index, data]])
                    index += 1
            finally:
                f.close()

        return StreamingDataFrame(BINARY_CHUNK_SCHEMA, gen())

    def expand_blob(self, ref: BlobRef) -> StreamingDataFrame:
        """Open the resource a blob reference points at (drill-down)."""
        return self.open_resource(resolve(ref.uri, self.registry))

    # -- PUT persistence

    def begin_put(self, resource_uri: ParsedUri, schema: Schema) -> "PutWriter":
        entry = self.registry.get(resource_uri.dataset) if resource_uri.dataset else None
        if entry is None:
            raise NotFoundError("URI names no dataset")
        if not entry.writable:
            raise ForbiddenError(f"dataset {entry.name!r} is read-only")
        if not resource_uri.path:
            raise BadRequestError("PUT target must name a file")
        name = resource_uri.path.rsplit("/", 1)[-1]
        if name.lower().endswith(".csv"):
            fmt = "csv"
        elif name.lower().endswith(".bin"):
            fmt = "bin"
            if schema != BINARY_CHUNK_SCHEMA:
                raise DacpTypeError(
                    "PUT to .bin requires the binary chunk schema "
                    "{chunk_index: Int64, data: Binary}"
                )
        else:
            raise BadRequestError("PUT target must end in .csv or .bin")
        root = entry.root.resolve()
        target = root
        for seg in resource_uri.path.split("/"):
            if seg in (".", ".."):
                raise ForbiddenError(f"path escapes dataset root: {resource_uri.path!r}")
            target = target / seg
        parent = target.parent.resolve()
        if parent != root and root not in parent.parents:
            raise ForbiddenError(f"path escapes dataset root: {resource_uri.path!r}")
        return PutWriter(target, schema, fmt)


class PutWriter:
    """Validates and appends incoming batches to a temp file; the target
    becomes visible only on commit (atomic rename)."""

    def __init__(self, target: Path, schema: Schema, fmt: str):
        self.target = target
        self.schema = schema
        self.fmt = fmt
        self.rows_written = 0
        target.parent.mkdir(parents=True, exist_ok=True)
        self._tmp = target.parent / f".{target.name}.tmp-{os.getpid()}-{id(self):x}"
        self._f = open(self._tmp, "wb")
        if fmt == "csv":
            header = format_csv_row([(f.name, False) for f in schema.fields])
            self._f.write(header.encode("utf-8") + b"\r\n")

    def write_batch(self, batch: RecordBatch) -> None:
        if batch.schema != self.schema:
            raise DacpTypeError("batch schema does not match the declared PUT schema")
        if self.fmt == "csv":
            lines = []
            for row in batch.rows():
                lines.append(format_csv_row([render_cell(v) for v in row]))
            self._f.write(("\r\n".join(lines) + "\r\n").encode("utf-8"))
        else:
            data_col = batch.column("data")
            for chunk in data_col.values:
                self._f.write(chunk)
        self.rows_written += batch.row_count

    def commit(self) -> int:
        self._f.flush()
        os.fsync(self._f.fileno())
        self._f.close()
        if self.fmt == "csv":
            sidecar = self.target.with_name(self.target.name + SIDECAR_SUFFIX)
            sidecar.write_text(_sidecar_doc(self.schema), "utf-8")
        os.replace(self._tmp, self.target)
        return self.rows_written

    def abort(self) -> None:
        try:
            self._f.close()
        finally:
            try:
                os.unlink(self._tmp)
            except OSError:
                pass
