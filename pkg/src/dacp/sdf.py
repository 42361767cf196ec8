"""Core data model: schemas, typed columnar record batches, and streaming
data frames with lazy single-pass consumption.

A streaming data frame is a schema plus an ordered, single-consumption
sequence of record batches. Batches are the atomic transport unit; row
iteration is amortized over batches and never pulls further upstream than
the consumer has asked for.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

from dacp.errors import DacpError, DacpTypeError, StreamConsumedError
from dacp.uri import parse_uri

DEFAULT_BATCH_SIZE = 4096
MAX_BATCH_ROWS = 1_048_576
MAX_SCHEMA_FIELDS = 4096

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1
UINT64_MAX = 2**64 - 1


class DataType(enum.IntEnum):
    """Column type palette; the integer values are the wire tags."""

    BOOL = 0x01
    INT32 = 0x02
    INT64 = 0x03
    FLOAT32 = 0x04
    FLOAT64 = 0x05
    UTF8 = 0x06
    BINARY = 0x07
    BLOB_REF = 0x08

    @property
    def is_numeric(self) -> bool:
        return self in (DataType.INT32, DataType.INT64, DataType.FLOAT32, DataType.FLOAT64)

    @property
    def is_float(self) -> bool:
        return self in (DataType.FLOAT32, DataType.FLOAT64)

    @property
    def fixed_width(self) -> int | None:
        """Byte width of the data element, or None for variable-width/bitmap."""
        return _FIXED_WIDTHS.get(self)


_FIXED_WIDTHS = {
    DataType.INT32: 4,
    DataType.INT64: 8,
    DataType.FLOAT32: 4,
    DataType.FLOAT64: 8,
}


@dataclass(frozen=True)
class BlobRef:
    """Reference to expandable content: a DACP URI plus the content size."""

    uri: str
    size_bytes: int


def f32_round(v: float) -> float:
    """Round a Python float to the nearest IEEE-754 single value; doubles
    beyond single range saturate to infinity."""
    try:
        return struct.unpack("<f", struct.pack("<f", v))[0]
    except OverflowError:
        return math.copysign(math.inf, v)


def _is_f32_exact(v: float) -> bool:
    if math.isnan(v):
        return True
    try:
        return struct.unpack("<f", struct.pack("<f", v))[0] == v
    except (OverflowError, struct.error):
        return False


@dataclass(frozen=True)
class Field:
    name: str
    dtype: DataType
    nullable: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise ValueError("field name must be non-empty text")
        if "\x00" in self.name or "/" in self.name:
            raise ValueError(f"field name contains reserved character: {self.name!r}")
        if not isinstance(self.dtype, DataType):
            object.__setattr__(self, "dtype", DataType(self.dtype))


class Schema:
    """Ordered list of fields with pairwise-distinct names."""

    __slots__ = ("fields", "_index")

    def __init__(self, fields: Sequence[Field]):
        fields = tuple(fields)
        if not 1 <= len(fields) <= MAX_SCHEMA_FIELDS:
            raise ValueError(f"schema must have 1..{MAX_SCHEMA_FIELDS} fields, got {len(fields)}")
        index: dict[str, int] = {}
        for pos, f in enumerate(fields):
            if not isinstance(f, Field):
                raise ValueError("schema entries must be Field instances")
            if f.name in index:
                raise ValueError(f"duplicate field name: {f.name!r}")
            index[f.name] = pos
        self.fields = fields
        self._index = index

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self) -> Iterator[Field]:
        return iter(self.fields)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        if name not in self._index:
            raise KeyError(name)
        return self._index[name]

    def field(self, name: str) -> Field:
        return self.fields[self.index(name)]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Schema) and self.fields == other.fields

    def __hash__(self) -> int:
        return hash(self.fields)

    def __repr__(self) -> str:
        cols = ", ".join(
            f"{f.name}: {f.dtype.name}{'?' if f.nullable else ''}" for f in self.fields
        )
        return f"Schema({cols})"


def _check_bool(v: Any) -> bool:
    return isinstance(v, bool)


def _check_int32(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and INT32_MIN <= v <= INT32_MAX


def _check_int64(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and INT64_MIN <= v <= INT64_MAX


def _check_float32(v: Any) -> bool:
    return isinstance(v, float) and _is_f32_exact(v)


def _check_float64(v: Any) -> bool:
    return isinstance(v, float)


def _check_utf8(v: Any) -> bool:
    return isinstance(v, str)


def _check_binary(v: Any) -> bool:
    return isinstance(v, bytes)


def _check_blob_ref(v: Any) -> bool:
    if not isinstance(v, BlobRef):
        return False
    if not isinstance(v.size_bytes, int) or not 0 <= v.size_bytes <= UINT64_MAX:
        return False
    try:
        parse_uri(v.uri)
    except DacpError:
        return False
    return True


_CELL_CHECKS: dict[DataType, Callable[[Any], bool]] = {
    DataType.BOOL: _check_bool,
    DataType.INT32: _check_int32,
    DataType.INT64: _check_int64,
    DataType.FLOAT32: _check_float32,
    DataType.FLOAT64: _check_float64,
    DataType.UTF8: _check_utf8,
    DataType.BINARY: _check_binary,
    DataType.BLOB_REF: _check_blob_ref,
}


class Column:
    """A typed column: a value per row, None marking nulls."""

    __slots__ = ("dtype", "values")

    def __init__(self, dtype: DataType, values: Sequence[Any]):
        self.dtype = DataType(dtype)
        self.values = tuple(values)

    @property
    def length(self) -> int:
        return len(self.values)

    @property
    def null_count(self) -> int:
        return sum(1 for v in self.values if v is None)

    def validity(self) -> list[bool]:
        return [v is not None for v in self.values]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Column)
            and self.dtype == other.dtype
            and self.values == other.values
        )

    def __repr__(self) -> str:
        return f"Column({self.dtype.name}, {self.length} rows)"


class RecordBatch:
    """The atomic transport unit: equal-length typed columns."""

    __slots__ = ("schema", "columns", "row_count")

    def __init__(self, schema: Schema, columns: Sequence[Column], *, validate: bool = True):
        self.schema = schema
        self.columns = tuple(columns)
        self.row_count = self.columns[0].length if self.columns else 0
        if validate:
            validate_batch(schema, self)

    @classmethod
    def from_rows(cls, schema: Schema, rows: Sequence[Sequence[Any]], *, validate: bool = True) -> "RecordBatch":
        """Build a batch from row lists; Float32 cells are rounded to
        single precision on the way in."""
        cols = []
        for pos, field in enumerate(schema.fields):
            cells = [row[pos] for row in rows]
            if field.dtype == DataType.FLOAT32:
                cells = [None if c is None else f32_round(c) for c in cells]
            cols.append(Column(field.dtype, cells))
        return cls(schema, cols, validate=validate)

    def column(self, name: str) -> Column:
        return self.columns[self.schema.index(name)]

    def row(self, i: int) -> list[Any]:
        return [col.values[i] for col in self.columns]

    def rows(self) -> Iterator[list[Any]]:
        for i in range(self.row_count):
            yield self.row(i)

    def slice(self, start: int, stop: int) -> "RecordBatch":
        cols = [Column(c.dtype, c.values[start:stop]) for c in self.columns]
        return RecordBatch(self.schema, cols, validate=False)

    def with_schema(self, schema: Schema) -> "RecordBatch":
        """Restamp with an equal-shape schema (used when nullability widens)."""
        return RecordBatch(schema, self.columns, validate=False)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, RecordBatch)
            and self.schema == other.schema
            and self.columns == other.columns
        )

    def __repr__(self) -> str:
        return f"RecordBatch({self.row_count} rows x {len(self.columns)} cols)"


def validate_batch(schema: Schema, batch: RecordBatch) -> None:
    """Check every batch invariant; raises DacpTypeError naming the first
    offending column."""
    if len(batch.columns) != len(schema.fields):
        raise DacpTypeError(
            f"batch has {len(batch.columns)} columns, schema has {len(schema.fields)}"
        )
    n = batch.row_count
    if not 1 <= n <= MAX_BATCH_ROWS:
        raise DacpTypeError(f"batch row count {n} outside 1..{MAX_BATCH_ROWS}")
    for field, col in zip(schema.fields, batch.columns):
        if col.dtype != field.dtype:
            raise DacpTypeError(
                f"column {field.name!r}: dtype {col.dtype.name} does not match "
                f"field type {field.dtype.name}"
            )
        if col.length != n:
            raise DacpTypeError(
                f"column {field.name!r}: length {col.length} != row count {n}"
            )
        check = _CELL_CHECKS[field.dtype]
        for v in col.values:
            if v is None:
                if not field.nullable:
                    raise DacpTypeError(f"column {field.name!r}: null in non-nullable column")
            elif not check(v):
                raise DacpTypeError(
                    f"column {field.name!r}: value {v!r} invalid for {field.dtype.name}"
                )


class StreamingDataFrame:
    """A schema plus a lazily produced, single-consumption batch stream.

    Pull with :meth:`next_batch` (returns None at end of stream, repeatedly)
    or claim the whole stream once via :meth:`batches` / :meth:`rows`.
    A producer error poisons the stream: every later pull re-raises it.
    """

    def __init__(
        self,
        schema: Schema,
        batches: Iterable[RecordBatch],
        *,
        on_close: Optional[Callable[[], None]] = None,
        check: bool = True,
    ):
        self.schema = schema
        self._gen = iter(batches)
        self._on_close = on_close
        self._check = check
        self._claimed = False
        self._started = False
        self._exhausted = False
        self._error: Optional[BaseException] = None

    @property
    def exhausted(self) -> bool:
        return self._exhausted

    def next_batch(self) -> Optional[RecordBatch]:
        """Return the next batch, or None exactly at (and after) exhaustion."""
        if self._error is not None:
            raise self._error
        if self._exhausted:
            return None
        self._started = True
        try:
            batch = next(self._gen)
        except StopIteration:
            self._finish()
            return None
        except Exception as exc:
            self._error = exc
            self._release()
            raise
        if self._check and batch.schema != self.schema:
            self._error = DacpTypeError("producer yielded a batch with a mismatched schema")
            self._release()
            raise self._error
        return batch

    def batches(self) -> Iterator[RecordBatch]:
        """Claim the stream and iterate its batches."""
        self._claim()
        return self._batch_iter()

    def _batch_iter(self) -> Iterator[RecordBatch]:
        while True:
            batch = self.next_batch()
            if batch is None:
                return
            yield batch

    def rows(self) -> Iterator[list[Any]]:
        """Claim the stream and iterate rows, pulling batches on demand."""
        self._claim()
        return self._row_iter()

    def _row_iter(self) -> Iterator[list[Any]]:
        while True:
            batch = self.next_batch()
            if batch is None:
                return
            yield from batch.rows()

    def close(self) -> None:
        """Abandon the stream; upstream producers are shut down."""
        if not self._exhausted:
            self._finish()

    def _claim(self) -> None:
        if self._claimed or self._started:
            raise StreamConsumedError("stream already consumed")
        self._claimed = True

    def _finish(self) -> None:
        self._exhausted = True
        gen_close = getattr(self._gen, "close", None)
        if gen_close is not None:
            gen_close()
        self._release()

    def _release(self) -> None:
        if self._on_close is not None:
            cb, self._on_close = self._on_close, None
            cb()


def sdf_from_rows(
    schema: Schema,
    rows: Sequence[Sequence[Any]],
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> StreamingDataFrame:
    """Wrap in-memory rows as a streaming data frame."""

    def gen() -> Iterator[RecordBatch]:
        for start in range(0, len(rows), batch_size):
            yield RecordBatch.from_rows(schema, rows[start : start + batch_size])

    return StreamingDataFrame(schema, gen())


def sdf_from_batches(
    schema: Schema,
    batches: Iterable[RecordBatch],
    *,
    on_close: Optional[Callable[[], None]] = None,
) -> StreamingDataFrame:
    return StreamingDataFrame(schema, batches, on_close=on_close)


def materialize_rows(sdf: StreamingDataFrame) -> list[list[Any]]:
    """Drain a stream into a row list (test/CLI convenience)."""
    return list(sdf.rows())
