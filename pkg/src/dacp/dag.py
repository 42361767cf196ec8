"""Operator DAG model: parsing, validation, pushdown planning, and lazy
pull-based execution over streaming data frames.

A task is a tree of operator nodes (each node feeds exactly one consumer;
the sink feeds none). Sources produce streams, unary operators transform
them one batch per pull, and union drains its left input then its right.
Nothing upstream runs until the sink is pulled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterator, Optional, Protocol, Union

from dacp.errors import BadRequestError, DacpError, DacpTypeError
from dacp.expr import (
    And,
    MapExpr,
    Predicate,
    compile_map_expr,
    compile_predicate,
    infer_map_expr_type,
    map_expr_to_text,
    parse_map_expr,
    parse_predicate,
    predicate_columns,
    predicate_to_text,
)
from dacp.sdf import (
    Column,
    DataType,
    Field,
    RecordBatch,
    Schema,
    StreamingDataFrame,
)
from dacp.uri import parse_uri, split_endpoint

UINT64_MAX = 2**64 - 1


# ---------------------------------------------------------------------------
# node kinds


@dataclass(frozen=True)
class GetSource:
    uri: str
    projection: Optional[tuple[str, ...]] = None
    predicate: Optional[Predicate] = None


@dataclass(frozen=True)
class StreamSource:
    endpoint: str
    stream_id: str
    stream_token: str


@dataclass(frozen=True)
class FilterOp:
    predicate: Predicate


@dataclass(frozen=True)
class SelectOp:
    columns: tuple[str, ...]


@dataclass(frozen=True)
class MapOp:
    new_column: str
    expr: MapExpr


@dataclass(frozen=True)
class LimitOp:
    n: int


@dataclass(frozen=True)
class UnionOp:
    pass


NodeKind = Union[GetSource, StreamSource, FilterOp, SelectOp, MapOp, LimitOp, UnionOp]

KIND_NAMES: dict[type, str] = {
    GetSource: "source.get",
    StreamSource: "source.stream",
    FilterOp: "op.filter",
    SelectOp: "op.select",
    MapOp: "op.map",
    LimitOp: "op.limit",
    UnionOp: "op.union",
}

_ARITY: dict[type, int] = {
    GetSource: 0,
    StreamSource: 0,
    FilterOp: 1,
    SelectOp: 1,
    MapOp: 1,
    LimitOp: 1,
    UnionOp: 2,
}


@dataclass(frozen=True)
class DagNode:
    id: str
    kind: NodeKind
    inputs: tuple[str, ...] = ()


@dataclass
class DagTask:
    nodes: dict[str, DagNode]
    sink: str

    def node(self, nid: str) -> DagNode:
        return self.nodes[nid]

    def sources(self) -> list[DagNode]:
        return [n for n in self.nodes.values() if isinstance(n.kind, (GetSource, StreamSource))]


# ---------------------------------------------------------------------------
# document parsing / serialization


def parse_dag(document: str) -> DagTask:
    """Parse and structurally validate a DAG document (JSON).

    Raises BadRequestError on syntax errors, unknown kinds, arity
    violations, duplicate ids, cycles, fan-out, or a bad sink.
    """
    try:
        doc = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BadRequestError(f"dag document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise BadRequestError("dag document must be an object with a 'nodes' list")
    sink = doc.get("sink")
    if not isinstance(sink, str) or not sink:
        raise BadRequestError("dag document missing 'sink' node id")
    nodes: dict[str, DagNode] = {}
    for obj in doc["nodes"]:
        node = _parse_node(obj)
        if node.id in nodes:
            raise BadRequestError(f"duplicate node id {node.id!r}")
        nodes[node.id] = node
    task = DagTask(nodes, sink)
    validate_task(task)
    return task


def _parse_node(obj: Any) -> DagNode:
    if not isinstance(obj, dict):
        raise BadRequestError("dag node must be an object")
    nid = obj.get("id")
    if not isinstance(nid, str) or not nid:
        raise BadRequestError("dag node missing 'id'")
    kind_name = obj.get("kind")
    inputs = obj.get("inputs", [])
    if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
        raise BadRequestError(f"node {nid!r}: 'inputs' must be a list of node ids")
    try:
        kind = _parse_kind(kind_name, obj)
    except DacpError as exc:
        raise type(exc)(f"node {nid!r}: {exc}") from None
    return DagNode(nid, kind, tuple(inputs))


def _parse_kind(kind_name: Any, obj: dict) -> NodeKind:
    if kind_name == "source.get":
        uri = _req_str(obj, "uri")
        parse_uri(uri)
        projection = obj.get("projection")
        if projection is not None:
            projection = tuple(_str_list(projection, "projection"))
        predicate = obj.get("predicate")
        if predicate is not None and not isinstance(predicate, str):
            raise BadRequestError("'predicate' must be text")
        pred = parse_predicate(predicate) if predicate is not None else None
        return GetSource(uri, projection, pred)
    if kind_name == "source.stream":
        endpoint = _req_str(obj, "endpoint")
        split_endpoint(endpoint)
        stream_id = _req_str(obj, "stream_id")
        stream_token = _req_str(obj, "stream_token")
        return StreamSource(endpoint, stream_id, stream_token)
    if kind_name == "op.filter":
        return FilterOp(parse_predicate(_req_str(obj, "predicate")))
    if kind_name == "op.select":
        return SelectOp(tuple(_str_list(obj.get("columns"), "columns")))
    if kind_name == "op.map":
        name = _req_str(obj, "new_column")
        try:
            Field(name, DataType.INT64)  # reuse field-name validation
        except ValueError as exc:
            raise BadRequestError(str(exc)) from None
        return MapOp(name, parse_map_expr(_req_str(obj, "expr")))
    if kind_name == "op.limit":
        n = obj.get("n")
        if not isinstance(n, int) or isinstance(n, bool) or not 0 <= n <= UINT64_MAX:
            raise BadRequestError("'n' must be an unsigned 64-bit integer")
        return LimitOp(n)
    if kind_name == "op.union":
        return UnionOp()
    raise BadRequestError(f"unknown node kind {kind_name!r}")


def _req_str(obj: dict, key: str) -> str:
    v = obj.get(key)
    if not isinstance(v, str) or not v:
        raise BadRequestError(f"missing or empty {key!r}")
    return v


def _str_list(v: Any, what: str) -> list[str]:
    if not isinstance(v, list) or not v or not all(isinstance(s, str) and s for s in v):
        raise BadRequestError(f"{what!r} must be a non-empty list of names")
    if len(set(v)) != len(v):
        raise BadRequestError(f"{what!r} contains duplicate names")
    return v


def validate_task(task: DagTask) -> None:
    """Structural validation: arity, references, tree shape, reachability."""
    if task.sink not in task.nodes:
        raise BadRequestError(f"sink {task.sink!r} is not a node")
    consumers: dict[str, int] = {nid: 0 for nid in task.nodes}
    for node in task.nodes.values():
        arity = _ARITY[type(node.kind)]
        if len(node.inputs) != arity:
            raise BadRequestError(
                f"node {node.id!r} ({KIND_NAMES[type(node.kind)]}) takes {arity} "
                f"input(s), got {len(node.inputs)}"
            )
        for ref in node.inputs:
            if ref not in task.nodes:
                raise BadRequestError(f"node {node.id!r} references unknown input {ref!r}")
            consumers[ref] += 1
    if consumers[task.sink] != 0:
        raise BadRequestError(f"sink {task.sink!r} must have no consumers")
    for nid, count in consumers.items():
        if nid == task.sink:
            continue
        if count == 0:
            raise BadRequestError(f"node {nid!r} does not reach the sink")
        if count > 1:
            raise BadRequestError(
                f"node {nid!r} feeds {count} consumers; streams are single-consumption"
            )
    # with single consumers a cycle can never reach the sink, so a full
    # walk from the sink visiting every node rules cycles out too
    seen: set[str] = set()
    stack = [task.sink]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise BadRequestError(f"cycle involving node {nid!r}")
        seen.add(nid)
        stack.extend(task.nodes[nid].inputs)
    if len(seen) != len(task.nodes):
        missing = sorted(set(task.nodes) - seen)
        raise BadRequestError(f"node(s) unreachable from sink (cycle?): {missing}")


def serialize_dag(task: DagTask) -> str:
    """Canonical JSON document for a task; parse_dag round-trips it."""
    nodes = []
    for node in task.nodes.values():
        obj: dict[str, Any] = {
            "id": node.id,
            "kind": KIND_NAMES[type(node.kind)],
            "inputs": list(node.inputs),
        }
        k = node.kind
        if isinstance(k, GetSource):
            obj["uri"] = k.uri
            if k.projection is not None:
                obj["projection"] = list(k.projection)
            if k.predicate is not None:
                obj["predicate"] = predicate_to_text(k.predicate)
        elif isinstance(k, StreamSource):
            obj["endpoint"] = k.endpoint
            obj["stream_id"] = k.stream_id
            obj["stream_token"] = k.stream_token
        elif isinstance(k, FilterOp):
            obj["predicate"] = predicate_to_text(k.predicate)
        elif isinstance(k, SelectOp):
            obj["columns"] = list(k.columns)
        elif isinstance(k, MapOp):
            obj["new_column"] = k.new_column
            obj["expr"] = map_expr_to_text(k.expr)
        elif isinstance(k, LimitOp):
            obj["n"] = k.n
        nodes.append(obj)
    return json.dumps({"nodes": nodes, "sink": task.sink}, sort_keys=True)


# ---------------------------------------------------------------------------
# schema inference


def infer_schema(task: DagTask, source_schema: Callable[[DagNode], Schema]) -> Schema:
    """Compute the task's output schema, validating every operator against
    its input schema. ``source_schema`` is consulted for source nodes and
    must return the node's output schema (projection and predicate included
    for source.get). Raises DacpTypeError before any data flows."""
    return _node_schemas(task, source_schema)[task.sink]


def _node_schemas(
    task: DagTask, source_schema: Callable[[DagNode], Schema]
) -> dict[str, Schema]:
    schemas: dict[str, Schema] = {}

    def walk(nid: str) -> Schema:
        if nid in schemas:
            return schemas[nid]
        node = task.nodes[nid]
        k = node.kind
        if isinstance(k, (GetSource, StreamSource)):
            out = source_schema(node)
        elif isinstance(k, FilterOp):
            inp = walk(node.inputs[0])
            _ctx(node, lambda: compile_predicate(k.predicate, inp))
            out = inp
        elif isinstance(k, SelectOp):
            inp = walk(node.inputs[0])
            out = _ctx(node, lambda: project_schema(inp, k.columns))
        elif isinstance(k, MapOp):
            inp = walk(node.inputs[0])
            if k.new_column in inp:
                raise DacpTypeError(
                    f"node {node.id!r}: map column {k.new_column!r} already exists"
                )
            dtype = _ctx(node, lambda: infer_map_expr_type(k.expr, inp))
            out = Schema(tuple(inp.fields) + (Field(k.new_column, dtype, nullable=True),))
        elif isinstance(k, LimitOp):
            out = walk(node.inputs[0])
        else:  # UnionOp
            left = walk(node.inputs[0])
            right = walk(node.inputs[1])
            out = _ctx(node, lambda: union_schema(left, right))
        schemas[nid] = out
        return out

    walk(task.sink)
    return schemas


def _ctx(node: DagNode, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except DacpError as exc:
        raise type(exc)(f"node {node.id!r}: {exc}") from None


def project_schema(schema: Schema, columns: tuple[str, ...]) -> Schema:
    for name in columns:
        if name not in schema:
            raise DacpTypeError(f"unknown column {name!r}")
    return Schema([schema.field(name) for name in columns])


def union_schema(left: Schema, right: Schema) -> Schema:
    """Union operands must match on names, types, and order; nullability is
    merged by OR."""
    if len(left) != len(right):
        raise DacpTypeError("union operands have different column counts")
    fields = []
    for lf, rf in zip(left.fields, right.fields):
        if lf.name != rf.name or lf.dtype != rf.dtype:
            raise DacpTypeError(
                f"union operand mismatch: {lf.name!r}: {lf.dtype.name} vs "
                f"{rf.name!r}: {rf.dtype.name}"
            )
        fields.append(Field(lf.name, lf.dtype, lf.nullable or rf.nullable))
    return Schema(fields)


# ---------------------------------------------------------------------------
# pushdown planner


def plan(task: DagTask) -> DagTask:
    """Rewrite to fixpoint: merge filters into sources, merge selects into
    source projections (keeping predicate columns, with a residual select
    when extras are kept), and move filters below selects. The result is
    semantically equivalent to the input."""
    nodes = dict(task.nodes)
    sink = task.sink
    changed = True
    while changed:
        changed = False
        for nid in sorted(nodes):
            node = nodes.get(nid)
            if node is None:
                continue
            k = node.kind
            if isinstance(k, FilterOp):
                child = nodes[node.inputs[0]]
                if isinstance(child.kind, GetSource):
                    merged = (
                        And(child.kind.predicate, k.predicate)
                        if child.kind.predicate is not None
                        else k.predicate
                    )
                    nodes[child.id] = replace(child, kind=replace(child.kind, predicate=merged))
                    sink = _splice_out(nodes, nid, child.id, sink)
                    changed = True
                    break
                if isinstance(child.kind, SelectOp):
                    grand = child.inputs[0]
                    nodes[nid] = replace(node, inputs=(grand,))
                    nodes[child.id] = replace(child, inputs=(nid,))
                    sink = _rewire(nodes, nid, child.id, sink, skip=child.id)
                    changed = True
                    break
            elif isinstance(k, SelectOp):
                child = nodes[node.inputs[0]]
                if isinstance(child.kind, GetSource):
                    src = child.kind
                    pred_cols = predicate_columns(src.predicate) if src.predicate else []
                    extras = tuple(c for c in pred_cols if c not in k.columns)
                    merged = extras + tuple(k.columns)
                    did = False
                    if src.projection != merged:
                        nodes[child.id] = replace(child, kind=replace(src, projection=merged))
                        did = True
                    if not extras:
                        sink = _splice_out(nodes, nid, child.id, sink)
                        did = True
                    if did:
                        changed = True
                        break
    return DagTask(nodes, sink)


def _consumer_of(nodes: dict[str, DagNode], nid: str) -> Optional[tuple[str, int]]:
    for node in nodes.values():
        for pos, ref in enumerate(node.inputs):
            if ref == nid:
                return node.id, pos
    return None


def _splice_out(nodes: dict[str, DagNode], nid: str, child_id: str, sink: str) -> str:
    """Remove node nid, rewiring its consumer to child_id."""
    cons = _consumer_of(nodes, nid)
    del nodes[nid]
    if cons is None:
        return child_id if sink == nid else sink
    cid, pos = cons
    consumer = nodes[cid]
    inputs = list(consumer.inputs)
    inputs[pos] = child_id
    nodes[cid] = replace(consumer, inputs=tuple(inputs))
    return sink


def _rewire(nodes: dict[str, DagNode], old: str, new: str, sink: str, skip: str) -> str:
    """Point whatever consumed ``old`` (other than ``skip``) at ``new``."""
    for node in nodes.values():
        if node.id == skip:
            continue
        if old in node.inputs:
            inputs = tuple(new if ref == old else ref for ref in node.inputs)
            nodes[node.id] = replace(node, inputs=inputs)
            return sink
    return new if sink == old else sink


# ---------------------------------------------------------------------------
# execution


class SourceContext(Protocol):
    """What the executor needs from its environment: schemas and streams
    for source nodes. Implementations validate access and projection."""

    def source_schema(self, node: DagNode) -> Schema: ...

    def open_source(self, node: DagNode) -> StreamingDataFrame: ...


def execute(task: DagTask, context: SourceContext) -> StreamingDataFrame:
    """Build the lazy pull pipeline for a task.

    Schema inference (metadata only) runs eagerly so errors surface before
    any data flows; no source is opened until the first batch is pulled
    from the returned stream.
    """
    validate_task(task)
    schemas = _node_schemas(task, context.source_schema)

    def make(nid: str) -> StreamingDataFrame:
        node = task.nodes[nid]
        k = node.kind
        out_schema = schemas[nid]
        if isinstance(k, (GetSource, StreamSource)):
            return _deferred_source(out_schema, node, context)
        if isinstance(k, FilterOp):
            inp = make(node.inputs[0])
            return apply_filter(inp, k.predicate)
        if isinstance(k, SelectOp):
            inp = make(node.inputs[0])
            return apply_select(inp, k.columns)
        if isinstance(k, MapOp):
            inp = make(node.inputs[0])
            return apply_map(inp, k.new_column, k.expr)
        if isinstance(k, LimitOp):
            inp = make(node.inputs[0])
            return apply_limit(inp, k.n)
        left = make(node.inputs[0])
        right = make(node.inputs[1])
        return apply_union(left, right)

    return make(task.sink)


def _deferred_source(
    schema: Schema, node: DagNode, context: SourceContext
) -> StreamingDataFrame:
    def gen() -> Iterator[RecordBatch]:
        src = context.open_source(node)
        if src.schema != schema:
            src.close()
            raise DacpTypeError(
                f"source {node.id!r} schema changed between validation and open"
            )
        try:
            yield from src.batches()
        finally:
            src.close()

    return StreamingDataFrame(schema, gen())


def apply_filter(sdf: StreamingDataFrame, predicate: Predicate) -> StreamingDataFrame:
    fn = compile_predicate(predicate, sdf.schema)
    schema = sdf.schema

    def gen() -> Iterator[RecordBatch]:
        try:
            for batch in sdf.batches():
                keep = [i for i in range(batch.row_count) if fn(batch.row(i))]
                if not keep:
                    continue
                if len(keep) == batch.row_count:
                    yield batch
                    continue
                cols = [
                    Column(c.dtype, [c.values[i] for i in keep]) for c in batch.columns
                ]
                yield RecordBatch(schema, cols, validate=False)
        finally:
            sdf.close()

    return StreamingDataFrame(schema, gen())


def apply_select(sdf: StreamingDataFrame, columns: tuple[str, ...]) -> StreamingDataFrame:
    schema = project_schema(sdf.schema, columns)
    positions = [sdf.schema.index(name) for name in columns]

    def gen() -> Iterator[RecordBatch]:
        try:
            for batch in sdf.batches():
                cols = [batch.columns[p] for p in positions]
                yield RecordBatch(schema, cols, validate=False)
        finally:
            sdf.close()

    return StreamingDataFrame(schema, gen())


def apply_map(sdf: StreamingDataFrame, new_column: str, expr: MapExpr) -> StreamingDataFrame:
    if new_column in sdf.schema:
        raise DacpTypeError(f"map column {new_column!r} already exists")
    dtype = infer_map_expr_type(expr, sdf.schema)
    fn = compile_map_expr(expr, sdf.schema)
    schema = Schema(tuple(sdf.schema.fields) + (Field(new_column, dtype, nullable=True),))

    def gen() -> Iterator[RecordBatch]:
        try:
            for batch in sdf.batches():
                values = [fn(batch.row(i)) for i in range(batch.row_count)]
                cols = list(batch.columns) + [Column(dtype, values)]
                yield RecordBatch(schema, cols, validate=False)
        finally:
            sdf.close()

    return StreamingDataFrame(schema, gen())


def apply_limit(sdf: StreamingDataFrame, n: int) -> StreamingDataFrame:
    schema = sdf.schema

    def gen() -> Iterator[RecordBatch]:
        remaining = n
        try:
            if remaining == 0:
                return
            for batch in sdf.batches():
                if batch.row_count >= remaining:
                    yield batch.slice(0, remaining)
                    return
                remaining -= batch.row_count
                yield batch
        finally:
            sdf.close()

    return StreamingDataFrame(schema, gen())


def apply_union(left: StreamingDataFrame, right: StreamingDataFrame) -> StreamingDataFrame:
    schema = union_schema(left.schema, right.schema)

    def gen() -> Iterator[RecordBatch]:
        try:
            for batch in left.batches():
                yield batch if batch.schema == schema else batch.with_schema(schema)
            for batch in right.batches():
                yield batch if batch.schema == schema else batch.with_schema(schema)
        finally:
            left.close()
            right.close()

    return StreamingDataFrame(schema, gen())
