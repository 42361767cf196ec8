"""Cross-domain execution: partition a task by data locality, publish the
remote fragments, and run the residual graph at the coordinator.

Each remote source, together with the maximal chain of unary operators
above it, becomes a fragment owned by the source's host. The fragment is
registered on its owner via COOK_PUBLISH and replaced in the residual by a
stream-source placeholder; remote data moves only when the residual pulls.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Callable, Optional

from dacp.client import Connection, open_pull
from dacp.dag import (
    DagNode,
    DagTask,
    FilterOp,
    GetSource,
    LimitOp,
    MapOp,
    SelectOp,
    StreamSource,
    execute,
    validate_task,
)
from dacp.errors import BadRequestError, DacpError, InternalError
from dacp.sdf import Schema, StreamingDataFrame
from dacp.uri import parse_uri

DEFAULT_PUBLISH_TTL = 600

_UNARY_OPS = (FilterOp, SelectOp, MapOp, LimitOp)


@dataclass(frozen=True)
class Fragment:
    owner: str  # host:port of the data owner
    task: DagTask


@dataclass
class FederationPlan:
    fragments: list[Fragment]
    residual: DagTask
    placeholder_map: dict[str, int]  # placeholder node id -> fragment index

    @property
    def is_local(self) -> bool:
        return not self.fragments


def partition(task: DagTask, self_endpoint: Optional[str]) -> FederationPlan:
    """Split a (planned) task into remote fragments plus a residual.

    For every source whose host:port differs from ``self_endpoint``, the
    maximal unary chain above it becomes a fragment; its top is replaced by
    a stream-source placeholder carrying the same node id. Fragments are
    ordered by first use in a depth-first walk from the sink (inputs in
    listed order). ``self_endpoint`` None means nothing is local.
    """
    validate_task(task)
    consumers: dict[str, tuple[str, int]] = {}
    for node in task.nodes.values():
        for pos, ref in enumerate(node.inputs):
            consumers[ref] = (node.id, pos)

    chains: dict[str, list[str]] = {}  # chain top id -> node ids bottom-up
    for node in task.nodes.values():
        if not isinstance(node.kind, GetSource):
            continue
        try:
            owner = parse_uri(node.kind.uri).endpoint
        except DacpError as exc:
            raise BadRequestError(f"node {node.id!r}: {exc}") from None
        if self_endpoint is not None and owner == self_endpoint:
            continue
        chain = [node.id]
        cur = node.id
        while True:
            cons = consumers.get(cur)
            if cons is None:
                break
            cid = cons[0]
            if not isinstance(task.nodes[cid].kind, _UNARY_OPS):
                break
            chain.append(cid)
            cur = cid
        chains[cur] = chain

    if not chains:
        return FederationPlan([], task, {})

    order = _dfs_order(task)
    tops = sorted(chains, key=order.index)

    fragments: list[Fragment] = []
    placeholder_map: dict[str, int] = {}
    residual_nodes = dict(task.nodes)
    for index, top in enumerate(tops):
        chain = chains[top]
        frag_nodes = {nid: task.nodes[nid] for nid in chain}
        source = task.nodes[chain[0]]
        owner = parse_uri(source.kind.uri).endpoint
        fragments.append(Fragment(owner, DagTask(frag_nodes, top)))
        for nid in chain:
            del residual_nodes[nid]
        residual_nodes[top] = DagNode(top, StreamSource(owner, "", ""))
        placeholder_map[top] = index
    residual = DagTask(residual_nodes, task.sink)
    return FederationPlan(fragments, residual, placeholder_map)


def _dfs_order(task: DagTask) -> list[str]:
    order: list[str] = []
    stack = [task.sink]
    while stack:
        nid = stack.pop()
        order.append(nid)
        # push reversed so input 0 is visited first
        stack.extend(reversed(task.nodes[nid].inputs))
    return order


@dataclass
class _PublishedFragment:
    endpoint: str
    stream_id: str
    stream_token: str
    schema: Schema


class _CoordinatorContext:
    """Residual execution context: placeholders resolve to published
    fragments (PULL on first pull), everything else goes to the optional
    local context."""

    def __init__(
        self,
        published: dict[str, _PublishedFragment],
        window: int,
        local_context=None,
    ):
        self._published = published
        self._window = window
        self._local = local_context

    def source_schema(self, node: DagNode):
        frag = self._published.get(node.id)
        if frag is not None:
            return frag.schema
        if self._local is None:
            raise InternalError(f"no local context for source {node.id!r}")
        return self._local.source_schema(node)

    def open_source(self, node: DagNode) -> StreamingDataFrame:
        frag = self._published.get(node.id)
        if frag is not None:
            return open_pull(
                frag.endpoint, frag.stream_id, frag.stream_token, window=self._window
            )
        return self._local.open_source(node)


def orchestrate(
    plan: FederationPlan,
    connect: Callable[[str], Connection],
    *,
    ttl_seconds: int = DEFAULT_PUBLISH_TTL,
    window: int = 4,
    local_context=None,
) -> StreamingDataFrame:
    """Publish every fragment on its owner, then execute the residual with
    the placeholders bound to the published streams.

    Publishes run concurrently; any failure aborts before a single PULL is
    sent. Remote data starts moving only when the result stream is pulled.
    """
    published: dict[str, _PublishedFragment] = {}
    errors: list[tuple[int, Exception]] = []
    lock = threading.Lock()
    connections: list[Connection] = []

    def _publish(index: int, fragment: Fragment) -> None:
        try:
            conn = connect(fragment.owner)
            with lock:
                connections.append(conn)
            ok = conn.cook_publish(fragment.task, ttl_seconds)
            result = _PublishedFragment(
                fragment.owner, ok.stream_id, ok.stream_token, ok.schema
            )
            with lock:
                for pid, fidx in plan.placeholder_map.items():
                    if fidx == index:
                        published[pid] = result
        except Exception as exc:  # collected and re-raised below
            with lock:
                errors.append((index, exc))

    threads = [
        threading.Thread(target=_publish, args=(i, frag), daemon=True)
        for i, frag in enumerate(plan.fragments)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if errors:
        for conn in connections:
            conn.close()
        index, exc = errors[0]
        if isinstance(exc, DacpError):
            raise type(exc)(f"fragment {index} ({plan.fragments[index].owner}): {exc}")
        raise InternalError(f"fragment {index} ({plan.fragments[index].owner}): {exc}")

    ctx = _CoordinatorContext(published, window, local_context)
    result = execute(plan.residual, ctx)

    def _cleanup() -> None:
        result.close()
        for conn in connections:
            conn.close()

    return StreamingDataFrame(result.schema, result.batches(), on_close=_cleanup, check=False)


def federated_execute(
    task: DagTask,
    connect: Callable[[str], Connection],
    *,
    self_endpoint: Optional[str] = None,
    ttl_seconds: int = DEFAULT_PUBLISH_TTL,
    window: int = 4,
    local_context=None,
) -> StreamingDataFrame:
    """partition + orchestrate in one call."""
    fed_plan = partition(task, self_endpoint)
    if fed_plan.is_local and local_context is not None:
        return execute(task, local_context)
    return orchestrate(
        fed_plan, connect, ttl_seconds=ttl_seconds, window=window, local_context=local_context
    )
