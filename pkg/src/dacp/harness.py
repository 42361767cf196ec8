"""In-process multi-node cluster harness.

Spawns independent server instances on loopback ephemeral ports, each with
an isolated registry rooted in a scratch directory, and exposes per-node
frame/byte counters and store counters for byte-accounting assertions.
Used by the test suite and the ``fedtest`` CLI scenario.
"""

from __future__ import annotations

import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

from dacp.datasource import LocalStore, StoreStats
from dacp.sdf import RecordBatch, StreamingDataFrame
from dacp.server import DacpServer, UserTable, make_registry
from dacp.uri import make_uri


@dataclass
class DatasetSpec:
    """Files for one dataset on one node: relative path -> bytes."""

    name: str
    files: dict[str, bytes] = field(default_factory=dict)
    access: str = "public"
    writable: bool = False


class PacedStore(LocalStore):
    """LocalStore whose sources sleep before producing each batch; drives
    the streaming-latency scenarios."""

    def __init__(self, registry, endpoint, batch_size, delay_s: float):
        super().__init__(registry, endpoint, batch_size=batch_size)
        self.delay_s = delay_s

    def open_resource(self, resource) -> StreamingDataFrame:
        sdf = super().open_resource(resource)
        delay = self.delay_s
        inner = sdf.batches()

        def gen() -> Iterator[RecordBatch]:
            for batch in inner:
                time.sleep(delay)
                yield batch

        return StreamingDataFrame(sdf.schema, gen(), on_close=sdf.close, check=False)


@dataclass
class HarnessNode:
    index: int
    server: DacpServer
    root: Path

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    @property
    def store_stats(self) -> StoreStats:
        return self.server.store.stats

    def uri(self, dataset: str, path: str = "") -> str:
        return make_uri(self.endpoint, dataset, path)


class Cluster:
    """A set of isolated loopback servers sharing nothing but the host."""

    def __init__(self, nodes: list[HarnessNode], base_dir: Path, owns_dir: bool):
        self.nodes = nodes
        self._base_dir = base_dir
        self._owns_dir = owns_dir

    @classmethod
    def spawn(
        cls,
        node_datasets: Sequence[Sequence[DatasetSpec]],
        *,
        base_dir: Optional[Path] = None,
        batch_size: int = 4096,
        pace_s: float = 0.0,
        users: Optional[dict[str, str]] = None,
        token_ttl: int = 3600,
        sweep_interval: float = 30.0,
    ) -> "Cluster":
        """One server per entry of ``node_datasets``; files are written
        under a scratch directory the cluster owns (unless one is given)."""
        owns_dir = base_dir is None
        base = Path(base_dir) if base_dir else Path(tempfile.mkdtemp(prefix="dacp-cluster-"))
        nodes: list[HarnessNode] = []
        try:
            for i, specs in enumerate(node_datasets):
                node_root = base / f"node{i}"
                entries = []
                for spec in specs:
                    ds_root = node_root / spec.name
                    ds_root.mkdir(parents=True, exist_ok=True)
                    for rel, data in spec.files.items():
                        target = ds_root / rel
                        target.parent.mkdir(parents=True, exist_ok=True)
                        target.write_bytes(data)
                    entries.append(
                        {
                            "name": spec.name,
                            "root": str(ds_root),
                            "access": spec.access,
                            "writable": spec.writable,
                        }
                    )
                node_root.mkdir(parents=True, exist_ok=True)
                registry = make_registry(entries)
                factory = None
                if pace_s > 0:
                    factory = (
                        lambda endpoint, reg=registry: PacedStore(
                            reg, endpoint, batch_size, pace_s
                        )
                    )
                server = DacpServer(
                    registry,
                    users=UserTable(users) if users else None,
                    batch_size=batch_size,
                    token_ttl=token_ttl,
                    store_factory=factory,
                    sweep_interval=sweep_interval,
                )
                server.start()
                nodes.append(HarnessNode(i, server, node_root))
        except BaseException:
            for node in nodes:
                node.server.stop()
            if owns_dir:
                shutil.rmtree(base, ignore_errors=True)
            raise
        return cls(nodes, base, owns_dir)

    def node(self, i: int) -> HarnessNode:
        return self.nodes[i]

    @property
    def endpoints(self) -> list[str]:
        return [n.endpoint for n in self.nodes]

    def teardown(self) -> None:
        for node in self.nodes:
            node.server.stop()
        if self._owns_dir:
            shutil.rmtree(self._base_dir, ignore_errors=True)

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.teardown()


def csv_bytes(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> bytes:
    """Small helper to lay down CSV fixtures."""
    from dacp.datasource import format_csv_row, render_cell

    lines = [",".join(header)]
    for row in rows:
        lines.append(format_csv_row([render_cell(v) for v in row]))
    return ("\r\n".join(lines) + "\r\n").encode("utf-8")
