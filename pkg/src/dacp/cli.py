"""Command-line interface.

Exit codes: 0 success, 1 protocol error (the server's code is printed),
2 usage error.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import sys
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, TextIO

from dacp.bench import kernel_bench, transfer_bench
from dacp.client import Connection, Credentials, frame
from dacp.dag import parse_dag
from dacp.datasource import format_csv_row, render_cell
from dacp.errors import DacpError
from dacp.sdf import BlobRef, StreamingDataFrame
from dacp.server import DacpServer, ServerConfig
from dacp.uri import parse_uri


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacp", description="DACP client and server")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the server daemon")
    serve.add_argument("--config", required=True, help="server config file (JSON)")
    serve.add_argument("--log-level", default="info")

    ls = sub.add_parser("ls", help="list a directory resource")
    ls.add_argument("uri")
    ls.add_argument("--output", choices=("table", "csv", "jsonl"), default="table")
    _auth_flags(ls)

    get = sub.add_parser("get", help="stream a resource")
    get.add_argument("uri")
    get.add_argument("--columns", help="comma-separated projection")
    get.add_argument("--where", help="predicate pushed to the server")
    get.add_argument("--output", choices=("csv", "jsonl", "table"), default="csv")
    get.add_argument("-o", "--out-file", help="write to a file instead of stdout")
    get.add_argument("--window", type=int, default=4, help="credit window in batches")
    _auth_flags(get)

    put = sub.add_parser("put", help="upload a local file")
    put.add_argument("uri")
    put.add_argument("file")
    _auth_flags(put)

    cook = sub.add_parser("cook", help="submit an operator DAG")
    cook.add_argument("--dag", required=True, help="DAG document file (JSON)")
    cook.add_argument("--output", choices=("csv", "jsonl", "table"), default="csv")
    cook.add_argument("-o", "--out-file")
    cook.add_argument("--window", type=int, default=4)
    _auth_flags(cook)

    bench = sub.add_parser("bench", help="informational throughput benchmark")
    bench.add_argument("uri", nargs="?")
    bench.add_argument("--baseline-dir", help="local files for the read+copy baseline")
    bench.add_argument("--kernels", action="store_true", help="compare codec kernel backends")
    _auth_flags(bench)

    fedtest = sub.add_parser("fedtest")  # canonical 3-node scenario (hidden)
    fedtest.add_argument("--rows", type=int, default=10_000)

    return parser


def _auth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--user")
    p.add_argument("--password", default="")


def _connect(args: argparse.Namespace, uri: str, window: int = 4) -> Connection:
    parsed = parse_uri(uri)
    creds = Credentials(args.user, args.password) if args.user else None
    return Connection(parsed.endpoint, credentials=creds, window=window)


# ---------------------------------------------------------------------------
# renderers


def _json_cell(v: Any) -> Any:
    if isinstance(v, bytes):
        return base64.b64encode(v).decode("ascii")
    if isinstance(v, BlobRef):
        return {"uri": v.uri, "size_bytes": v.size_bytes}
    return v


def render_stream(sdf: StreamingDataFrame, mode: str, out: TextIO) -> int:
    """Write a stream to ``out``; csv/jsonl start emitting at the first
    batch, table buffers to compute column widths. Returns the row count."""
    names = [f.name for f in sdf.schema.fields]
    rows = 0
    if mode == "csv":
        out.write(",".join(names) + "\n")
        for batch in sdf.batches():
            lines = [format_csv_row([render_cell(v) for v in row]) for row in batch.rows()]
            out.write("\n".join(lines) + "\n")
            out.flush()
            rows += batch.row_count
    elif mode == "jsonl":
        for batch in sdf.batches():
            for row in batch.rows():
                out.write(json.dumps({n: _json_cell(v) for n, v in zip(names, row)}))
                out.write("\n")
            out.flush()
            rows += batch.row_count
    else:
        table = [names] + [
            ["" if v is None else str(_json_cell(v)) for v in row] for row in sdf.rows()
        ]
        widths = [max(len(r[i]) for r in table) for i in range(len(names))]
        for r, line in enumerate(table):
            out.write("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() + "\n")
            if r == 0:
                out.write("  ".join("-" * w for w in widths) + "\n")
        rows = len(table) - 1
    return rows


def _open_out(path: Optional[str]):
    if path:
        return open(path, "w", encoding="utf-8", newline="")
    return sys.stdout


# ---------------------------------------------------------------------------
# commands


def _cmd_serve(args: argparse.Namespace) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
    )
    config = ServerConfig.from_file(args.config)
    server = DacpServer.from_config(config)
    server.serve_forever()
    return 0


def _cmd_ls(args: argparse.Namespace) -> int:
    conn = _connect(args, args.uri)
    try:
        # everything except the blob column; drill down explicitly when needed
        sdf = conn.get(
            args.uri, projection=["name", "path", "format", "size_bytes", "modified_unix"]
        )
        render_stream(sdf, args.output, sys.stdout)
    finally:
        conn.close()
    return 0


def _cmd_get(args: argparse.Namespace) -> int:
    conn = _connect(args, args.uri, window=args.window)
    try:
        projection = args.columns.split(",") if args.columns else None
        sdf = conn.get(args.uri, projection=projection, predicate=args.where)
        out = _open_out(args.out_file)
        try:
            render_stream(sdf, args.output, out)
        finally:
            if out is not sys.stdout:
                out.close()
    finally:
        conn.close()
    return 0


def _cmd_put(args: argparse.Namespace) -> int:
    path = Path(args.file)
    if not path.is_file():
        print(f"error: no such file: {path}", file=sys.stderr)
        return 2
    sdf = _local_file_sdf(path)
    conn = _connect(args, args.uri)
    try:
        rows = conn.put(args.uri, sdf)
        print(f"rows_written={rows}", file=sys.stderr)
    finally:
        conn.close()
    return 0


def _local_file_sdf(path: Path) -> StreamingDataFrame:
    from dacp.datasource import LocalStore, resolve
    from dacp.server import make_registry

    registry = make_registry([{"name": "local", "root": str(path.parent)}])
    store = LocalStore(registry, "localhost:1")
    res = resolve(f"dacp://localhost:1/local/{path.name}", registry)
    return store.open_resource(res)


def _cmd_cook(args: argparse.Namespace) -> int:
    document = Path(args.dag).read_text("utf-8")
    task = parse_dag(document)  # fail fast with a local diagnosis
    endpoints = set()
    for node in task.sources():
        kind = node.kind
        uri = getattr(kind, "uri", None)
        if uri is not None:
            endpoints.add(parse_uri(uri).endpoint)
    if len(endpoints) != 1:
        from dacp.federation import federated_execute

        creds = Credentials(args.user, args.password) if args.user else None

        def connect_to(endpoint: str) -> Connection:
            return Connection(endpoint, credentials=creds, window=args.window)

        sdf = federated_execute(task, connect_to, window=args.window)
        out = _open_out(args.out_file)
        try:
            render_stream(sdf, args.output, out)
        finally:
            if out is not sys.stdout:
                out.close()
        return 0
    conn = _connect(args, f"dacp://{endpoints.pop()}/", window=args.window)
    try:
        sdf = conn.cook(document)
        out = _open_out(args.out_file)
        try:
            render_stream(sdf, args.output, out)
        finally:
            if out is not sys.stdout:
                out.close()
    finally:
        conn.close()
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    if args.kernels:
        print(f"{'kernel':<16} {'pure (ms)':>10} {'compiled (ms)':>14} {'speedup':>8}")
        for t in kernel_bench():
            compiled = f"{t.compiled_s * 1e3:.2f}" if t.compiled_s is not None else "n/a"
            speed = f"{t.speedup:.1f}x" if t.speedup is not None else "n/a"
            print(f"{t.name:<16} {t.pure_s * 1e3:>10.2f} {compiled:>14} {speed:>8}")
        if not args.uri:
            return 0
    if not args.uri:
        print("error: bench needs a URI or --kernels", file=sys.stderr)
        return 2
    parsed = parse_uri(args.uri)
    report = transfer_bench(
        parsed.endpoint,
        args.uri,
        username=args.user,
        password=args.password,
        baseline_dir=Path(args.baseline_dir) if args.baseline_dir else None,
    )
    print(f"uri={report.uri}")
    print(f"rows={report.rows}")
    print(f"wire_payload_bytes={report.wire_payload_bytes}")
    print(f"time_to_first_batch_s={report.time_to_first_batch_s:.4f}")
    print(f"total_time_s={report.total_time_s:.4f}")
    print(f"throughput_mb_s={report.throughput_mb_s:.2f}")
    if report.baseline_time_s is not None:
        print(f"baseline_bytes={report.baseline_bytes}")
        print(f"baseline_time_s={report.baseline_time_s:.4f}")
        print(f"baseline_mb_s={report.baseline_mb_s:.2f}")
    return 0


def _cmd_fedtest(args: argparse.Namespace) -> int:
    from dacp.fedtest import run_fedtest

    return run_fedtest(rows=args.rows, out=sys.stdout)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "serve": _cmd_serve,
        "ls": _cmd_ls,
        "get": _cmd_get,
        "put": _cmd_put,
        "cook": _cmd_cook,
        "bench": _cmd_bench,
        "fedtest": _cmd_fedtest,
    }
    try:
        return handlers[args.command](args)
    except DacpError as exc:
        print(f"error [{exc.code} {exc.code_name}]: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 1


if __name__ == "__main__":
    sys.exit(main())
