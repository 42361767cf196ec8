"""Acceptance suite: one test per criterion, each printing a PASS line and
enforcing its stated tolerance and runtime budget.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines as they complete.
"""

import hashlib
import random
import time

import pytest

from genutil import (
    MemoryContext,
    gen_batch,
    gen_message,
    gen_rows,
    gen_schema,
    gen_task,
    rows_equal,
)
from oracle import oracle_execute
from wirehelp import RawClient
from dacp import wire
from dacp.client import Connection, connect, frame, open_pull
from dacp.dag import DagNode, DagTask, FilterOp, GetSource, LimitOp, UnionOp, execute, plan
from dacp.errors import FORBIDDEN, NOT_FOUND, TOKEN_EXPIRED, DacpError
from dacp.expr import parse_predicate
from dacp.federation import orchestrate, partition
from dacp.harness import Cluster, DatasetSpec, PacedStore, csv_bytes
from dacp.sdf import (
    Column,
    DataType,
    Field,
    RecordBatch,
    Schema,
    materialize_rows,
    sdf_from_rows,
)


def _announce(number: int, name: str) -> None:
    print(f"\nACCEPTANCE {number} {name}: PASS")


def _elapsed_under(start: float, budget_s: float, what: str) -> None:
    elapsed = time.monotonic() - start
    assert elapsed < budget_s, f"{what} took {elapsed:.1f}s (budget {budget_s}s)"


# ---------------------------------------------------------------------------
# 1. codec golden bytes + fuzz


def test_criterion_1_codec_golden_and_fuzz():
    start = time.monotonic()

    assert wire.encode_frame(wire.Credit(7)) == bytes.fromhex("050000001307000000")
    schema_x = Schema([Field("x", DataType.INT64, True)])
    assert wire.encode_schema(schema_x) == bytes.fromhex("010001000000780301")
    batch5 = RecordBatch(
        Schema([Field("x", DataType.INT64)]), [Column(DataType.INT64, [5])]
    )
    assert wire.encode_batch(batch5) == bytes.fromhex("010000000105000000" + "00" * 5)
    assert wire.encode_frame(wire.EndStream(0)) == bytes.fromhex("09000000120000000000000000")

    rng = random.Random(0xC0DEC)
    mismatches = 0
    for _ in range(4000):
        msg = gen_message(rng)
        (got,) = wire.decode_frames([wire.encode_frame(msg)])
        if got != msg or wire.encode_frame(got) != wire.encode_frame(msg):
            mismatches += 1
    for _ in range(3000):
        schema = gen_schema(rng, max_fields=8)
        if wire.decode_schema(wire.encode_schema(schema)) != schema:
            mismatches += 1
    for _ in range(3000):
        schema = gen_schema(rng, max_fields=5)
        batch = gen_batch(rng, schema, rng.randint(1, 64))
        encoded = wire.encode_batch(batch)
        decoded = wire.decode_batch(encoded, schema)
        if wire.encode_batch(decoded) != encoded:
            mismatches += 1
        if not rows_equal(list(decoded.rows()), list(batch.rows())):
            mismatches += 1
    assert mismatches == 0

    _elapsed_under(start, 60, "codec fuzz")
    _announce(1, "codec golden bytes + 10k fuzz round-trips")


# ---------------------------------------------------------------------------
# 2. PUT -> GET round-trip fidelity


def test_criterion_2_put_get_fidelity():
    start = time.monotonic()
    rng = random.Random(0xF1DE)
    spec = DatasetSpec("up", writable=True)
    with Cluster.spawn([[spec]]) as cluster:
        node = cluster.node(0)
        with connect(node.endpoint) as conn:
            for trial in range(200):
                # every type appears across trials: pin one, randomize the rest
                pinned = list(DataType)[trial % 8]
                schema = _schema_with(rng, pinned)
                if trial == 0:
                    n = 50_000
                elif trial == 1:
                    n = 0
                elif trial % 17 == 0:
                    n = rng.randint(5_000, 20_000)
                else:
                    n = rng.randint(0, 800)
                rows = gen_rows(rng, schema, n)
                uri = node.uri("up", f"t{trial}.csv")
                written = conn.put(uri, sdf_from_rows(schema, rows))
                assert written == n
                back = conn.get(uri)
                assert back.schema == schema
                assert rows_equal(materialize_rows(back), rows), f"trial {trial}"
    _elapsed_under(start, 120, "round-trip fidelity")
    _announce(2, "200 randomized tables survive PUT->GET value-exactly")


def _schema_with(rng: random.Random, pinned: DataType) -> Schema:
    schema = gen_schema(rng, min_fields=1, max_fields=5, prefix="r")
    fields = list(schema.fields)
    fields.append(Field("pin", pinned, nullable=True))
    return Schema(fields)


# ---------------------------------------------------------------------------
# 3. oracle equivalence


def test_criterion_3_oracle_equivalence():
    start = time.monotonic()
    rng = random.Random(0x0CAC1E)
    uris = ["dacp://n1:3101/ds/a.csv", "dacp://n1:3101/ds/b.csv"]
    for trial in range(200):
        schema = gen_schema(
            rng,
            types=[DataType.INT64, DataType.FLOAT64, DataType.UTF8, DataType.BOOL],
            min_fields=2,
            max_fields=4,
        )
        tables = {u: (schema, gen_rows(rng, schema, rng.randint(0, 1000))) for u in uris}
        task = gen_task(rng, tables)
        _, expected = oracle_execute(task, tables)
        engine = materialize_rows(execute(task, MemoryContext(tables, batch_size=64)))
        planned = materialize_rows(execute(plan(task), MemoryContext(tables, batch_size=64)))
        assert rows_equal(engine, expected), f"engine diverged on trial {trial}"
        assert rows_equal(planned, expected), f"planner broke trial {trial}"
    _elapsed_under(start, 120, "oracle equivalence")
    _announce(3, "engine == planned engine == reference interpreter, 200 tasks")


# ---------------------------------------------------------------------------
# 4. pushdown byte accounting


def test_criterion_4_pushdown_byte_accounting():
    start = time.monotonic()
    rng = random.Random(0xB17E5)
    n = 100_000
    header = [f"c{i}" for i in range(10)]
    rows = [[i] + [rng.randint(10_000, 99_999) for _ in range(9)] for i in range(n)]
    spec = DatasetSpec("wide", files={"t.csv": csv_bytes(header, rows)})
    with Cluster.spawn([[spec]], batch_size=4096) as cluster:
        node = cluster.node(0)
        counters = node.server.counters
        uri = node.uri("wide", "t.csv")
        with connect(node.endpoint) as conn:
            counters.reset()
            assert sum(1 for _ in conn.get(uri).rows()) == n
            full = counters.payload_bytes("out", "BATCH")

            for selectivity in (0.01, 0.1):
                bound = int(n * selectivity)
                counters.reset()
                got = sum(1 for _ in conn.get(uri, predicate=f"c0 < {bound}").rows())
                assert got == bound
                filtered = counters.payload_bytes("out", "BATCH")
                assert filtered <= (selectivity + 0.01) * full, (
                    f"selectivity {selectivity}: {filtered} > "
                    f"{(selectivity + 0.01) * full:.0f} of {full}"
                )

            counters.reset()
            assert sum(1 for _ in conn.get(uri, projection=["c3"]).rows()) == n
            projected = counters.payload_bytes("out", "BATCH")
            assert projected <= 0.15 * full, f"projection moved {projected} of {full}"
    _elapsed_under(start, 60, "pushdown byte accounting")
    _announce(4, "predicate and projection pushdown bound wire bytes")


# ---------------------------------------------------------------------------
# 5. streaming latency and credit stall


def test_criterion_5_streaming_latency_and_stall():
    batch_period_s = 0.010
    batches = 100
    batch_size = 50
    rows = [[i] for i in range(batches * batch_size)]
    spec = DatasetSpec("paced", files={"t.csv": csv_bytes(["v"], rows)})
    with Cluster.spawn([[spec]], batch_size=batch_size, pace_s=batch_period_s) as cluster:
        node = cluster.node(0)

        conn = connect(node.endpoint)
        t0 = time.monotonic()
        sdf = conn.get(node.uri("paced", "t.csv"))
        first = next(sdf.rows())
        first_row_latency = time.monotonic() - t0
        assert first == [0]
        assert not sdf.end_stream_seen, "first row must arrive strictly before END_STREAM"
        assert first_row_latency < 5 * batch_period_s, (
            f"first row took {first_row_latency * 1000:.1f}ms"
        )
        sdf.close()
        conn.close()

        with RawClient(node.endpoint) as raw:
            token = raw.open()
            raw.send(wire.Get(token, node.uri("paced", "t.csv"), None, None, 2))
            assert isinstance(raw.recv(), wire.SchemaMsg)
            assert isinstance(raw.recv(), wire.BatchMsg)
            assert isinstance(raw.recv(), wire.BatchMsg)
            stall_start = time.monotonic()
            with pytest.raises(TimeoutError):
                raw.recv(timeout=1.0)
            assert time.monotonic() - stall_start >= 1.0
            assert node.server.counters.frames("out", "BATCH") == 2
    _announce(5, "first row beats END_STREAM; server stalls at exact credit")


# ---------------------------------------------------------------------------
# 6. federation scenario


def test_criterion_6_federation_scenario():
    rng = random.Random(0xFED)
    n = 10_000
    tables = [
        [[i, rng.randrange(0, 1000)] for i in range(n)],
        [[i, rng.randrange(0, 1000)] for i in range(n)],
    ]
    specs = [
        [DatasetSpec("ds", {"t.csv": csv_bytes(["id", "v"], tables[0])})],
        [DatasetSpec("ds", {"t.csv": csv_bytes(["id", "v"], tables[1])})],
        [],
    ]
    with Cluster.spawn(specs) as cluster:
        n0, n1 = cluster.node(0), cluster.node(1)
        task = DagTask(
            {
                "a": DagNode("a", GetSource(n0.uri("ds", "t.csv"))),
                "fa": DagNode("fa", FilterOp(parse_predicate("v < 100")), ("a",)),
                "b": DagNode("b", GetSource(n1.uri("ds", "t.csv"))),
                "fb": DagNode("fb", FilterOp(parse_predicate("v < 100")), ("b",)),
                "u": DagNode("u", UnionOp(), ("fa", "fb")),
            },
            "u",
        )
        fed = partition(plan(task), None)
        assert len(fed.fragments) == 2
        result = orchestrate(fed, Connection)

        # published but not yet pulled: in-situ sources must be untouched
        for node in (n0, n1):
            assert node.store_stats.source_batches == 0
            assert node.server.counters.frames("in", "PULL") == 0

        got = materialize_rows(result)
        kept = [[r for r in t if r[1] < 100] for t in tables]
        assert len(got) == len(kept[0]) + len(kept[1])
        assert rows_equal(got, kept[0] + kept[1])

        schema = Schema([Field("id", DataType.INT64), Field("v", DataType.INT64)])
        for node, subset in zip((n0, n1), kept):
            moved = node.server.counters.payload_bytes("out", "BATCH")
            encoded = len(wire.encode_batch(RecordBatch.from_rows(schema, subset)))
            assert abs(moved - encoded) / encoded < 0.05, (
                f"{node.endpoint} moved {moved}, filtered subset is {encoded}"
            )

        # all-local execution of the same task
        local_tables = {
            n0.uri("ds", "t.csv"): (schema, tables[0]),
            n1.uri("ds", "t.csv"): (schema, tables[1]),
        }
        local = materialize_rows(execute(plan(task), MemoryContext(local_tables, batch_size=4096)))
        assert rows_equal(got, local)
    _announce(6, "3-node federated union moves only the filtered subsets")


# ---------------------------------------------------------------------------
# 7. capability enforcement


def test_criterion_7_capability_enforcement():
    rng = random.Random(0x70CE)
    spec = DatasetSpec("ds", files={"t.csv": csv_bytes(["x"], [[i] for i in range(50)])})
    with Cluster.spawn([[spec]]) as cluster:
        node = cluster.node(0)
        server = node.server
        uri = node.uri("ds", "t.csv")
        cook_doc = (
            '{"nodes": [{"id": "g", "kind": "source.get", "uri": "%s", "inputs": []}],'
            ' "sink": "g"}' % uri
        )

        with connect(node.endpoint) as setup:
            session_token = setup._token
            publish_ok = setup.cook_publish(
                frame(None, uri).task(), ttl_seconds=600
            )
            consumed_ok = setup.cook_publish(frame(None, uri).task(), ttl_seconds=600)
            materialize_rows(setup.pull(consumed_ok.stream_id, consumed_ok.stream_token))
            expired_ok = setup.cook_publish(frame(None, uri).task(), ttl_seconds=1)
        expired_session, _ = server.issue_token(ttl=-1)
        time.sleep(1.1)
        server.published.sweep()

        def perturb(token: str) -> str:
            i = rng.randrange(len(token))
            repl = rng.choice([c for c in "AZaz09-_" if c != token[i]])
            return token[:i] + repl + token[i + 1 :]

        server.counters.reset()
        rejected = 0
        with RawClient(node.endpoint) as raw:
            raw.hello()
            raw.auth_anonymous()
            probes = []
            for _ in range(250):
                probes.append((wire.Get(perturb(session_token), uri, None, None, 1), FORBIDDEN))
            for _ in range(150):
                probes.append((wire.Cook(publish_ok.stream_token, cook_doc, 1), FORBIDDEN))
            for _ in range(150):
                probes.append((wire.Get(expired_session, uri, None, None, 1), TOKEN_EXPIRED))
            for _ in range(150):
                probes.append(
                    (wire.Pull(publish_ok.stream_id, session_token, 1), FORBIDDEN)
                )
            for _ in range(100):
                probes.append(
                    (wire.Pull(publish_ok.stream_id, perturb(publish_ok.stream_token), 1), FORBIDDEN)
                )
            for _ in range(100):
                probes.append(
                    (wire.Pull(expired_ok.stream_id, expired_ok.stream_token, 1), TOKEN_EXPIRED)
                )
            for _ in range(50):
                probes.append(
                    (wire.Pull(consumed_ok.stream_id, consumed_ok.stream_token, 1), NOT_FOUND)
                )
            for _ in range(50):
                probes.append((wire.Pull(rng.randbytes(16).hex(), publish_ok.stream_token, 1), NOT_FOUND))
            assert len(probes) == 1000
            rng.shuffle(probes)
            for msg, expected_code in probes:
                raw.send(msg)
                reply = raw.recv()
                assert isinstance(reply, wire.ErrorMsg), f"leak: {reply} for {msg}"
                assert reply.code == expected_code, f"{msg} -> {reply}"
                rejected += 1
        assert rejected == 1000
        assert server.counters.frames("out", "BATCH") == 0, "a BATCH frame leaked"
    _announce(7, "1000 bad-token probes rejected with exact codes, zero leaks")


# ---------------------------------------------------------------------------
# 8. file-list framing + drill-down


def test_criterion_8_file_list_and_drill_down():
    rng = random.Random(0xD1)
    mib = 1024 * 1024
    big = rng.randbytes(mib)
    csvs = {
        f"table{i}.csv": csv_bytes(["a", "b"], [[k, f"s{k}"] for k in range(20 * (i + 1))])
        for i in range(3)
    }
    files = {"big.dat": big, "empty": b"", **csvs}
    spec = DatasetSpec("fix", files=files)
    with Cluster.spawn([[spec]]) as cluster:
        node = cluster.node(0)
        root = node.root / "fix"
        with connect(node.endpoint) as conn:
            listing = materialize_rows(conn.get(node.uri("fix", "")))
            assert [r[0] for r in listing] == sorted(files)
            for name, path, fmt, size, mtime, blob in listing:
                st = (root / name).stat()
                assert path == name
                assert size == st.st_size == len(files[name])
                assert mtime == int(st.st_mtime)
                assert fmt == ("csv" if name.endswith(".csv") else "dat" if name.endswith(".dat") else "")
                assert blob.uri == node.uri("fix", name)
                assert blob.size_bytes == size

            csv_rows = materialize_rows(
                frame(conn, node.uri("fix", "")).filter("format = 'csv'").collect()
            )
            assert len(csv_rows) == 3
            assert all(r[2] == "csv" for r in csv_rows)

            # drill down: blob bytes reproduce the files hash-exactly
            for name, path, fmt, size, mtime, blob in listing:
                blob_conn_sdf = conn.get(blob.uri)
                if fmt == "csv":
                    direct = conn.get(node.uri("fix", name))
                    direct_schema = direct.schema
                    direct_rows = materialize_rows(direct)
                    via = conn.get(blob.uri)
                    assert via.schema == direct_schema
                    assert rows_equal(materialize_rows(via), direct_rows)
                    blob_conn_sdf.close()
                else:
                    rebuilt = b"".join(r[1] for r in blob_conn_sdf.rows())
                    assert hashlib.sha256(rebuilt).digest() == hashlib.sha256(files[name]).digest()
    _announce(8, "directory framing metadata exact; drill-down reproduces bytes")


# ---------------------------------------------------------------------------
# 9. laziness over a large file


@pytest.fixture(scope="module")
def million_row_node():
    lines = ["v,w"]
    lines.extend(f"{i},{i % 97}" for i in range(1_000_000))
    data = ("\n".join(lines) + "\n").encode()
    spec = DatasetSpec("big", files={"huge.csv": data})
    with Cluster.spawn([[spec]]) as cluster:
        yield cluster.node(0)


def test_criterion_9_limit_one_is_lazy(million_row_node):
    node = million_row_node
    task_doc = (
        '{"nodes": [{"id": "g", "kind": "source.get", "uri": "%s", "inputs": []},'
        '{"id": "l", "kind": "op.limit", "n": 1, "inputs": ["g"]}], "sink": "l"}'
        % node.uri("big", "huge.csv")
    )
    with connect(node.endpoint) as conn:
        node.store_stats.bytes_read = 0
        start = time.monotonic()
        rows = materialize_rows(conn.cook(task_doc))
        elapsed = time.monotonic() - start
    assert rows == [[0, 0]]
    assert elapsed < 1.0, f"limit(1) took {elapsed:.2f}s"
    bytes_read = node.store_stats.bytes_read
    assert bytes_read < 5 * 1024 * 1024, f"read {bytes_read} bytes"
    _announce(9, "limit(1) over a million-row file reads a sliver in under a second")
