"""End-to-end server/client behavior over loopback sockets."""

import random
import time

import pytest

from genutil import gen_rows, gen_schema, rows_equal
from oracle import oracle_execute
from wirehelp import RawClient
from dacp import wire
from dacp.client import Connection, Credentials, connect, frame
from dacp.dag import parse_dag, serialize_dag
from dacp.errors import (
    AUTH_FAILED,
    BAD_REQUEST,
    FORBIDDEN,
    NOT_FOUND,
    TYPE_ERROR,
    TOKEN_EXPIRED,
    BadRequestError,
    DacpTypeError,
    ForbiddenError,
    NotFoundError,
    StreamConsumedError,
    TokenExpiredError,
)
from dacp.harness import Cluster, DatasetSpec, csv_bytes
from dacp.sdf import DataType, Field, Schema, materialize_rows, sdf_from_rows
from dacp.server import hash_password

ROWS_X = [[i] for i in range(1, 7)]


@pytest.fixture()
def node():
    specs = [
        [
            DatasetSpec(
                "ds",
                files={
                    "x.csv": csv_bytes(["x"], ROWS_X),
                    "t.csv": csv_bytes(["a", "b"], [[1, "p"], [2, "q"], [3, "r"]]),
                },
                writable=True,
            ),
            DatasetSpec("private", files={"s.csv": csv_bytes(["v"], [[1]])}, access="authenticated"),
        ]
    ]
    with Cluster.spawn([specs[0]], users={"alice": hash_password("secret")}) as cluster:
        yield cluster.node(0)


def _uri(node, path, ds="ds"):
    return node.uri(ds, path)


class TestHandshake:
    def test_anonymous_connect(self, node):
        conn = connect(node.endpoint)
        assert conn.auth_count == 1
        conn.close()

    def test_bad_password_closes_connection(self, node):
        with RawClient(node.endpoint) as raw:
            raw.hello()
            reply = raw.auth_basic("alice", "wrong")
            assert isinstance(reply, wire.ErrorMsg) and reply.code == AUTH_FAILED
            assert raw.recv() is None  # server closed

    def test_good_password(self, node):
        conn = connect(node.endpoint, username="alice", password="secret")
        rows = materialize_rows(conn.get(_uri(node, "s.csv", ds="private")))
        assert rows == [[1]]
        conn.close()

    def test_get_before_auth(self, node):
        with RawClient(node.endpoint) as raw:
            raw.hello()
            raw.send(wire.Get("tok", _uri(node, "x.csv"), None, None, 1))
            reply = raw.recv()
            assert isinstance(reply, wire.ErrorMsg) and reply.code == BAD_REQUEST

    def test_wrong_first_frame(self, node):
        with RawClient(node.endpoint) as raw:
            raw.send(wire.Credit(1))
            reply = raw.recv()
            assert isinstance(reply, wire.ErrorMsg) and reply.code == BAD_REQUEST
            assert raw.recv() is None

    def test_bad_version(self, node):
        with RawClient(node.endpoint) as raw:
            raw.hello(version=9)
            reply = raw.recv()
            assert isinstance(reply, wire.ErrorMsg) and reply.code == BAD_REQUEST
            assert raw.recv() is None

    def test_client_surfaces_auth_failure(self, node):
        with pytest.raises(Exception) as info:
            connect(node.endpoint, username="alice", password="nope")
        assert getattr(info.value, "code", None) == AUTH_FAILED


class TestGet:
    def test_full_table(self, node):
        with connect(node.endpoint) as conn:
            sdf = conn.get(_uri(node, "x.csv"))
            assert sdf.schema == Schema([Field("x", DataType.INT64)])
            assert materialize_rows(sdf) == ROWS_X
            assert sdf.total_rows == 6

    def test_predicate_pushdown_row_count(self, node):
        node.server.counters.reset()
        with connect(node.endpoint) as conn:
            rows = materialize_rows(conn.get(_uri(node, "x.csv"), predicate="x > 3"))
        assert rows == [[4], [5], [6]]

    def test_predicate_reduces_wire_bytes(self, node):
        counters = node.server.counters
        with connect(node.endpoint) as conn:
            counters.reset()
            materialize_rows(conn.get(_uri(node, "x.csv")))
            full = counters.payload_bytes("out", "BATCH")
            counters.reset()
            materialize_rows(conn.get(_uri(node, "x.csv"), predicate="x > 5"))
            filtered = counters.payload_bytes("out", "BATCH")
        assert 0 < filtered < full

    def test_projection(self, node):
        with connect(node.endpoint) as conn:
            sdf = conn.get(_uri(node, "t.csv"), projection=["b"])
            assert sdf.schema.names == ("b",)
            assert materialize_rows(sdf) == [["p"], ["q"], ["r"]]

    def test_predicate_over_dropped_column_is_type_error(self, node):
        with connect(node.endpoint) as conn:
            with pytest.raises(DacpTypeError):
                conn.get(_uri(node, "t.csv"), projection=["b"], predicate="a > 1")

    def test_directory_listing_schema(self, node):
        with connect(node.endpoint) as conn:
            sdf = conn.get(_uri(node, ""))
            names = [f.name for f in sdf.schema.fields]
            assert names == ["name", "path", "format", "size_bytes", "modified_unix", "content"]
            rows = materialize_rows(sdf)
            assert [r[0] for r in rows] == ["t.csv", "x.csv"]

    def test_not_found(self, node):
        with connect(node.endpoint) as conn:
            with pytest.raises(NotFoundError):
                conn.get(_uri(node, "ghost.csv"))

    def test_anonymous_forbidden_on_authenticated_dataset(self, node):
        with connect(node.endpoint) as conn:
            with pytest.raises(ForbiddenError):
                conn.get(_uri(node, "s.csv", ds="private"))

    def test_expired_token(self, node):
        token, _ = node.server.issue_token(ttl=-1)
        conn = Connection(node.endpoint, token=token)
        with pytest.raises(TokenExpiredError):
            conn.get(_uri(node, "x.csv"))
        conn.close()

    def test_injected_token(self, node):
        token, _ = node.server.issue_token()
        conn = Connection(node.endpoint, token=token)
        assert materialize_rows(conn.get(_uri(node, "x.csv"))) == ROWS_X
        conn.close()

    def test_connection_busy_during_stream(self, node):
        with connect(node.endpoint) as conn:
            sdf = conn.get(_uri(node, "x.csv"))
            it = sdf.rows()
            next(it)
            with pytest.raises(StreamConsumedError):
                conn.get(_uri(node, "x.csv"))
            sdf.close()

    def test_connection_reusable_after_stream(self, node):
        with connect(node.endpoint) as conn:
            materialize_rows(conn.get(_uri(node, "x.csv")))
            assert materialize_rows(conn.get(_uri(node, "x.csv"))) == ROWS_X


class TestCredit:
    def _multi_batch_node(self):
        rows = [[i] for i in range(100)]
        spec = DatasetSpec("ds", files={"big.csv": csv_bytes(["v"], rows)})
        return Cluster.spawn([[spec]], batch_size=10)

    def test_stall_at_exact_credit(self):
        with self._multi_batch_node() as cluster:
            node = cluster.node(0)
            with RawClient(node.endpoint) as raw:
                token = raw.open()
                raw.send(wire.Get(token, node.uri("ds", "big.csv"), None, None, 2))
                assert isinstance(raw.recv(), wire.SchemaMsg)
                assert isinstance(raw.recv(), wire.BatchMsg)
                assert isinstance(raw.recv(), wire.BatchMsg)
                start = time.monotonic()
                with pytest.raises(TimeoutError):
                    raw.recv(timeout=1.0)
                assert time.monotonic() - start >= 1.0
                assert node.server.counters.frames("out", "BATCH") == 2
                # replenish and drain the rest
                raw.send(wire.Credit(1000))
                batches = 0
                while True:
                    msg = raw.recv()
                    if isinstance(msg, wire.EndStream):
                        assert msg.total_rows == 100
                        break
                    assert isinstance(msg, wire.BatchMsg)
                    batches += 1
                assert batches == 8

    def test_zero_initial_credit_defaults_to_four(self):
        with self._multi_batch_node() as cluster:
            node = cluster.node(0)
            with RawClient(node.endpoint) as raw:
                token = raw.open()
                raw.send(wire.Get(token, node.uri("ds", "big.csv"), None, None, 0))
                assert isinstance(raw.recv(), wire.SchemaMsg)
                for _ in range(4):
                    assert isinstance(raw.recv(), wire.BatchMsg)
                with pytest.raises(TimeoutError):
                    raw.recv(timeout=0.5)

    def test_end_stream_only_after_all_batches(self):
        with self._multi_batch_node() as cluster:
            node = cluster.node(0)
            with RawClient(node.endpoint) as raw:
                token = raw.open()
                raw.send(wire.Get(token, node.uri("ds", "big.csv"), None, None, 4))
                assert isinstance(raw.recv(), wire.SchemaMsg)
                schema = Schema([Field("v", DataType.INT64)])
                rows, batches = raw.drain_stream(schema)
                assert batches == 10
                assert len(rows) == 100

    def test_server_never_outruns_window(self):
        with self._multi_batch_node() as cluster:
            node = cluster.node(0)
            with connect(node.endpoint, window=4) as conn:
                sdf = conn.get(node.uri("ds", "big.csv"))
                it = sdf.batches()
                consumed = 0
                for _ in range(3):
                    next(it)
                    consumed += 1
                    time.sleep(0.05)
                    sent = node.server.counters.frames("out", "BATCH")
                    assert sent <= consumed + 5  # window + in-flight slack
                sdf.close()


class TestPut:
    def test_round_trip(self, node):
        schema = Schema([Field("a", DataType.INT64, True), Field("b", DataType.UTF8, True)])
        rows = [[1, "x"], [None, ""], [3, "z,z"]]
        with connect(node.endpoint) as conn:
            written = conn.put(_uri(node, "up.csv"), sdf_from_rows(schema, rows))
            assert written == 3
            back = conn.get(_uri(node, "up.csv"))
            assert back.schema == schema
            assert rows_equal(materialize_rows(back), rows)

    def test_zero_rows(self, node):
        schema = Schema([Field("a", DataType.INT64)])
        with connect(node.endpoint) as conn:
            assert conn.put(_uri(node, "empty.csv"), sdf_from_rows(schema, [])) == 0
            back = conn.get(_uri(node, "empty.csv"))
            assert back.schema == schema
            assert materialize_rows(back) == []

    def test_mid_stream_violation_no_file(self, node):
        schema = Schema([Field("a", DataType.INT64)])  # non-nullable
        with RawClient(node.endpoint) as raw:
            token = raw.open()
            raw.send(wire.PutBegin(token, _uri(node, "bad.csv"), schema))
            good = wire.encode_batch(
                __import__("dacp.sdf", fromlist=["RecordBatch"]).RecordBatch.from_rows(schema, [[1]])
            )
            raw.send(wire.BatchMsg(good))
            # null in a non-nullable column, handcrafted on the wire
            bad = b"\x01\x00\x00\x00" + b"\x00" + b"\x00" * 8
            raw.send(wire.BatchMsg(bad))
            reply = raw.recv()
            assert isinstance(reply, wire.ErrorMsg) and reply.code == TYPE_ERROR
            assert raw.recv() is None  # connection closed
        with connect(node.endpoint) as conn:
            with pytest.raises(NotFoundError):
                conn.get(_uri(node, "bad.csv"))

    def test_put_to_read_only_dataset(self, node):
        schema = Schema([Field("v", DataType.INT64)])
        with connect(node.endpoint, username="alice", password="secret") as conn:
            with pytest.raises(ForbiddenError):
                conn.put(_uri(node, "nope.csv", ds="private"), sdf_from_rows(schema, [[1]]))

    def test_random_tables_round_trip(self, node):
        rng = random.Random(2)
        with connect(node.endpoint) as conn:
            for trial in range(10):
                schema = gen_schema(rng)
                rows = gen_rows(rng, schema, rng.randint(0, 300))
                uri = _uri(node, f"rt{trial}.csv")
                assert conn.put(uri, sdf_from_rows(schema, rows)) == len(rows)
                back = conn.get(uri)
                assert back.schema == schema
                assert rows_equal(materialize_rows(back), rows)

    def test_binary_put_then_get(self, node):
        from dacp.datasource import BINARY_CHUNK_SCHEMA

        data = random.Random(5).randbytes(3_000_000)
        chunks = [[i, data[i * 2**20 : (i + 1) * 2**20]] for i in range(3)]
        with connect(node.endpoint) as conn:
            conn.put(_uri(node, "raw.bin"), sdf_from_rows(BINARY_CHUNK_SCHEMA, chunks, batch_size=1))
            back = conn.get(_uri(node, "raw.bin"))
            rebuilt = b"".join(r[1] for r in back.rows())
            assert rebuilt == data


class TestCook:
    def test_chain_matches_oracle(self, node):
        schema = Schema([Field("a", DataType.INT64), Field("b", DataType.UTF8)])
        table_rows = [[1, "p"], [2, "q"], [3, "r"]]
        doc = {
            "nodes": [
                {"id": "g", "kind": "source.get", "uri": _uri(node, "t.csv"), "inputs": []},
                {"id": "f", "kind": "op.filter", "predicate": "a >= 2", "inputs": ["g"]},
                {"id": "s", "kind": "op.select", "columns": ["b"], "inputs": ["f"]},
            ],
            "sink": "s",
        }
        import json

        task = parse_dag(json.dumps(doc))
        _, expected = oracle_execute(task, {_uri(node, "t.csv"): (schema, table_rows)})
        with connect(node.endpoint) as conn:
            got = materialize_rows(conn.cook(json.dumps(doc)))
        assert rows_equal(got, expected)

    def test_cyclic_dag_rejected(self, node):
        doc = (
            '{"nodes": [{"id": "a", "kind": "op.limit", "n": 1, "inputs": ["b"]},'
            '{"id": "b", "kind": "op.limit", "n": 1, "inputs": ["a"]}], "sink": "a"}'
        )
        with connect(node.endpoint) as conn:
            with pytest.raises(BadRequestError):
                conn.cook(doc)

    def test_union_order(self, node):
        doc = {
            "nodes": [
                {"id": "l", "kind": "source.get", "uri": _uri(node, "x.csv"), "inputs": []},
                {"id": "r", "kind": "source.get", "uri": _uri(node, "x.csv"), "inputs": []},
                {"id": "fl", "kind": "op.filter", "predicate": "x <= 2", "inputs": ["l"]},
                {"id": "fr", "kind": "op.filter", "predicate": "x >= 5", "inputs": ["r"]},
                {"id": "u", "kind": "op.union", "inputs": ["fl", "fr"]},
            ],
            "sink": "u",
        }
        import json

        with connect(node.endpoint) as conn:
            got = materialize_rows(conn.cook(json.dumps(doc)))
        assert got == [[1], [2], [5], [6]]

    def test_non_local_source_rejected(self, node):
        doc = (
            '{"nodes": [{"id": "g", "kind": "source.get",'
            ' "uri": "dacp://elsewhere:9999/ds/x.csv", "inputs": []}], "sink": "g"}'
        )
        with connect(node.endpoint) as conn:
            with pytest.raises(BadRequestError, match="not local"):
                conn.cook(doc)

    def test_builder_identity_chain(self, node):
        with connect(node.endpoint) as conn:
            via_builder = materialize_rows(frame(conn, _uri(node, "x.csv")).collect())
            via_get = materialize_rows(conn.get(_uri(node, "x.csv")))
        assert via_builder == via_get

    def test_builder_document_round_trip(self, node):
        builder = (
            frame(None, _uri(node, "t.csv"))
            .filter("a > 1")
            .select(["a"])
            .map("twice", "a * 2")
            .limit(5)
        )
        task = builder.task()
        assert parse_dag(serialize_dag(task)) == task

    def test_builder_union_and_chain(self, node):
        with connect(node.endpoint) as conn:
            left = frame(conn, _uri(node, "x.csv")).filter("x <= 2")
            right = frame(conn, _uri(node, "x.csv")).filter("x = 6")
            rows = materialize_rows(left.union(right).collect())
        assert rows == [[1], [2], [6]]

    def test_cook_streams_before_source_finishes(self, node):
        # first batch arrives while the server is still producing
        rows = [[i] for i in range(50)]
        spec = DatasetSpec("ds", files={"paced.csv": csv_bytes(["v"], rows)})
        with Cluster.spawn([[spec]], batch_size=5, pace_s=0.05) as cluster:
            paced = cluster.node(0)
            with connect(paced.endpoint) as conn:
                sdf = conn.get(paced.uri("ds", "paced.csv"))
                start = time.monotonic()
                first = next(sdf.rows())
                elapsed = time.monotonic() - start
                assert first == [0]
                assert not sdf.end_stream_seen
                assert elapsed < 0.5  # 10 batches x 50ms if it had buffered fully
                sdf.close()


class TestPublishPull:
    def _publish(self, conn, node, ttl=600):
        doc = serialize_dag(
            frame(None, _uri(node, "x.csv")).filter("x > 3").task()
        )
        return conn.cook_publish(doc, ttl)

    def test_publish_then_pull(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
            assert len(ok.stream_id) == 32
            sdf = conn.pull(ok.stream_id, ok.stream_token)
            assert materialize_rows(sdf) == [[4], [5], [6]]

    def test_second_pull_not_found(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
            materialize_rows(conn.pull(ok.stream_id, ok.stream_token))
            with pytest.raises(NotFoundError):
                conn.pull(ok.stream_id, ok.stream_token)

    def test_tampered_token_forbidden(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
            bad = ("A" if ok.stream_token[0] != "A" else "B") + ok.stream_token[1:]
            with pytest.raises(ForbiddenError):
                conn.pull(ok.stream_id, bad)

    def test_session_token_is_mis_scoped_for_pull(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
            with pytest.raises(ForbiddenError):
                conn.pull(ok.stream_id, conn._token)

    def test_stream_token_rejected_for_get(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
            hijack = Connection(node.endpoint, token=ok.stream_token)
            with pytest.raises(ForbiddenError):
                hijack.get(_uri(node, "x.csv"))
            hijack.close()

    def test_unknown_stream_not_found(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
            with pytest.raises(NotFoundError):
                conn.pull("ff" * 16, ok.stream_token)

    def test_expired_stream_reports_expiry(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node, ttl=1)
            time.sleep(1.1)
            node.server.published.sweep()
            assert node.server.published.pending_count() == 0
            with pytest.raises(TokenExpiredError):
                conn.pull(ok.stream_id, ok.stream_token)

    def test_bad_ttl_rejected(self, node):
        with connect(node.endpoint) as conn:
            doc = serialize_dag(frame(None, _uri(node, "x.csv")).task())
            with pytest.raises(BadRequestError):
                conn.cook_publish(doc, 0)
            with pytest.raises(BadRequestError):
                conn.cook_publish(doc, 4000)

    def test_publish_is_lazy(self, node):
        stats = node.store_stats
        with connect(node.endpoint) as conn:
            before = stats.source_batches
            ok = self._publish(conn, node)
            assert stats.source_batches == before  # no data production at publish
            sdf = conn.pull(ok.stream_id, ok.stream_token)
            assert stats.source_batches == before  # nor before the first pull
            materialize_rows(sdf)
            assert stats.source_batches > before

    def test_pull_without_session_auth(self, node):
        with connect(node.endpoint) as conn:
            ok = self._publish(conn, node)
        from dacp.client import open_pull

        sdf = open_pull(node.endpoint, ok.stream_id, ok.stream_token)
        assert materialize_rows(sdf) == [[4], [5], [6]]


class TestReauth:
    def test_near_expiry_triggers_exactly_one_reauth(self, node):
        clock = [time.time()]
        conn = Connection(
            node.endpoint,
            credentials=Credentials("alice", "secret"),
            now_fn=lambda: clock[0],
        )
        materialize_rows(conn.get(_uri(node, "x.csv")))
        assert conn.auth_count == 1
        clock[0] += node.server.token_ttl - 30  # inside the 60 s margin
        materialize_rows(conn.get(_uri(node, "x.csv")))
        assert conn.auth_count == 2
        conn.close()
