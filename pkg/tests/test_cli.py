"""CLI dispatch, renderers, and exit codes."""

import json

import pytest

from dacp.cli import main
from dacp.harness import Cluster, DatasetSpec, csv_bytes
from dacp.server import DacpServer, ServerConfig, hash_password

ROWS = [[1, "p"], [2, "q"], [3, "r"], [4, "s"]]


@pytest.fixture()
def node():
    spec = DatasetSpec(
        "ds",
        files={"t.csv": csv_bytes(["x", "s"], ROWS), "blob.bin": b"\x01\x02\x03"},
        writable=True,
    )
    with Cluster.spawn([[spec]]) as cluster:
        yield cluster.node(0)


class TestGet:
    def test_csv_output_with_predicate(self, node, capsys):
        rc = main(["get", node.uri("ds", "t.csv"), "--where", "x > 3", "--output", "csv"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out == "x,s\n4,s\n"

    def test_jsonl_output(self, node, capsys):
        rc = main(["get", node.uri("ds", "t.csv"), "--output", "jsonl", "--columns", "x"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [json.loads(l) for l in lines] == [{"x": v} for v in (1, 2, 3, 4)]

    def test_output_to_file(self, node, tmp_path):
        target = tmp_path / "out.csv"
        rc = main(["get", node.uri("ds", "t.csv"), "-o", str(target)])
        assert rc == 0
        assert target.read_text().splitlines()[0] == "x,s"

    def test_not_found_exits_one(self, node, capsys):
        rc = main(["get", node.uri("ds", "missing.csv")])
        assert rc == 1
        assert "NOT_FOUND" in capsys.readouterr().err

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as info:
            main(["get"])  # missing URI
        assert info.value.code == 2


class TestLs:
    def test_lists_without_content_column(self, node, capsys):
        rc = main(["ls", node.uri("ds", "")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "name" in out and "blob.bin" in out and "t.csv" in out
        assert "content" not in out

    def test_empty_dataset(self, tmp_path, capsys):
        with Cluster.spawn([[DatasetSpec("empty")]]) as cluster:
            rc = main(["ls", cluster.node(0).uri("empty", "")])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].split()[0] == "name"


class TestPutAndCook:
    def test_put_then_get(self, node, tmp_path, capsys):
        src = tmp_path / "up.csv"
        src.write_text("a,b\r\n10,x\r\n20,y\r\n")
        rc = main(["put", node.uri("ds", "up.csv"), str(src)])
        assert rc == 0
        assert "rows_written=2" in capsys.readouterr().err
        rc = main(["get", node.uri("ds", "up.csv")])
        assert rc == 0
        assert "10,x" in capsys.readouterr().out

    def test_put_missing_file(self, node, capsys):
        rc = main(["put", node.uri("ds", "up.csv"), "/does/not/exist.csv"])
        assert rc == 2

    def test_cook_dag_file(self, node, tmp_path, capsys):
        doc = {
            "nodes": [
                {"id": "g", "kind": "source.get", "uri": node.uri("ds", "t.csv"), "inputs": []},
                {"id": "f", "kind": "op.filter", "predicate": "x >= 3", "inputs": ["g"]},
            ],
            "sink": "f",
        }
        dag = tmp_path / "dag.json"
        dag.write_text(json.dumps(doc))
        rc = main(["cook", "--dag", str(dag)])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.splitlines() == ["x,s", "3,r", "4,s"]

    def test_cook_bad_dag_exits_one(self, node, tmp_path, capsys):
        doc = {"nodes": [], "sink": "zz"}
        dag = tmp_path / "bad.json"
        dag.write_text(json.dumps(doc))
        rc = main(["cook", "--dag", str(dag)])
        assert rc == 1
        assert "BAD_REQUEST" in capsys.readouterr().err


class TestBench:
    def test_transfer_report(self, node, capsys):
        rc = main(["bench", node.uri("ds", "t.csv"), "--baseline-dir", str(node.root)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "wire_payload_bytes=" in out and "baseline_bytes=" in out

    def test_kernel_comparison(self, capsys):
        rc = main(["bench", "--kernels"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "pack_int64" in out


def test_fedtest_smoke(capsys):
    rc = main(["fedtest", "--rows", "800"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "match=yes" in out


def test_serve_config_loading(tmp_path):
    data_root = tmp_path / "data"
    data_root.mkdir()
    (data_root / "a.csv").write_text("v\n1\n")
    datasets = tmp_path / "datasets.json"
    datasets.write_text(json.dumps({"datasets": [{"name": "d", "root": "data"}]}))
    users = tmp_path / "users.json"
    users.write_text(json.dumps([{"username": "u", "password_hash": hash_password("p")}]))
    config = tmp_path / "server.json"
    config.write_text(
        json.dumps(
            {
                "listen": "127.0.0.1:0",
                "datasets_file": "datasets.json",
                "users_file": "users.json",
                "batch_size": 256,
                "token_ttl_seconds": 120,
            }
        )
    )
    server = DacpServer.from_config(ServerConfig.from_file(config))
    server.start()
    try:
        from dacp.client import connect
        from dacp.sdf import materialize_rows

        with connect(server.endpoint, username="u", password="p") as conn:
            assert materialize_rows(conn.get(f"dacp://{server.endpoint}/d/a.csv")) == [[1]]
    finally:
        server.stop()


def test_serve_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as info:
        main(["serve", "--help"])
    assert info.value.code == 0
