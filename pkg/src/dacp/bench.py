"""Informational benchmarks.

``transfer_bench`` compares a streamed GET against a naive whole-file
read-and-copy baseline over the same files (the legacy transfer model).
``kernel_bench`` compares the compiled codec kernels against the
pure-Python fallback on synthetic columns.
"""

from __future__ import annotations

import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dacp.channel import FrameCounters
from dacp.client import Connection
from dacp.kernels import _pykernels

try:
    from dacp.kernels import _ckernels
except ImportError:  # pure-only build
    _ckernels = None


@dataclass
class TransferReport:
    uri: str
    rows: int
    wire_payload_bytes: int
    time_to_first_batch_s: float
    total_time_s: float
    baseline_bytes: Optional[int] = None
    baseline_time_s: Optional[float] = None

    @property
    def throughput_mb_s(self) -> float:
        if self.total_time_s <= 0:
            return 0.0
        return self.wire_payload_bytes / self.total_time_s / 1e6

    @property
    def baseline_mb_s(self) -> Optional[float]:
        if not self.baseline_time_s:
            return None
        return (self.baseline_bytes or 0) / self.baseline_time_s / 1e6


def transfer_bench(
    endpoint: str,
    uri: str,
    *,
    username: Optional[str] = None,
    password: Optional[str] = None,
    baseline_dir: Optional[Path] = None,
) -> TransferReport:
    counters = FrameCounters()
    creds = None
    if username is not None:
        from dacp.client import Credentials

        creds = Credentials(username, password or "")
    conn = Connection(endpoint, credentials=creds, counters=counters)
    try:
        start = time.perf_counter()
        sdf = conn.get(uri)
        ttfb = None
        rows = 0
        for batch in sdf.batches():
            if ttfb is None:
                ttfb = time.perf_counter() - start
            rows += batch.row_count
        total = time.perf_counter() - start
    finally:
        conn.close()
    report = TransferReport(
        uri=uri,
        rows=rows,
        wire_payload_bytes=counters.payload_bytes("in", "BATCH"),
        time_to_first_batch_s=ttfb if ttfb is not None else total,
        total_time_s=total,
    )
    if baseline_dir is not None:
        report.baseline_bytes, report.baseline_time_s = _baseline_copy(Path(baseline_dir))
    return report


def _baseline_copy(src: Path) -> tuple[int, float]:
    """Whole-file read+copy of every file under src (recursive)."""
    files = [p for p in sorted(src.rglob("*")) if p.is_file()] if src.is_dir() else [src]
    start = time.perf_counter()
    total = 0
    with tempfile.TemporaryDirectory(prefix="dacp-bench-") as tmp:
        for i, path in enumerate(files):
            data = path.read_bytes()
            total += len(data)
            (Path(tmp) / f"copy{i}").write_bytes(data)
    return total, time.perf_counter() - start


@dataclass
class KernelTiming:
    name: str
    pure_s: float
    compiled_s: Optional[float]

    @property
    def speedup(self) -> Optional[float]:
        if self.compiled_s is None or self.compiled_s <= 0:
            return None
        return self.pure_s / self.compiled_s


def kernel_bench(rows: int = 200_000, repeat: int = 3) -> list[KernelTiming]:
    """Time each hot kernel on both backends over synthetic data."""
    ints = [i - rows // 2 if i % 7 else None for i in range(rows)]
    floats = [float(i) * 0.5 if i % 5 else None for i in range(rows)]
    bools = [bool(i & 1) if i % 3 else None for i in range(rows)]
    lengths = [i % 40 for i in range(rows)]
    validity_pure = _pykernels.pack_validity(ints, rows)
    int_data = _pykernels.pack_int64(ints, rows)
    float_data = _pykernels.pack_float64(floats, rows)

    cases = [
        ("pack_validity", lambda m: m.pack_validity(ints, rows)),
        ("pack_bools", lambda m: m.pack_bools(bools, rows)),
        ("pack_int64", lambda m: m.pack_int64(ints, rows)),
        ("pack_float64", lambda m: m.pack_float64(floats, rows)),
        ("unpack_int64", lambda m: m.unpack_int64(int_data, rows, validity_pure)),
        ("unpack_float64", lambda m: m.unpack_float64(float_data, rows, validity_pure)),
        ("build_offsets", lambda m: m.build_offsets(lengths)),
        ("count_set", lambda m: m.count_set(validity_pure, rows)),
    ]

    def best(fn, mod) -> float:
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn(mod)
            times.append(time.perf_counter() - t0)
        return min(times)

    out = []
    for name, fn in cases:
        pure = best(fn, _pykernels)
        compiled = best(fn, _ckernels) if _ckernels is not None else None
        out.append(KernelTiming(name, pure, compiled))
    return out
