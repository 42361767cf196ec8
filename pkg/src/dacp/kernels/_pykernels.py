"""Pure-Python codec kernels.

Fallback twin of the compiled extension in ``_ckernels.pyx``; both expose
the same functions with identical behavior. Bitmaps are LSB-first (bit j
of byte j//8 is row j), integers and floats little-endian, offsets u32.
"""

from __future__ import annotations

import struct


def pack_validity(values, n):
    """Bitmap with bit i set iff values[i] is not None; pad bits zero."""
    acc = 0
    for i in range(n):
        if values[i] is not None:
            acc |= 1 << i
    return acc.to_bytes((n + 7) // 8, "little")


def pack_bools(values, n):
    """Bool column data bitmap: bit i set iff values[i] is truthy (None -> 0)."""
    acc = 0
    for i in range(n):
        if values[i]:
            acc |= 1 << i
    return acc.to_bytes((n + 7) // 8, "little")


def unpack_flags(buf, n):
    """Expand the first n bits of an LSB-first bitmap to a list of bools."""
    acc = int.from_bytes(buf, "little")
    return [bool((acc >> i) & 1) for i in range(n)]


def count_set(buf, n):
    """Popcount of the first n bits (pad bits ignored)."""
    if n == 0:
        return 0
    acc = int.from_bytes(buf, "little") & ((1 << n) - 1)
    return acc.bit_count()


def pack_int32(values, n):
    return struct.pack(f"<{n}i", *(0 if v is None else v for v in values))


def pack_int64(values, n):
    return struct.pack(f"<{n}q", *(0 if v is None else v for v in values))


def pack_float32(values, n):
    return struct.pack(f"<{n}f", *(0.0 if v is None else v for v in values))


def pack_float64(values, n):
    return struct.pack(f"<{n}d", *(0.0 if v is None else v for v in values))


def unpack_int32(buf, n, validity):
    raw = struct.unpack(f"<{n}i", buf)
    acc = int.from_bytes(validity, "little")
    return [raw[i] if (acc >> i) & 1 else None for i in range(n)]


def unpack_int64(buf, n, validity):
    raw = struct.unpack(f"<{n}q", buf)
    acc = int.from_bytes(validity, "little")
    return [raw[i] if (acc >> i) & 1 else None for i in range(n)]


def unpack_float32(buf, n, validity):
    raw = struct.unpack(f"<{n}f", buf)
    acc = int.from_bytes(validity, "little")
    return [raw[i] if (acc >> i) & 1 else None for i in range(n)]


def unpack_float64(buf, n, validity):
    raw = struct.unpack(f"<{n}d", buf)
    acc = int.from_bytes(validity, "little")
    return [raw[i] if (acc >> i) & 1 else None for i in range(n)]


def unpack_bools(buf, n, validity):
    data = int.from_bytes(buf, "little")
    acc = int.from_bytes(validity, "little")
    return [bool((data >> i) & 1) if (acc >> i) & 1 else None for i in range(n)]


def build_offsets(lengths):
    """Tight offsets array for variable-width data: (n+1) u32, offsets[0]=0."""
    n = len(lengths)
    offs = [0] * (n + 1)
    total = 0
    for i, ln in enumerate(lengths):
        total += ln
        offs[i + 1] = total
    if total > 0xFFFFFFFF:
        raise ValueError("variable-width data exceeds u32 offset range")
    return struct.pack(f"<{n + 1}I", *offs)


def parse_offsets(buf, n):
    """Decode and validate (n+1) u32 offsets; raises ValueError if not
    starting at zero or not non-decreasing."""
    offs = struct.unpack(f"<{n + 1}I", buf)
    if offs[0] != 0:
        raise ValueError("offsets[0] != 0")
    prev = 0
    for o in offs[1:]:
        if o < prev:
            raise ValueError("offsets not non-decreasing")
        prev = o
    return list(offs)
