"""Codec kernel selection.

Prefers the compiled extension; falls back to the pure-Python twin when the
extension is unavailable, the host is not little-endian, or the
``DACP_PURE_PYTHON`` environment variable is set to a non-empty value
other than "0".
"""

from __future__ import annotations

import os
import sys

from dacp.kernels import _pykernels

_FORCE_PURE = os.environ.get("DACP_PURE_PYTHON", "") not in ("", "0")

if not _FORCE_PURE and sys.byteorder == "little":
    try:
        from dacp.kernels import _ckernels as _impl

        BACKEND = "c"
    except ImportError:
        _impl = _pykernels
        BACKEND = "pure"
else:
    _impl = _pykernels
    BACKEND = "pure"

pack_validity = _impl.pack_validity
pack_bools = _impl.pack_bools
unpack_flags = _impl.unpack_flags
count_set = _impl.count_set
pack_int32 = _impl.pack_int32
pack_int64 = _impl.pack_int64
pack_float32 = _impl.pack_float32
pack_float64 = _impl.pack_float64
unpack_int32 = _impl.unpack_int32
unpack_int64 = _impl.unpack_int64
unpack_float32 = _impl.unpack_float32
unpack_float64 = _impl.unpack_float64
unpack_bools = _impl.unpack_bools
build_offsets = _impl.build_offsets
parse_offsets = _impl.parse_offsets

__all__ = [
    "BACKEND",
    "pack_validity",
    "pack_bools",
    "unpack_flags",
    "count_set",
    "pack_int32",
    "pack_int64",
    "pack_float32",
    "pack_float64",
    "unpack_int32",
    "unpack_int64",
    "unpack_float32",
    "unpack_float64",
    "unpack_bools",
    "build_offsets",
    "parse_offsets",
]
