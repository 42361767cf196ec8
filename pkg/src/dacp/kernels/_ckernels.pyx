# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled codec kernels.

Behavioral twin of ``_pykernels``; see that module for the layout rules.
Assumes a little-endian host (the selector in ``__init__`` enforces this).
"""

from libc.stdint cimport int32_t, int64_t, uint8_t, uint32_t, uint64_t


def pack_validity(values, Py_ssize_t n):
    cdef bytearray out = bytearray((n + 7) >> 3)
    cdef uint8_t[::1] buf = out
    cdef Py_ssize_t i
    for i in range(n):
        if values[i] is not None:
            buf[i >> 3] |= <uint8_t> (1 << (i & 7))
    return bytes(out)


def pack_bools(values, Py_ssize_t n):
    cdef bytearray out = bytearray((n + 7) >> 3)
    cdef uint8_t[::1] buf = out
    cdef Py_ssize_t i
    for i in range(n):
        if values[i]:
            buf[i >> 3] |= <uint8_t> (1 << (i & 7))
    return bytes(out)


def unpack_flags(buf, Py_ssize_t n):
    if n == 0:
        return []
    cdef const uint8_t[::1] mv = buf
    cdef list out = [False] * n
    cdef Py_ssize_t i
    for i in range(n):
        if (mv[i >> 3] >> (i & 7)) & 1:
            out[i] = True
    return out


def count_set(buf, Py_ssize_t n):
    if n == 0:
        return 0
    cdef const uint8_t[::1] mv = buf
    cdef Py_ssize_t i, total = 0
    for i in range(n):
        if (mv[i >> 3] >> (i & 7)) & 1:
            total += 1
    return total


def pack_int32(values, Py_ssize_t n):
    cdef bytearray out = bytearray(4 * n)
    cdef uint8_t[::1] raw = out
    cdef int32_t* buf = <int32_t*> &raw[0] if n else NULL
    cdef Py_ssize_t i
    for i in range(n):
        v = values[i]
        buf[i] = 0 if v is None else <int32_t> v
    return bytes(out)


def pack_int64(values, Py_ssize_t n):
    cdef bytearray out = bytearray(8 * n)
    cdef uint8_t[::1] raw = out
    cdef int64_t* buf = <int64_t*> &raw[0] if n else NULL
    cdef Py_ssize_t i
    for i in range(n):
        v = values[i]
        buf[i] = 0 if v is None else <int64_t> v
    return bytes(out)


def pack_float32(values, Py_ssize_t n):
    cdef bytearray out = bytearray(4 * n)
    cdef uint8_t[::1] raw = out
    cdef float* buf = <float*> &raw[0] if n else NULL
    cdef Py_ssize_t i
    for i in range(n):
        v = values[i]
        buf[i] = 0.0 if v is None else <float> v
    return bytes(out)


def pack_float64(values, Py_ssize_t n):
    cdef bytearray out = bytearray(8 * n)
    cdef uint8_t[::1] raw = out
    cdef double* buf = <double*> &raw[0] if n else NULL
    cdef Py_ssize_t i
    for i in range(n):
        v = values[i]
        buf[i] = 0.0 if v is None else <double> v
    return bytes(out)


def unpack_int32(buf, Py_ssize_t n, validity):
    if n == 0:
        return []
    cdef const uint8_t[::1] mv = buf
    cdef const uint8_t[::1] val = validity
    cdef const int32_t* data = <const int32_t*> &mv[0]
    cdef list out = [None] * n
    cdef Py_ssize_t i
    for i in range(n):
        if (val[i >> 3] >> (i & 7)) & 1:
            out[i] = <object> data[i]
    return out


def unpack_int64(buf, Py_ssize_t n, validity):
    if n == 0:
        return []
    cdef const uint8_t[::1] mv = buf
    cdef const uint8_t[::1] val = validity
    cdef const int64_t* data = <const int64_t*> &mv[0]
    cdef list out = [None] * n
    cdef Py_ssize_t i
    for i in range(n):
        if (val[i >> 3] >> (i & 7)) & 1:
            out[i] = <object> data[i]
    return out


def unpack_float32(buf, Py_ssize_t n, validity):
    if n == 0:
        return []
    cdef const uint8_t[::1] mv = buf
    cdef const uint8_t[::1] val = validity
    cdef const float* data = <const float*> &mv[0]
    cdef list out = [None] * n
    cdef Py_ssize_t i
    for i in range(n):
        if (val[i >> 3] >> (i & 7)) & 1:
            out[i] = <object> (<double> data[i])
    return out


def unpack_float64(buf, Py_ssize_t n, validity):
    if n == 0:
        return []
    cdef const uint8_t[::1] mv = buf
    cdef const uint8_t[::1] val = validity
    cdef const double* data = <const double*> &mv[0]
    cdef list out = [None] * n
    cdef Py_ssize_t i
    for i in range(n):
        if (val[i >> 3] >> (i & 7)) & 1:
            out[i] = <object> data[i]
    return out


def unpack_bools(buf, Py_ssize_t n, validity):
    if n == 0:
        return []
    cdef const uint8_t[::1] mv = buf
    cdef const uint8_t[::1] val = validity
    cdef list out = [None] * n
    cdef Py_ssize_t i
    for i in range(n):
        if (val[i >> 3] >> (i & 7)) & 1:
            out[i] = True if (mv[i >> 3] >> (i & 7)) & 1 else False
    return out


def build_offsets(lengths):
    cdef Py_ssize_t n = len(lengths)
    cdef bytearray out = bytearray(4 * (n + 1))
    cdef uint8_t[::1] raw = out
    cdef uint32_t* buf = <uint32_t*> &raw[0]
    cdef uint64_t total = 0
    cdef Py_ssize_t i
    buf[0] = 0
    for i in range(n):
        total += <uint64_t> lengths[i]
        if total > 0xFFFFFFFF:
            raise ValueError("variable-width data exceeds u32 offset range")
        buf[i + 1] = <uint32_t> total
    return bytes(out)


def parse_offsets(buf, Py_ssize_t n):
    cdef const uint8_t[::1] mv = buf
    cdef const uint32_t* offs = <const uint32_t*> &mv[0]
    cdef list out = [0] * (n + 1)
    cdef uint32_t prev = 0
    cdef Py_ssize_t i
    if offs[0] != 0:
        raise ValueError("offsets[0] != 0")
    for i in range(n + 1):
        if offs[i] < prev:
            raise ValueError("offsets not non-decreasing")
        prev = offs[i]
        out[i] = <object> offs[i]
    return out
