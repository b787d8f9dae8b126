"""Binary vertex maps and sparse matrices (little-endian)."""

import struct

import numpy as np
import scipy.sparse as sp

from .timeseries import DataError

_MAP = struct.Struct("<4sII")
_COO = struct.Struct("<4sIQ")
_CODES = {1: "<f8", 2: "u1"}


def write_vertex_map(path, values):
    """``VMAP`` | uint32 V | uint32 dtype (1=f64, 2=uint8) | V values."""
    a = np.asarray(values)
    code = 2 if a.dtype == bool else 1
    data = a.astype(_CODES[code])
    with open(path, "wb") as fh:
        fh.write(_MAP.pack(b"VMAP", len(data), code))
        fh.write(data.tobytes())


def read_vertex_map(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _MAP.size:
        raise DataError(f"{path}: truncated map header")
    magic, n, code = _MAP.unpack_from(raw)
    if magic != b"VMAP" or code not in _CODES:
        raise DataError(f"{path}: not a vertex map")
    dt = np.dtype(_CODES[code])
    body = raw[_MAP.size:]
    if len(body) != n * dt.itemsize:
        raise DataError(f"{path}: expected {n} values")
    a = np.frombuffer(body, dtype=dt)
    return a.astype(bool) if code == 2 else a.astype(float)


def write_coo(path, A):
    """``SCOO`` | uint32 n | uint64 nnz | int64 rows | int64 cols | f64 values."""
    A = sp.coo_matrix(A)
    with open(path, "wb") as fh:
        fh.write(_COO.pack(b"SCOO", A.shape[0], A.nnz))
        fh.write(A.row.astype("<i8").tobytes())
        fh.write(A.col.astype("<i8").tobytes())
        fh.write(A.data.astype("<f8").tobytes())


def read_coo(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, n, nnz = _COO.unpack_from(raw)
    if magic != b"SCOO" or len(raw) != _COO.size + 24 * nnz:
        raise DataError(f"{path}: not a sparse coordinate file")
    off = _COO.size
    r = np.frombuffer(raw, "<i8", nnz, off)
    c = np.frombuffer(raw, "<i8", nnz, off + 8 * nnz)
    v = np.frombuffer(raw, "<f8", nnz, off + 16 * nnz)
    return sp.csc_matrix((v, (r, c)), shape=(n, n))
