"""Binary containers.

IDFV1 (dense matrix)::

    b"IDFV" 0x01 | u32 rows | u32 dim | rows*dim f32, row-major     (all LE)

IDFG (square sparse graph)::

    b"IDFG" 0x01 | u32 n | u32 nnz | (n+1) u32 row_ptr | nnz u32 col_idx | nnz f32 vals

IDFC (checkpoint)::

    b"IDFC" 0x01 | u32 manifest_len | manifest JSON (utf-8) | f32 arrays in manifest order
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .sparse import SparseCSR

FEATURE_MAGIC = b"IDFV"
GRAPH_MAGIC = b"IDFG"
CHECKPOINT_MAGIC = b"IDFC"
VERSION = 1


class FormatError(ValueError):
    pass


def _check_header(buf: bytes, magic: bytes, path) -> int:
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    if len(buf) < 5 or buf[4] != VERSION:
        raise FormatError(f"{path}: unsupported version byte")
    return 5


def write_matrix(path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("IDFV1 holds 2-D matrices only")
    rows, dim = data.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<II", rows, dim))
        fh.write(data.tobytes())


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    off = _check_header(buf, FEATURE_MAGIC, path)
    if len(buf) < off + 8:
        raise FormatError(f"{path}: truncated header")
    rows, dim = struct.unpack_from("<II", buf, off)
    off += 8
    expected = rows * dim * 4
    if len(buf) - off != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(rows, dim).astype(np.float32)


def is_idfv(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == FEATURE_MAGIC


def write_graph(path, g: SparseCSR) -> None:
    if g.n_rows != g.n_cols:
        raise ValueError("IDFG stores square graphs only")
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<II", g.n_rows, g.nnz))
        fh.write(np.asarray(g.row_ptr, dtype="<u4").tobytes())
        fh.write(np.asarray(g.col_idx, dtype="<u4").tobytes())
        fh.write(np.asarray(g.vals, dtype="<f4").tobytes())


def read_graph(path) -> SparseCSR:
    buf = Path(path).read_bytes()
    off = _check_header(buf, GRAPH_MAGIC, path)
    n, nnz = struct.unpack_from("<II", buf, off)
    off += 8
    if len(buf) - off != 4 * (n + 1) + 8 * nnz:
        raise FormatError(f"{path}: payload size does not match n={n}, nnz={nnz}")
    row_ptr = np.frombuffer(buf, dtype="<u4", count=n + 1, offset=off).astype(np.int64)
    off += 4 * (n + 1)
    col_idx = np.frombuffer(buf, dtype="<u4", count=nnz, offset=off).astype(np.int64)
    off += 4 * nnz
    vals = np.frombuffer(buf, dtype="<f4", count=nnz, offset=off).astype(np.float64)
    g = SparseCSR(n, n, row_ptr, col_idx, vals)
    if not g.is_canonical():
        raise FormatError(f"{path}: graph is not in canonical CSR form")
    return g


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Arrays are stored as f32 in insertion order; ``meta`` must be JSON-able."""
    names = list(arrays)
    manifest = dict(meta)
    manifest["arrays"] = [[n, list(np.shape(arrays[n]))] for n in names]
    manifest.setdefault("config_hash", config_hash(meta.get("config", {})))
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    off = _check_header(buf, CHECKPOINT_MAGIC, path)
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    manifest = json.loads(buf[off:off + mlen].decode("utf-8"))
    off += mlen
    arrays = {}
    for name, shape in manifest.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
        arrays[name] = arr.reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return arrays, manifest
