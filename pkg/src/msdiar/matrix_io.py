"""Little-endian binary matrix files: 4-byte magic, version, rows, dim, then f32 data."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

EMBEDDING_MAGIC = b"MSEB"
AFFINITY_MAGIC = b"AFFM"


def write_matrix(path: str | Path, matrix: np.ndarray, magic: bytes) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, rows, dim))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_matrix(path: str | Path, magic: bytes) -> np.ndarray:
    """Read a matrix file, returning float64 values of shape (rows, dim)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    got_magic, version, rows, dim = _HEADER.unpack_from(data)
    if got_magic != magic:
        raise ValueError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + rows * dim * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {rows}x{dim}, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=rows * dim)
    return values.reshape(rows, dim).astype(np.float64)
