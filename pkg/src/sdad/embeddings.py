"""Fixed-dimension embedding storage.

On disk a store is the 8-byte magic ``SDADEMB1``, the dimension as a 32-bit
little-endian unsigned integer, the row count as a 64-bit little-endian
unsigned integer, then count x dimension IEEE-754 32-bit little-endian floats
in row-major order.  A JSON sidecar at ``<path>.meta.json`` holds
``{"ids": [...]}`` aligned with row order, mapping manifest sample ids to
row indices.

Embeddings are produced elsewhere (backend calls or precomputed files); this
module only persists and serves them.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, FormatError, ZeroVectorError

MAGIC = b"SDADEMB1"
_HEADER_LEN = 20  # magic + uint32 dimension + uint64 count


def as_vector(values, dimension: Optional[int] = None) -> np.ndarray:
    """Validate and coerce to a finite 1-D float64 vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise FormatError("vector has non-finite entries")
    if dimension is not None and v.size != dimension:
        raise DimensionMismatch(f"expected dimension {dimension}, got {v.size}")
    return v


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm."""
    v = as_vector(v)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ZeroVectorError("cannot normalize the zero vector")
    return v / n


class EmbeddingStore:
    """Read-only dense matrix of float32 rows, opened from disk or arrays."""

    def __init__(self, dimension: int, rows: np.ndarray, ids: Optional[Sequence[str]] = None):
        if dimension <= 0:
            raise FormatError("dimension must be positive")
        rows = np.asarray(rows, dtype=np.float32).reshape(-1, dimension)
        if not np.isfinite(rows).all():
            raise FormatError("store payload has non-finite entries")
        if ids is not None and len(ids) != rows.shape[0]:
            raise FormatError(
                f"sidecar has {len(ids)} ids for {rows.shape[0]} rows"
            )
        self.dimension = int(dimension)
        self.rows = rows
        self.ids = list(ids) if ids is not None else None
        self._row_of = (
            {s: i for i, s in enumerate(self.ids)} if self.ids is not None else None
        )

    @property
    def count(self) -> int:
        return int(self.rows.shape[0])

    def get_row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.count:
            raise IndexError(f"row {i} out of range [0, {self.count})")
        return self.rows[i].astype(np.float64)

    def row_for_id(self, sample_id: str) -> int:
        if self._row_of is None:
            raise FormatError("store has no id sidecar")
        try:
            return self._row_of[sample_id]
        except KeyError:
            raise KeyError(sample_id) from None


def get_row(store: EmbeddingStore, i: int) -> np.ndarray:
    return store.get_row(i)


def open_store(path) -> EmbeddingStore:
    """Open an ``SDADEMB1`` file, validating header against payload length."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER_LEN or data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an embedding store")
    dimension = struct.unpack_from("<I", data, 8)[0]
    count = struct.unpack_from("<Q", data, 12)[0]
    if dimension == 0:
        raise FormatError(f"{path}: dimension 0")
    expected = _HEADER_LEN + count * dimension * 4
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload is {len(data)} bytes, header implies {expected}"
        )
    rows = np.frombuffer(data, dtype="<f4", offset=_HEADER_LEN).reshape(count, dimension)
    ids = None
    meta = path.with_name(path.name + ".meta.json")
    if meta.exists():
        obj = json.loads(meta.read_text("utf-8"))
        ids = obj.get("ids")
        if not isinstance(ids, list) or not all(isinstance(s, str) for s in ids):
            raise FormatError(f"{meta}: ids must be an array of strings")
    return EmbeddingStore(dimension, rows.copy(), ids)


class StoreWriter:
    """Single-writer builder: append rows, then close to produce the file.

    Rows are buffered and written on close; the store file never exists in a
    half-written state.  Usable as a context manager.
    """

    def __init__(self, path, dimension: int):
        if dimension <= 0:
            raise FormatError("dimension must be positive")
        self.path = Path(path)
        self.dimension = int(dimension)
        self._rows: list[np.ndarray] = []
        self._ids: list[str] = []
        self._closed = False

    def append(self, sample_id: str, vector) -> int:
        """Add one row; returns its row index."""
        if self._closed:
            raise FormatError("writer already closed")
        v = as_vector(vector, self.dimension)
        self._rows.append(v.astype("<f4"))
        self._ids.append(sample_id)
        return len(self._rows) - 1

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        payload = (
            np.concatenate(self._rows)
            if self._rows
            else np.zeros(0, dtype="<f4")
        )
        with open(self.path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", self.dimension))
            f.write(struct.pack("<Q", len(self._rows)))
            f.write(payload.tobytes())
        meta = self.path.with_name(self.path.name + ".meta.json")
        meta.write_text(
            json.dumps({"ids": self._ids}, separators=(",", ":")) + "\n", "utf-8"
        )

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        return False


def write_store(path, ids: Sequence[str], rows) -> None:
    """One-shot store write from an aligned id list and row matrix."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {rows.shape}")
    if len(ids) != rows.shape[0]:
        raise FormatError(f"{len(ids)} ids for {rows.shape[0]} rows")
    with StoreWriter(path, rows.shape[1]) as w:
        for sample_id, row in zip(ids, rows):
            w.append(sample_id, row)
