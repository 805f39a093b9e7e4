"""Embedding matrix storage: validation, normalization, binary IO.

File format CMCR-EMB v1
    bytes 0-7    magic, ASCII "CMCREMB1"
    bytes 8-11   row count, unsigned 32-bit little-endian
    bytes 12-15  dim, unsigned 32-bit little-endian
    byte 16      normalized flag (0 or 1)
    bytes 17-19  zero padding
    payload      rows*dim little-endian float32, row-major

IDs live in an optional sidecar "<path>.ids": UTF-8, one ID per line,
LF-terminated, exactly one line per row.  Keeping them out of the binary
file leaves the payload fixed-stride and memory-mappable.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from cmcr.errors import (
    DimMismatchError,
    IoFailureError,
    MagicMismatchError,
    NonFiniteValueError,
    ShapeMismatchError,
    TruncatedFileError,
    ZeroRowError,
)

MAGIC = b"CMCREMB1"
_HEADER = struct.Struct("<8sIIB3x")  # 20 bytes
UNIT_TOL = 1e-4


def _first_nonfinite(data: np.ndarray):
    flat = np.isfinite(data).ravel()
    idx = int(np.argmin(flat))
    return divmod(idx, data.shape[1])


class EmbeddingMatrix:
    """Immutable rows x dim float32 matrix with optional string row IDs.

    The `normalized` flag certifies that every row is unit length within
    1e-4; it is what downstream modules check before trusting cosine
    arithmetic.
    """

    def __init__(self, data, ids=None, normalized: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ShapeMismatchError(f"expected 2-D data, got {arr.ndim}-D")
        if arr.shape[0] < 1:
            raise ShapeMismatchError("matrix needs at least 1 row")
        if arr.shape[1] < 2:
            raise ShapeMismatchError("matrix needs dim >= 2, got "
                                     f"{arr.shape[1]}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            r, c = _first_nonfinite(arr)
            raise NonFiniteValueError(
                f"non-finite value at row {r}, col {c}")
        if ids is not None:
            ids = [str(i) for i in ids]
            if len(ids) != arr.shape[0]:
                raise ShapeMismatchError(
                    f"{len(ids)} ids for {arr.shape[0]} rows")
        if normalized:
            norms = np.linalg.norm(arr.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > UNIT_TOL
            if np.any(bad):
                r = int(np.argmax(bad))
                raise ShapeMismatchError(
                    f"normalized flag set but row {r} has norm "
                    f"{float(norms[r]):.6f}")
        self.data = arr
        self.ids = ids
        self.normalized = bool(normalized)
        self.data.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row_ids(self):
        """IDs if present, else decimal row indices."""
        if self.ids is not None:
            return list(self.ids)
        return [str(i) for i in range(self.rows)]

    def __repr__(self):
        return (f"EmbeddingMatrix(rows={self.rows}, dim={self.dim}, "
                f"normalized={self.normalized})")


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide every row by its L2 norm; flags the result normalized.

    Already-normalized matrices are returned as-is, which keeps the
    operation bitwise idempotent.
    """
    if m.normalized:
        return m
    data = m.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        raise ZeroRowError(f"row {int(np.argmax(zero))} has zero norm")
    out = (data / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(out, ids=m.ids, normalized=True)


def save(m: EmbeddingMatrix, path) -> None:
    """Write a CMCR-EMB v1 file; writes `<path>.ids` when IDs are present."""
    header = _HEADER.pack(MAGIC, m.rows, m.dim, 1 if m.normalized else 0)
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        if m.ids is not None:
            with open(str(path) + ".ids", "w", encoding="utf-8") as fh:
                fh.write("".join(i + "\n" for i in m.ids))
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def load(path) -> EmbeddingMatrix:
    """Read a CMCR-EMB v1 file (and its `.ids` sidecar when present)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        if blob[: len(MAGIC)] != MAGIC[: len(blob)]:
            raise MagicMismatchError(f"{path}: not a CMCR-EMB file")
        raise TruncatedFileError(f"{path}: header truncated")
    magic, rows, dim, flag = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}")
    if flag not in (0, 1):
        raise IoFailureError(f"{path}: invalid normalized flag {flag}")
    expected = _HEADER.size + rows * dim * 4
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise IoFailureError(
            f"{path}: {len(blob) - expected} trailing bytes")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size,
                         count=rows * dim).reshape(rows, dim)
    ids = None
    sidecar = str(path) + ".ids"
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as fh:
            ids = fh.read().split("\n")
        if ids and ids[-1] == "":
            ids.pop()
        if len(ids) != rows:
            raise ShapeMismatchError(
                f"{sidecar}: {len(ids)} ids for {rows} rows")
    return EmbeddingMatrix(data.copy(), ids=ids, normalized=bool(flag))


def take(m: EmbeddingMatrix, indices) -> EmbeddingMatrix:
    """Row subset preserving IDs and the normalized flag."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= m.rows):
        raise ShapeMismatchError("subset index out of range")
    ids = [m.ids[i] for i in idx] if m.ids is not None else None
    return EmbeddingMatrix(m.data[idx], ids=ids, normalized=m.normalized)


def require_normalized(m: EmbeddingMatrix, what: str = "matrix") -> None:
    if not m.normalized:
        raise ShapeMismatchError(
            f"{what} must be normalized (run normalize first)")


def check_same_dim(a, b, what: str = "operands") -> None:
    da = a.dim if isinstance(a, EmbeddingMatrix) else a.shape[-1]
    db = b.dim if isinstance(b, EmbeddingMatrix) else b.shape[-1]
    if da != db:
        raise DimMismatchError(f"{what}: dim {da} vs {db}")


class PairedCorpus:
    """Two matrices whose i-th rows encode the same underlying item."""

    def __init__(self, left: EmbeddingMatrix, right: EmbeddingMatrix):
        if left.rows != right.rows:
            raise ShapeMismatchError(
                f"paired corpus rows differ: {left.rows} vs {right.rows}")
        self.left = left
        self.right = right

    @property
    def rows(self) -> int:
        return self.left.rows


def read_text_matrix(path) -> np.ndarray:
    """Parse a plain-text matrix: one row per line, space-separated decimals."""
    rows = []
    width = None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    row = [float(p) for p in parts]
                except ValueError as exc:
                    raise IoFailureError(
                        f"{path}:{lineno}: not a decimal row") from exc
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise ShapeMismatchError(
                        f"{path}:{lineno}: {len(row)} values, expected {width}")
                rows.append(row)
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ShapeMismatchError(f"{path}: no rows")
    return np.asarray(rows, dtype=np.float64)
