"""Dense matrices, the QALN tensor file format, and shared numeric kernels.

File layout (all little-endian):

    magic    4 bytes   b"QALN"
    version  uint16    1
    dtype    uint8     0 = float32
    flags    uint8     0
    ndim     uint32    2 or 3
    shape    ndim x uint64
    payload  product(shape) float32 values, row-major

A 2-D file is an (n, d) matrix. A 3-D file is (height, width, d) and is
flattened to n = height*width rows with the (height, width) grid retained
for spatial reshaping. Values are stored and computed in 32-bit floats;
sums inside matmul and softmax accumulate in 64-bit.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadDimensions,
    BadMagic,
    IoFailure,
    KOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedFlags,
    UnsupportedRank,
    UnsupportedVersion,
)

MAGIC = b"QALN"
VERSION = 1
DTYPE_FLOAT32 = 0

_HEADER = struct.Struct("<4sHBBI")


@dataclass(eq=False)
class FeatureMatrix:
    """An n x d matrix of row vectors (queries, keys, values, or features).

    ``data`` is normalized to a read-only, C-contiguous float32 array, so
    instances are safe to share across threads. ``grid`` optionally records
    a (height, width) spatial layout with height*width == rows.
    """

    data: np.ndarray
    grid: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise BadDimensions(f"expected a 2-D matrix, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise BadDimensions(f"matrix dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("matrix contains NaN or Inf")
        if self.grid is not None:
            h, w = (int(self.grid[0]), int(self.grid[1]))
            if h < 1 or w < 1 or h * w != arr.shape[0]:
                raise BadDimensions(
                    f"grid {self.grid} does not cover {arr.shape[0]} rows"
                )
            self.grid = (h, w)
        arr.setflags(write=False)
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


# An AttentionMap is a FeatureMatrix whose rows sum to 1; the alias keeps
# signatures readable without a second wrapper type.
AttentionMap = FeatureMatrix


def load_tensor(path: str | os.PathLike) -> FeatureMatrix:
    """Read a QALN tensor file into a FeatureMatrix."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedPayload(f"{path}: file ends inside the header")
    magic, version, dtype, flags, ndim = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version}, expected {VERSION}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedDtype(f"{path}: dtype code {dtype}, expected 0 (float32)")
    if flags != 0:
        raise UnsupportedFlags(f"{path}: flags {flags:#x}, expected 0")
    if ndim not in (2, 3):
        raise UnsupportedRank(f"{path}: ndim {ndim}, expected 2 or 3")

    off = _HEADER.size
    if len(blob) < off + 8 * ndim:
        raise TruncatedPayload(f"{path}: file ends inside the shape block")
    shape = tuple(
        int(x) for x in np.frombuffer(blob, dtype="<u8", count=ndim, offset=off)
    )
    off += 8 * ndim
    count = 1
    for s in shape:
        count *= s
    expected = off + 4 * count
    if len(blob) < expected:
        raise TruncatedPayload(
            f"{path}: payload has {len(blob) - off} bytes, expected {4 * count}"
        )
    if len(blob) > expected:
        raise TruncatedPayload(
            f"{path}: {len(blob) - expected} trailing bytes after the payload"
        )
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{path}: payload contains NaN or Inf")

    if ndim == 2:
        return FeatureMatrix(values.reshape(shape).copy())
    h, w, d = shape
    return FeatureMatrix(values.reshape(h * w, d).copy(), grid=(h, w))


def tensor_bytes(m: FeatureMatrix) -> bytes:
    """Serialize a FeatureMatrix to QALN bytes (grid saved as a 3-D shape)."""
    if m.grid is not None:
        shape = (m.grid[0], m.grid[1], m.cols)
    else:
        shape = (m.rows, m.cols)
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, 0, len(shape))
    shape_block = np.asarray(shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    return header + shape_block + payload


def save_tensor(m: FeatureMatrix, path: str | os.PathLike) -> None:
    """Write a QALN tensor file; round-trips bit-exactly through load_tensor."""
    write_bytes(tensor_bytes(m), path)


def write_bytes(blob: bytes, path: str | os.PathLike) -> None:
    """Atomically write bytes: no partial file is left behind on failure."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_csv(path: str | os.PathLike) -> FeatureMatrix:
    """Read a header-free comma-separated 2-D matrix (CLI convenience)."""
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise BadDimensions(f"{path}: malformed CSV: {exc}") from exc
    return FeatureMatrix(arr.astype(np.float32))


def matmul(a: FeatureMatrix, b: FeatureMatrix, transpose_b: bool = False) -> FeatureMatrix:
    """Matrix product a @ b (or a @ b.T), accumulated in float64."""
    rhs = b.data.T if transpose_b else b.data
    if a.cols != rhs.shape[0]:
        raise ShapeMismatch(
            f"inner dimensions disagree: {a.data.shape} x {rhs.shape}"
        )
    out = a.data.astype(np.float64) @ rhs.astype(np.float64)
    return FeatureMatrix(out.astype(np.float32))


def row_softmax(m: FeatureMatrix, scale: float) -> AttentionMap:
    """Row-wise softmax of scale*m with per-row max subtraction.

    Entry (r, c) is exp(scale*m[r,c] - max_r) / sum, making the kernel total
    on finite input; every output row sums to 1 within 1e-6.
    """
    if not (scale > 0.0 and np.isfinite(scale)):
        raise ValueError(f"scale must be a positive real, got {scale}")
    z = m.data.astype(np.float64) * float(scale)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    return FeatureMatrix(e.astype(np.float32))


def row_topk(m: FeatureMatrix, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lowest column.

    Returns an (n, k) int array; within a row the indices are ordered by
    descending value, equal values by ascending column.
    """
    if not 1 <= k <= m.cols:
        raise KOutOfRange(f"k={k} outside [1, {m.cols}]")
    order = np.argsort(-m.data, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)
