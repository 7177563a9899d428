"""Attention-map inspection: patch maps, thresholded difference maps,
leakage mass, and grayscale heatmap emission (PGM P5, optional PNG).

Patch maps are raw columns of a row-stochastic matrix and are therefore
nonnegative but not normalized; min-max normalization happens only at
image-writing time.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .attention import apply_contrast
from .errors import (
    EmptySelection,
    IndexOutOfRange,
    NoGrid,
    ShapeMismatch,
)
from .tensor import AttentionMap, FeatureMatrix, matmul, row_softmax, write_bytes

MODE_QUERY_KEY = "query-key"
MODE_QUERY_QUERY = "query-query"
DEFAULT_DIFF_THRESHOLD = 0.2


@dataclass
class PatchSelection:
    """Appearance positions to inspect: explicit indices, a grid rectangle
    (row, col, h, w) resolved against the appearance grid, or both."""

    indices: list[int] = field(default_factory=list)
    grid_rect: tuple[int, int, int, int] | None = None

    def resolve(self, n: int, grid: tuple[int, int] | None) -> list[int]:
        out = []
        for i in self.indices:
            if not 0 <= int(i) < n:
                raise IndexOutOfRange(f"patch index {i} outside [0, {n})")
            out.append(int(i))
        if self.grid_rect is not None:
            if grid is None:
                raise NoGrid("grid-rect selection needs a matrix with a grid")
            gh, gw = grid
            r0, c0, h, w = (int(x) for x in self.grid_rect)
            if h < 1 or w < 1 or r0 < 0 or c0 < 0 or r0 + h > gh or c0 + w > gw:
                raise IndexOutOfRange(
                    f"grid-rect {self.grid_rect} outside grid {grid}"
                )
            out.extend((r0 + i) * gw + (c0 + j) for i in range(h) for j in range(w))
        if not out:
            raise EmptySelection("patch selection is empty")
        return out


def full_attention_map(
    q_str: FeatureMatrix, right: FeatureMatrix, contrast: float = 1.0
) -> AttentionMap:
    """Row-stochastic map of structure queries over appearance positions."""
    if q_str.cols != right.cols:
        raise ShapeMismatch(f"channel dims disagree: {q_str.cols} vs {right.cols}")
    amap = row_softmax(
        matmul(q_str, right, transpose_b=True), 1.0 / math.sqrt(q_str.cols)
    )
    return apply_contrast(amap, contrast)


def patch_attention_map(
    q_str: FeatureMatrix,
    right: FeatureMatrix,
    mode: str,
    patch: PatchSelection,
    contrast: float = 1.0,
) -> list[np.ndarray]:
    """Per-patch attention maps over structure positions.

    Computes row_softmax(q_str @ right^T / sqrt(d)) where ``right`` is the
    appearance keys (query-key mode) or the appearance queries (query-query
    mode), then returns column j for each selected appearance index j,
    reshaped to the structure grid when one is present.
    """
    if mode not in (MODE_QUERY_KEY, MODE_QUERY_QUERY):
        raise ValueError(f"mode must be {MODE_QUERY_KEY!r} or {MODE_QUERY_QUERY!r}")
    indices = patch.resolve(right.rows, right.grid)
    amap = full_attention_map(q_str, right, contrast)
    maps = []
    for j in indices:
        col = np.array(amap.data[:, j])
        maps.append(col.reshape(q_str.grid) if q_str.grid is not None else col)
    return maps


@dataclass
class DiffMap:
    """|a - b| with sub-threshold entries zeroed; entries are 0 or >= threshold."""

    data: np.ndarray
    threshold: float


def attention_diff_map(
    map_a: np.ndarray, map_b: np.ndarray, threshold: float = DEFAULT_DIFF_THRESHOLD
) -> DiffMap:
    """Entrywise absolute difference of two per-position maps, masked below
    ``threshold`` (values under it become exactly 0)."""
    a = np.asarray(map_a, dtype=np.float32)
    b = np.asarray(map_b, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeMismatch(f"map shapes disagree: {a.shape} vs {b.shape}")
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    d = np.abs(a - b)
    d[d < threshold] = 0.0
    return DiffMap(d, float(threshold))


def _as_index_array(indices, n: int, what: str) -> np.ndarray:
    idx = np.unique(np.asarray(list(indices), dtype=np.int64))
    if idx.size == 0:
        raise EmptySelection(f"{what} is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRange(f"{what} contains indices outside [0, {n})")
    return idx


def leakage_mass(map_: AttentionMap, query_rows, in_region) -> float:
    """Mean attention mass the selected query rows place outside in_region.

    0 means every selected row keeps all its mass inside the region; 1 means
    all of it leaks out.
    """
    rows = _as_index_array(query_rows, map_.rows, "query row selection")
    region = _as_index_array(in_region, map_.cols, "in-region selection")
    outside = np.ones(map_.cols, dtype=bool)
    outside[region] = False
    sub = map_.data[rows].astype(np.float64)
    return float(sub[:, outside].sum(axis=1).mean())


def _to_grid(values: np.ndarray, grid: tuple[int, int] | None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 1:
        if grid is None:
            raise NoGrid("heatmap needs a grid for 1-D values")
        h, w = grid
        if h * w != arr.size:
            raise ShapeMismatch(f"grid {grid} does not cover {arr.size} values")
        return arr.reshape(h, w)
    raise ShapeMismatch(f"heatmap values must be 1-D or 2-D, got ndim={arr.ndim}")


def heatmap_pixels(values: np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Min-max normalize values to uint8 pixels; constant input maps to zeros."""
    img = _to_grid(values, grid)
    lo = img.min()
    span = img.max() - lo
    if span == 0.0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / span * 255.0).astype(np.uint8)


def pgm_bytes(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def png_bytes(pixels: np.ndarray) -> bytes:
    """Minimal 8-bit grayscale PNG encoder (deterministic output)."""
    h, w = pixels.shape

    def chunk(tag: bytes, data: bytes) -> bytes:
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + pixels[y].tobytes() for y in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def write_heatmap(
    values: np.ndarray,
    path: str | os.PathLike,
    format: str = "pgm",
    grid: tuple[int, int] | None = None,
) -> None:
    """Render values as a grayscale image (PGM P5 is the normative format)."""
    pixels = heatmap_pixels(values, grid)
    if format == "pgm":
        blob = pgm_bytes(pixels)
    elif format == "png":
        blob = png_bytes(pixels)
    else:
        raise ValueError(f"format must be 'pgm' or 'png', got {format!r}")
    write_bytes(blob, path)
