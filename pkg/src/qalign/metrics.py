"""Legacy quantitative metrics: Gram loss over feature tensors and mask IoU.

Feature extraction and segmentation are out of scope; both metrics operate
on caller-supplied tensors. Gram matrices are normalized by n*d and the
loss is the per-layer mean of mean squared entry differences — fixed here
so the numbers are self-consistent, not calibrated to any external scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadDimensions,
    EmptyList,
    EmptyUnion,
    GridMismatch,
    IoFailure,
    NotBinaryMask,
    ShapeMismatch,
)
from .tensor import FeatureMatrix, load_tensor


@dataclass(eq=False)
class BinaryMask:
    grid: tuple[int, int]
    data: np.ndarray  # (H*W,) uint8, strictly 0/1

    def __post_init__(self):
        arr = np.asarray(self.data).reshape(-1)
        if not np.all((arr == 0) | (arr == 1)):
            raise NotBinaryMask("mask values must be exactly 0 or 1")
        h, w = (int(self.grid[0]), int(self.grid[1]))
        if h * w != arr.size:
            raise GridMismatch(f"grid {self.grid} does not cover {arr.size} values")
        self.grid = (h, w)
        self.data = arr.astype(np.uint8)


def gram_matrix(f: FeatureMatrix) -> FeatureMatrix:
    """G = (F^T F) / (n*d) for an n x d feature matrix."""
    g = f.data.astype(np.float64)
    return FeatureMatrix((g.T @ g / (f.rows * f.cols)).astype(np.float32))


def gram_loss(
    features_a: list[FeatureMatrix], features_b: list[FeatureMatrix]
) -> float:
    """Mean over layers of the mean squared Gram-matrix entry difference."""
    if not features_a or not features_b:
        raise EmptyList("feature lists must be non-empty")
    if len(features_a) != len(features_b):
        raise ShapeMismatch(
            f"layer counts disagree: {len(features_a)} vs {len(features_b)}"
        )
    per_layer = []
    for fa, fb in zip(features_a, features_b):
        if fa.cols != fb.cols:
            raise ShapeMismatch(f"channel dims disagree: {fa.cols} vs {fb.cols}")
        ga = gram_matrix(fa).data.astype(np.float64)
        gb = gram_matrix(fb).data.astype(np.float64)
        per_layer.append(np.mean((ga - gb) ** 2))
    return float(np.mean(per_layer))


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two binary masks on the same grid."""
    if a.grid != b.grid:
        raise GridMismatch(f"mask grids disagree: {a.grid} vs {b.grid}")
    inter = int(np.sum((a.data == 1) & (b.data == 1)))
    union = int(np.sum((a.data == 1) | (b.data == 1)))
    if union == 0:
        raise EmptyUnion("both masks are empty; IoU is undefined")
    return inter / union


def load_mask(path: str | os.PathLike) -> BinaryMask:
    """Read a mask from a QALN (H, W) tensor of {0,1} or a PGM P5 image
    (pixels >= 128 count as 1)."""
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P5":
        return _load_pgm_mask(path)
    m = load_tensor(path)
    if m.grid is not None:
        raise BadDimensions("mask tensors must be 2-D (H, W)")
    if not np.all((m.data == 0.0) | (m.data == 1.0)):
        raise NotBinaryMask(f"{path}: mask values must be exactly 0 or 1")
    return BinaryMask((m.rows, m.cols), m.data.astype(np.uint8).reshape(-1))


def _load_pgm_mask(path: str | os.PathLike, threshold: int = 128) -> BinaryMask:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    # Header: "P5" then whitespace-separated width, height, maxval with
    # optional '#' comment lines, then a single whitespace before the raster.
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise BadDimensions(f"{path}: malformed PGM header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace separating header from raster
    w, h, maxval = fields
    if maxval != 255:
        raise BadDimensions(f"{path}: PGM maxval must be 255, got {maxval}")
    raster = blob[pos : pos + w * h]
    if len(raster) != w * h:
        raise BadDimensions(f"{path}: PGM raster truncated")
    pixels = np.frombuffer(raster, dtype=np.uint8)
    return BinaryMask((h, w), (pixels >= threshold).astype(np.uint8))
