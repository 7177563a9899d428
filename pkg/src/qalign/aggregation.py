"""Query-query alignment and the sparse aggregation matrix.

The alignment matrix S holds raw dot products between the two images'
query sets (no temperature: top-k selection is invariant to positive
per-row scaling, so adding one could not change the aggregation). The
aggregation pipeline turns S into a sparse scatter matrix in three steps:
top-k selection, diagonal fallback for structure rows nothing mapped to,
and row-wise softmax reweighting over the nonzero support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyRow,
    KOutOfRange,
    NonSquare,
    ShapeMismatch,
    WrongStage,
)
from .tensor import FeatureMatrix, matmul, row_topk

STAGE_RAW = "raw"
STAGE_REWEIGHTED = "reweighted"


@dataclass(eq=False)
class AlignmentMatrix:
    """Raw similarity scores; row r = appearance position, col c = structure."""

    data: np.ndarray  # (n_app, n_str) float32

    @property
    def n_app(self) -> int:
        return self.data.shape[0]

    @property
    def n_str(self) -> int:
        return self.data.shape[1]


@dataclass(eq=False)
class AggregationMatrix:
    """Sparse n x n scatter matrix; row = structure slot, col = appearance.

    ``entries`` is a sorted list of (row, col, weight). ``stage`` tracks
    whether reweighting has been applied; raw weights are 1/k (or 1.0 on
    fallback diagonals), reweighted rows are stochastic over their support.
    """

    n: int
    entries: list[tuple[int, int, float]]
    stage: str

    def to_dense(self) -> FeatureMatrix:
        dense = np.zeros((self.n, self.n), dtype=np.float32)
        for r, c, w in self.entries:
            dense[r, c] = w
        return FeatureMatrix(dense)

    def row_sums(self) -> np.ndarray:
        sums = np.zeros(self.n, dtype=np.float64)
        for r, _, w in self.entries:
            sums[r] += w
        return sums

    @staticmethod
    def from_dense(m: FeatureMatrix, stage: str = STAGE_REWEIGHTED) -> "AggregationMatrix":
        """Rebuild the sparse form from a dense n x n matrix (file interchange)."""
        if m.rows != m.cols:
            raise NonSquare(f"aggregation matrix must be square, got {m.data.shape}")
        rows, cols = np.nonzero(m.data)
        entries = [(int(r), int(c), float(m.data[r, c])) for r, c in zip(rows, cols)]
        agg = AggregationMatrix(m.rows, sorted(entries), stage)
        if stage == STAGE_REWEIGHTED:
            sums = agg.row_sums()
            if np.any(np.abs(sums - 1.0) > 1e-5):
                raise WrongStage(
                    "dense matrix is not row-stochastic; not a reweighted aggregation"
                )
        return agg


def compute_alignment(q_app: FeatureMatrix, q_str: FeatureMatrix) -> AlignmentMatrix:
    """S[r, c] = dot(appearance query r, structure query c); no scaling."""
    if q_app.cols != q_str.cols:
        raise ShapeMismatch(
            f"query channel dims disagree: {q_app.cols} vs {q_str.cols}"
        )
    return AlignmentMatrix(matmul(q_app, q_str, transpose_b=True).data)


def build_aggregation(s: AlignmentMatrix, k: int) -> AggregationMatrix:
    """Raw aggregation: appearance row r scatters 1/k onto its top-k structure slots.

    The selection runs over rows of S (appearance-indexed); the transposed
    write P[c, r] = 1/k puts each contribution on the structure-indexed row.
    Pre-fallback, every column has exactly k nonzeros and rows may be empty.
    """
    if s.n_app != s.n_str:
        raise NonSquare(
            f"alignment must be square for aggregation, got {s.n_app}x{s.n_str}"
        )
    n = s.n_app
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    top = row_topk(FeatureMatrix(s.data), k)
    w = 1.0 / k
    entries = [(int(c), r, w) for r in range(n) for c in top[r]]
    return AggregationMatrix(n, sorted(entries), STAGE_RAW)


def apply_fallback(p: AggregationMatrix) -> AggregationMatrix:
    """Set P[r, r] = 1 on every zero-sum row so no structure slot is left empty."""
    if p.stage != STAGE_RAW:
        raise WrongStage(f"fallback applies to the raw stage, got {p.stage!r}")
    occupied = {r for r, _, _ in p.entries}
    entries = list(p.entries)
    for r in range(p.n):
        if r not in occupied:
            entries.append((r, r, 1.0))
    return AggregationMatrix(p.n, sorted(entries), STAGE_RAW)


def reweight_softmax(p: AggregationMatrix) -> AggregationMatrix:
    """Softmax each row over its nonzero entries; zeros stay exactly zero.

    All nonzeros within a row are equal by construction (1/k, or a lone
    fallback 1.0), so the result is uniform over the support; the formula
    is still evaluated so the behaviour generalizes should that change.
    """
    if p.stage != STAGE_RAW:
        raise WrongStage(f"reweighting applies to the raw stage, got {p.stage!r}")
    by_row: dict[int, list[tuple[int, float]]] = {}
    for r, c, w in p.entries:
        by_row.setdefault(r, []).append((c, w))
    entries: list[tuple[int, int, float]] = []
    for r in range(p.n):
        support = by_row.get(r)
        if not support:
            raise EmptyRow(
                f"row {r} has no support; apply_fallback must run before reweighting"
            )
        vals = np.array([w for _, w in support], dtype=np.float64)
        e = np.exp(vals - vals.max())
        e /= e.sum()
        entries.extend((r, c, float(wn)) for (c, _), wn in zip(support, e))
    return AggregationMatrix(p.n, sorted(entries), STAGE_REWEIGHTED)


def qq_align_pipeline(q_app: FeatureMatrix, q_str: FeatureMatrix, k: int) -> AggregationMatrix:
    """Alignment, top-k aggregation, fallback, and reweighting in one call."""
    s = compute_alignment(q_app, q_str)
    return reweight_softmax(apply_fallback(build_aggregation(s, k)))
