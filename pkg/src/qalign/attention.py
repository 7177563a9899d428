"""Attention kernels: cross-image attention, key/value rearrangement, contrast.

All kernels are single-head: callers doing multi-head attention invoke
them once per head. The softmax temperature is 1/sqrt(d) of the query
channel dimension actually passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aggregation import AggregationMatrix, STAGE_REWEIGHTED
from .errors import DegenerateRow, ShapeMismatch, WrongStage
from .tensor import AttentionMap, FeatureMatrix, matmul, row_softmax


@dataclass(eq=False)
class RearrangedKV:
    """Appearance keys/values scattered onto structure positions."""

    k_star: FeatureMatrix
    v_star: FeatureMatrix


@dataclass(eq=False)
class AttentionOutput:
    output: FeatureMatrix  # (n_q, d_v)
    map: AttentionMap      # (n_q, n_k), row-stochastic


def rearrange_kv(
    p_prime: AggregationMatrix, k_app: FeatureMatrix, v_app: FeatureMatrix
) -> RearrangedKV:
    """K* = P' K_app and V* = P' V_app.

    Each output row is a convex combination of source rows, so row c of K*
    carries the appearance keys that query-query alignment matched to
    structure slot c.
    """
    if p_prime.stage != STAGE_REWEIGHTED:
        raise WrongStage(
            f"rearrangement needs a reweighted aggregation, got {p_prime.stage!r}"
        )
    if not (p_prime.n == k_app.rows == v_app.rows):
        raise ShapeMismatch(
            f"aggregation n={p_prime.n} does not match keys ({k_app.rows}) "
            f"and values ({v_app.rows})"
        )
    dense = p_prime.to_dense()
    return RearrangedKV(matmul(dense, k_app), matmul(dense, v_app))


def apply_contrast(map_: AttentionMap, beta: float) -> AttentionMap:
    """Mean-anchored contrast stretch of a row-stochastic map.

    Per row with mean mu: a' = max(0, mu + beta*(a - mu)), then the row is
    renormalized to sum 1. beta = 1 returns the input unchanged (bitwise).
    Artifact-defined transform; applied after the softmax.
    """
    if not (beta > 0.0 and math.isfinite(beta)):
        raise ValueError(f"contrast must be a positive real, got {beta}")
    if beta == 1.0:
        return map_
    a = map_.data.astype(np.float64)
    mu = a.mean(axis=1, keepdims=True)
    stretched = np.maximum(0.0, mu + beta * (a - mu))
    sums = stretched.sum(axis=1, keepdims=True)
    if np.any(sums == 0.0):
        # Unreachable for stochastic rows: the row max is >= mu > 0 and
        # survives the clamp; kept as a guard against non-stochastic input.
        raise DegenerateRow("contrast clamped a row to all zeros")
    return FeatureMatrix((stretched / sums).astype(np.float32))


def cross_image_attention(
    q_out: FeatureMatrix,
    k: FeatureMatrix,
    v: FeatureMatrix,
    contrast: float = 1.0,
) -> AttentionOutput:
    """softmax(q_out k^T / sqrt(d)) v with the contrast transform on the map."""
    if q_out.cols != k.cols:
        raise ShapeMismatch(f"query dim {q_out.cols} != key dim {k.cols}")
    if k.rows != v.rows:
        raise ShapeMismatch(f"key rows {k.rows} != value rows {v.rows}")
    scale = 1.0 / math.sqrt(q_out.cols)
    logits = matmul(q_out, k, transpose_b=True)
    amap = apply_contrast(row_softmax(logits, scale), contrast)
    return AttentionOutput(output=matmul(amap, v), map=amap)


def rearranged_attention(
    q_out: FeatureMatrix, rkv: RearrangedKV, contrast: float = 1.0
) -> AttentionOutput:
    """Cross-image attention against the rearranged keys and values.

    With a perfect (identity) aggregation this reduces bitwise to
    cross_image_attention on the original keys and values.
    """
    return cross_image_attention(q_out, rkv.k_star, rkv.v_star, contrast)
