"""Shared test helpers: independent brute-force oracles and input builders.

The oracles deliberately use scalar Python loops and math.exp so they share
no code path with the vectorized implementations they check.
"""

import math

import numpy as np

from qalign.tensor import FeatureMatrix


def brute_topk(row, k):
    """Top-k indices by descending value, ties to the lowest column."""
    order = sorted(range(len(row)), key=lambda c: (-float(row[c]), c))
    return order[:k]


def brute_reweighted(s: np.ndarray, k: int) -> np.ndarray:
    """Direct evaluation of the aggregation pipeline on a square S."""
    n = s.shape[0]
    p = [[0.0] * n for _ in range(n)]
    for r in range(n):
        for c in brute_topk(s[r], k):
            p[c][r] = 1.0 / k
    for r in range(n):
        if sum(p[r]) == 0.0:
            p[r][r] = 1.0
    out = [[0.0] * n for _ in range(n)]
    for r in range(n):
        nz = [c for c in range(n) if p[r][c] != 0.0]
        total = sum(math.exp(p[r][c]) for c in nz)
        for c in nz:
            out[r][c] = math.exp(p[r][c]) / total
    return np.array(out, dtype=np.float64)


def brute_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple loop product in float64."""
    n, inner = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(inner):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def brute_softmax_row(row, scale):
    z = [scale * float(x) for x in row]
    mx = max(z)
    es = [math.exp(v - mx) for v in z]
    total = sum(es)
    return [e / total for e in es]


def fm(values, grid=None) -> FeatureMatrix:
    return FeatureMatrix(np.asarray(values, dtype=np.float32), grid=grid)


def random_fm(rng, rows, cols, scale=1.0) -> FeatureMatrix:
    return FeatureMatrix((rng.standard_normal((rows, cols)) * scale).astype(np.float32))
