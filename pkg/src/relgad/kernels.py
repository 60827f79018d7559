"""Hot-loop kernels, JIT-compiled when numba is available.

Every kernel is a strictly sequential loop in a fixed order (rows outward,
ascending column index inward), so outputs are bit-reproducible and
independent of thread count. The numpy fallbacks compute identical values
through deterministic reductions.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def decorate(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return decorate


@njit(cache=True)
def _csr_matmul_loop(indptr, cols, vals, h, out):  # pragma: no cover - compiled
    n = indptr.size - 1
    k = h.shape[1]
    for i in range(n):
        for e in range(indptr[i], indptr[i + 1]):
            j = cols[e]
            v = vals[e]
            for c in range(k):
                out[i, c] += v * h[j, c]


@njit(cache=True)
def _scatter_add_loop(idx, g, out):  # pragma: no cover - compiled
    k = g.shape[1]
    for e in range(idx.size):
        row = idx[e]
        for c in range(k):
            out[row, c] += g[e, c]


@njit(cache=True)
def _segment_sum_loop(indptr, x, out):  # pragma: no cover - compiled
    n = indptr.size - 1
    k = x.shape[1]
    for s in range(n):
        for e in range(indptr[s], indptr[s + 1]):
            for c in range(k):
                out[s, c] += x[e, c]


@njit(cache=True)
def _weighted_sum_loop(indptr, col_idx, alpha, feats, out):  # pragma: no cover
    n = indptr.size - 1
    k = feats.shape[1]
    for i in range(n):
        for e in range(indptr[i], indptr[i + 1]):
            j = col_idx[e]
            a = alpha[e]
            for c in range(k):
                out[i, c] += a * feats[j, c]


@njit(cache=True)
def _weighted_sum_grad_alpha_loop(indptr, col_idx, feats, gout, galpha):  # pragma: no cover
    n = indptr.size - 1
    k = feats.shape[1]
    for i in range(n):
        for e in range(indptr[i], indptr[i + 1]):
            j = col_idx[e]
            acc = 0.0
            for c in range(k):
                acc += gout[i, c] * feats[j, c]
            galpha[e] = acc


@njit(cache=True)
def _weighted_sum_grad_feats_loop(indptr, col_idx, alpha, gout, gfeats):  # pragma: no cover
    n = indptr.size - 1
    k = gout.shape[1]
    for i in range(n):
        for e in range(indptr[i], indptr[i + 1]):
            j = col_idx[e]
            a = alpha[e]
            for c in range(k):
                gfeats[j, c] += a * gout[i, c]


def _edge_rows(indptr):
    return np.repeat(np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr))


def weighted_neighbor_sum(indptr, col_idx, alpha, feats) -> np.ndarray:
    """out[i] = sum over edges e of segment i of alpha[e] * feats[col_idx[e]]."""
    n = indptr.size - 1
    feats = np.ascontiguousarray(feats)
    out = np.zeros((n, feats.shape[1]), dtype=np.float64)
    if col_idx.size == 0:
        return out
    if HAVE_NUMBA:
        _weighted_sum_loop(indptr, col_idx, alpha, feats, out)
        return out
    return segment_sum_rows(indptr, alpha[:, None] * feats[col_idx], n)


def weighted_neighbor_sum_grads(indptr, col_idx, alpha, feats, gout, n_feat_rows):
    """Gradients of :func:`weighted_neighbor_sum` for alpha and feats."""
    galpha = np.zeros(col_idx.size, dtype=np.float64)
    gfeats = np.zeros((n_feat_rows, feats.shape[1]), dtype=np.float64)
    if col_idx.size == 0:
        return galpha, gfeats
    gout = np.ascontiguousarray(gout)
    if HAVE_NUMBA:
        _weighted_sum_grad_alpha_loop(indptr, col_idx, feats, gout, galpha)
        _weighted_sum_grad_feats_loop(indptr, col_idx, alpha, gout, gfeats)
        return galpha, gfeats
    rows = _edge_rows(indptr)
    galpha[:] = np.sum(gout[rows] * feats[col_idx], axis=1)
    np.add.at(gfeats, col_idx, alpha[:, None] * gout[rows])
    return galpha, gfeats


def csr_matmul(n_rows: int, indptr, cols, vals, h) -> np.ndarray:
    """out[i] = sum over stored (i, j) of vals * h[j], ascending j first."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    out = np.zeros((n_rows, h.shape[1]), dtype=np.float64)
    if vals.size == 0:
        return out
    if HAVE_NUMBA:
        _csr_matmul_loop(indptr, cols, vals, h, out)
        return out
    prod = vals[:, None] * h[cols]
    nonempty = np.flatnonzero(np.diff(indptr) > 0)
    out[nonempty] = np.add.reduceat(prod, indptr[nonempty], axis=0)
    return out


def scatter_add_rows(out: np.ndarray, idx, g) -> None:
    """out[idx[e]] += g[e], processed in ascending e."""
    if idx.size == 0:
        return
    if HAVE_NUMBA:
        _scatter_add_loop(idx, np.ascontiguousarray(g), out)
        return
    np.add.at(out, idx, g)


def segment_sum_rows(indptr, x, n_segments: int) -> np.ndarray:
    """Row-block sums over contiguous segments delimited by indptr."""
    out = np.zeros((n_segments, x.shape[1]), dtype=np.float64)
    if x.shape[0] == 0:
        return out
    if HAVE_NUMBA:
        _segment_sum_loop(indptr, np.ascontiguousarray(x), out)
        return out
    nonempty = np.flatnonzero(np.diff(indptr) > 0)
    out[nonempty] = np.add.reduceat(x, indptr[nonempty], axis=0)
    return out
