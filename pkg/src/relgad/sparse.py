"""Sparse user-user adjacency storage and relation-graph construction.

Relation graphs are obtained by projecting a user-entity incidence matrix
onto users: two users are connected when they share at least one entity,
weighted by the number of shared entities. All adjacencies are undirected
and stored in CSR form with sorted column indices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

# One very popular entity (a viral hashtag, a hub product) otherwise turns
# into a near-clique of its users; entities above this degree are skipped
# during projection and reported.
DEFAULT_ENTITY_DEGREE_CAP = 1000


class GraphError(ValueError):
    """A graph input violates a structural contract."""


def _coo_to_csr(n_rows: int, rows, cols, vals):
    """Sort COO triplets by (row, col), merge duplicates by summing.

    Returns (indptr, cols, vals) with strictly increasing column indices
    inside every row. Deterministic for identical inputs.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if rows.size == 0:
        return (
            np.zeros(n_rows + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.float64),
        )
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    new_key = np.empty(rows.size, dtype=bool)
    new_key[0] = True
    new_key[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.flatnonzero(new_key)
    out_rows = rows[starts]
    out_cols = cols[starts]
    out_vals = np.add.reduceat(vals, starts)
    counts = np.bincount(out_rows, minlength=n_rows).astype(np.int64)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    return indptr, out_cols, out_vals


def _row_ids(indptr: np.ndarray) -> np.ndarray:
    return np.repeat(
        np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr)
    )


def _concat_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s+c) for each (s, c); handles zero counts."""
    nz = counts > 0
    s, c = starts[nz], counts[nz]
    if s.size == 0:
        return np.zeros(0, dtype=np.int64)
    bounds = np.cumsum(c)
    out = np.ones(bounds[-1], dtype=np.int64)
    out[0] = s[0]
    out[bounds[:-1]] = s[1:] - (s[:-1] + c[:-1]) + 1
    return np.cumsum(out)


class SparseAdjacency:
    """Symmetric weighted adjacency over ``n`` nodes, CSR layout.

    Invariants enforced at construction: structural symmetry with equal
    weights in both directions, sorted duplicate-free column indices,
    non-negative finite weights, and an empty diagonal unless the matrix
    was produced by :meth:`add_self_loops`.
    """

    __slots__ = ("n", "indptr", "cols", "vals", "has_loops")

    def __init__(self, n, indptr, cols, vals, *, has_loops=False, validate=True):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.vals = np.asarray(vals, dtype=np.float64)
        self.has_loops = bool(has_loops)
        if validate:
            self._validate()

    @classmethod
    def from_coo(cls, n, rows, cols, vals, **kwargs):
        indptr, ccols, cvals = _coo_to_csr(n, rows, cols, vals)
        return cls(n, indptr, ccols, cvals, **kwargs)

    @classmethod
    def from_edges(cls, n, src, dst, weights=None):
        """Build from an undirected edge list; both directions are added."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if weights is None:
            weights = np.ones(src.size, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(src == dst):
            raise GraphError("self-edges are not allowed in a relation graph")
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        vals = np.concatenate([weights, weights])
        return cls.from_coo(n, rows, cols, vals)

    @classmethod
    def zeros(cls, n):
        return cls(
            n,
            np.zeros(n + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.float64),
            validate=False,
        )

    @property
    def nnz(self) -> int:
        return int(self.cols.size)

    def row_ids(self) -> np.ndarray:
        return _row_ids(self.indptr)

    def neighbor_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def weighted_degrees(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.float64)
        counts = self.neighbor_counts()
        nonempty = np.flatnonzero(counts > 0)
        if nonempty.size:
            out[nonempty] = np.add.reduceat(self.vals, self.indptr[nonempty])
        return out

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n), dtype=np.float64)
        dense[self.row_ids(), self.cols] = self.vals
        return dense

    def add_self_loops(self, weight: float = 1.0) -> "SparseAdjacency":
        if self.has_loops:
            raise GraphError("adjacency already carries self-loops")
        diag = np.arange(self.n, dtype=np.int64)
        rows = np.concatenate([self.row_ids(), diag])
        cols = np.concatenate([self.cols, diag])
        vals = np.concatenate([self.vals, np.full(self.n, float(weight))])
        indptr, ccols, cvals = _coo_to_csr(self.n, rows, cols, vals)
        return SparseAdjacency(
            self.n, indptr, ccols, cvals, has_loops=True, validate=False
        )

    def _validate(self):
        if self.n < 0:
            raise GraphError("negative node count")
        if self.indptr.shape != (self.n + 1,):
            raise GraphError("indptr length must be n + 1")
        if self.indptr[0] != 0 or self.indptr[-1] != self.cols.size:
            raise GraphError("indptr does not span the stored entries")
        if np.any(np.diff(self.indptr) < 0):
            raise GraphError("indptr must be non-decreasing")
        if self.cols.size != self.vals.size:
            raise GraphError("cols and vals length mismatch")
        if self.cols.size == 0:
            return
        if self.cols.min() < 0 or self.cols.max() >= self.n:
            raise GraphError("column index out of range")
        if not np.all(np.isfinite(self.vals)) or np.any(self.vals < 0):
            raise GraphError("weights must be finite and non-negative")
        rows = self.row_ids()
        same_row = rows[1:] == rows[:-1]
        if np.any(self.cols[1:][same_row] <= self.cols[:-1][same_row]):
            raise GraphError("column indices must be strictly increasing per row")
        if not self.has_loops and np.any(rows == self.cols):
            raise GraphError("diagonal entries are not allowed before self-loops")
        # structural symmetry with equal weights: the transpose, re-sorted by
        # (row, col), must reproduce the original triplets exactly
        order = np.lexsort((rows, self.cols))
        if not (
            np.array_equal(self.cols[order], rows)
            and np.array_equal(rows[order], self.cols)
            and np.array_equal(self.vals[order], self.vals)
        ):
            raise GraphError("adjacency must be symmetric with equal weights")


@dataclass(frozen=True)
class IncidenceMatrix:
    """Binary user-entity occurrence pairs for one relation."""

    n_users: int
    n_entities: int
    user_idx: np.ndarray
    entity_idx: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.user_idx, dtype=np.int64)
        e = np.asarray(self.entity_idx, dtype=np.int64)
        object.__setattr__(self, "user_idx", u)
        object.__setattr__(self, "entity_idx", e)
        if u.shape != e.shape or u.ndim != 1:
            raise GraphError("user_idx and entity_idx must be parallel 1-D arrays")
        if u.size:
            if u.min() < 0 or u.max() >= self.n_users:
                raise GraphError("user index out of range")
            if e.min() < 0 or e.max() >= self.n_entities:
                raise GraphError("entity index out of range")
            key = u * np.int64(self.n_entities) + e
            if np.unique(key).size != key.size:
                raise GraphError("duplicate (user, entity) pairs")

    @classmethod
    def from_pairs(cls, n_users, n_entities, pairs):
        """Build from an iterable of (user, entity) pairs, deduplicating."""
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if arr.size:
            key = arr[:, 0] * np.int64(n_entities) + arr[:, 1]
            _, keep = np.unique(key, return_index=True)
            arr = arr[np.sort(keep)]
        return cls(n_users, n_entities, arr[:, 0], arr[:, 1])

    @property
    def n_links(self) -> int:
        return int(self.user_idx.size)


def build_relation_graph(
    inc: IncidenceMatrix,
    entity_degree_cap: int = DEFAULT_ENTITY_DEGREE_CAP,
) -> SparseAdjacency:
    """Project user-entity incidence onto a user-user co-occurrence graph.

    Entry (i, j) counts the entities users i and j share; the diagonal is
    dropped (self co-occurrence is not a relation between distinct users).
    Entities with more than ``entity_degree_cap`` users are excluded from
    the projection and reported via a warning, never silently.
    """
    if inc.n_links == 0:
        return SparseAdjacency.zeros(inc.n_users)
    order = np.lexsort((inc.user_idx, inc.entity_idx))
    users = inc.user_idx[order]
    ents = inc.entity_idx[order]
    boundaries = np.concatenate(
        ([0], np.flatnonzero(ents[1:] != ents[:-1]) + 1, [ents.size])
    )
    pair_src, pair_dst = [], []
    skipped = []
    for b, e in zip(boundaries[:-1], boundaries[1:]):
        size = e - b
        if size < 2:
            continue
        if size > entity_degree_cap:
            skipped.append((int(ents[b]), int(size)))
            continue
        members = users[b:e]
        iu, ju = np.triu_indices(size, k=1)
        pair_src.append(members[iu])
        pair_dst.append(members[ju])
    if skipped:
        logger.warning(
            "projection skipped %d entities over the degree cap %d: %s",
            len(skipped),
            entity_degree_cap,
            skipped[:10],
        )
    if not pair_src:
        return SparseAdjacency.zeros(inc.n_users)
    src = np.concatenate(pair_src)
    dst = np.concatenate(pair_dst)
    # count shared entities per unordered pair, then mirror
    key = src * np.int64(inc.n_users) + dst
    uniq, counts = np.unique(key, return_counts=True)
    u_src = (uniq // inc.n_users).astype(np.int64)
    u_dst = (uniq % inc.n_users).astype(np.int64)
    return SparseAdjacency.from_edges(
        inc.n_users, u_src, u_dst, counts.astype(np.float64)
    )


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetrically normalized adjacency with implicit self-loops.

    Values are w_ij / sqrt(d_i * d_j) with d the self-loop-lifted row sums,
    so every row is nonempty and the spectral radius is at most one.
    """

    n: int
    matrix: SparseAdjacency


def normalize(adj: SparseAdjacency) -> NormalizedAdjacency:
    """Degree-normalize ``adj`` after adding unit self-loops."""
    if adj.has_loops:
        raise GraphError("normalize expects a loop-free adjacency")
    return normalize_with_degrees(adj, adj.weighted_degrees() + 1.0)


def normalize_with_degrees(
    adj: SparseAdjacency, lifted_degrees: np.ndarray
) -> NormalizedAdjacency:
    """Normalization with externally supplied self-loop-lifted degrees.

    Used by mini-batch subgraphs, which keep the parent graph's degrees so
    that included nodes propagate exactly as they would on the full graph.
    """
    deg = np.asarray(lifted_degrees, dtype=np.float64)
    if deg.shape != (adj.n,):
        raise GraphError("degree vector length mismatch")
    if np.any(deg <= 0):
        raise GraphError("lifted degrees must be positive")
    inv_sqrt = 1.0 / np.sqrt(deg)
    rows = adj.row_ids()
    # the symmetric factor is computed first so (i, j) and (j, i) round
    # identically and the output is exactly symmetric
    off_vals = adj.vals * (inv_sqrt[rows] * inv_sqrt[adj.cols])
    diag = np.arange(adj.n, dtype=np.int64)
    indptr, cols, vals = _coo_to_csr(
        adj.n,
        np.concatenate([rows, diag]),
        np.concatenate([adj.cols, diag]),
        np.concatenate([off_vals, 1.0 / deg]),
    )
    mat = SparseAdjacency(adj.n, indptr, cols, vals, has_loops=True, validate=False)
    return NormalizedAdjacency(adj.n, mat)


def _csr_matmul(n_rows, indptr, cols, vals, h):
    # per-row accumulation in ascending column order; the kernel loop is
    # strictly sequential, giving a fixed reduction order for
    # bit-reproducibility
    return kernels.csr_matmul(n_rows, indptr, cols, vals, h)


def sp_dense_matmul(adj, h: np.ndarray) -> np.ndarray:
    """Sparse-dense product with a fixed per-row reduction order."""
    mat = adj.matrix if isinstance(adj, NormalizedAdjacency) else adj
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise GraphError("dense operand must be 2-D")
    if h.shape[0] != mat.n:
        raise GraphError(
            f"dimension mismatch: adjacency has {mat.n} nodes, "
            f"dense operand has {h.shape[0]} rows"
        )
    return _csr_matmul(mat.n, mat.indptr, mat.cols, mat.vals, h)


def power_iteration_radius(norm_adj: NormalizedAdjacency, iters: int = 200) -> float:
    """Spectral-radius estimate of a symmetric matrix by power iteration.

    For symmetric input the returned ||A x|| / ||x|| never exceeds the true
    radius (it is bounded by the largest singular value).
    """
    mat = norm_adj.matrix
    x = np.full(mat.n, 1.0 / np.sqrt(mat.n))
    est = 0.0
    for _ in range(iters):
        y = _csr_matmul(mat.n, mat.indptr, mat.cols, mat.vals, x[:, None])[:, 0]
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        est = norm / np.linalg.norm(x)
        x = y / norm
    return float(est)


@dataclass(frozen=True)
class SparseOp:
    """A fixed (non-trainable) sparse linear map with a cached transpose.

    The transpose is what gradient propagation multiplies by, so it is
    built once up front instead of per step.
    """

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    t_indptr: np.ndarray
    t_cols: np.ndarray
    t_vals: np.ndarray

    @classmethod
    def from_normalized(cls, na: NormalizedAdjacency) -> "SparseOp":
        m = na.matrix
        # symmetric: the transpose shares the same arrays
        return cls(
            m.n, m.n, m.indptr, m.cols, m.vals, m.indptr, m.cols, m.vals
        )

    @classmethod
    def from_csr(cls, n_rows, n_cols, indptr, cols, vals) -> "SparseOp":
        rows = _row_ids(indptr)
        t_indptr, t_cols, t_vals = _coo_to_csr(n_cols, cols, rows, vals)
        return cls(n_rows, n_cols, indptr, cols, vals, t_indptr, t_cols, t_vals)

    def matmul(self, h: np.ndarray) -> np.ndarray:
        if h.shape[0] != self.n_cols:
            raise GraphError("dimension mismatch in sparse operator product")
        return _csr_matmul(self.n_rows, self.indptr, self.cols, self.vals, h)

    def t_matmul(self, g: np.ndarray) -> np.ndarray:
        if g.shape[0] != self.n_rows:
            raise GraphError("dimension mismatch in transposed operator product")
        return _csr_matmul(self.n_cols, self.t_indptr, self.t_cols, self.t_vals, g)


def mean_neighbor_operator(adj: SparseAdjacency) -> SparseOp:
    """Row-stochastic operator averaging each node's neighbor rows.

    Rows of isolated nodes stay empty, so their average is zero.
    """
    counts = adj.neighbor_counts().astype(np.float64)
    rows = adj.row_ids()
    vals = np.where(counts[rows] > 0, 1.0 / counts[rows], 0.0)
    return SparseOp.from_csr(adj.n, adj.n, adj.indptr, adj.cols, vals)


def extract_submatrix(adj: SparseAdjacency, included: np.ndarray) -> SparseAdjacency:
    """Induced submatrix on ``included`` (sorted global ids), remapped to 0..m-1."""
    included = np.asarray(included, dtype=np.int64)
    m = included.size
    lookup = np.full(adj.n, -1, dtype=np.int64)
    lookup[included] = np.arange(m, dtype=np.int64)
    starts = adj.indptr[included]
    counts = adj.indptr[included + 1] - starts
    take = _concat_ranges(starts, counts)
    sub_rows = np.repeat(np.arange(m, dtype=np.int64), counts)
    g_cols = adj.cols[take]
    keep = lookup[g_cols] >= 0
    new_counts = np.bincount(sub_rows[keep], minlength=m).astype(np.int64)
    indptr = np.concatenate(([0], np.cumsum(new_counts)))
    # local ids preserve global order, so per-row columns stay sorted
    return SparseAdjacency(
        m,
        indptr,
        lookup[g_cols[keep]],
        adj.vals[take][keep],
        has_loops=adj.has_loops,
        validate=False,
    )
