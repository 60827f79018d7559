"""The multi-relation user graph: features, labels, and R parallel adjacencies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse import GraphError, SparseAdjacency, _coo_to_csr

UNLABELED = -1


@dataclass
class MultiRelationGraph:
    """One node set with parallel relation adjacencies, features, labels.

    Labels are 0 (benign), 1 (anomalous) or ``UNLABELED``. The object is
    treated as immutable after construction and is safe to share read-only.
    """

    n: int
    relation_names: list[str]
    relations: list[SparseAdjacency]
    features: np.ndarray
    labels: np.ndarray
    _view_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.relations) < 1:
            raise GraphError("at least one relation is required")
        if len(self.relation_names) != len(self.relations):
            raise GraphError("one name per relation is required")
        for name, rel in zip(self.relation_names, self.relations):
            if rel.n != self.n:
                raise GraphError(f"relation {name!r} has {rel.n} nodes, expected {self.n}")
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise GraphError("features must be an n-by-d matrix")
        if self.features.shape[1] < 1:
            raise GraphError("at least one feature dimension is required")
        if not np.all(np.isfinite(self.features)):
            raise GraphError("features must be finite")
        if self.labels.shape != (self.n,):
            raise GraphError("labels must be a length-n vector")
        bad = ~np.isin(self.labels, (UNLABELED, 0, 1))
        if np.any(bad):
            raise GraphError("labels must be 0, 1 or UNLABELED")

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)


def merge_adjacencies(n: int, relations: list[SparseAdjacency]) -> SparseAdjacency:
    """Union of edge sets with per-edge weights summed across relations."""
    rows, cols, vals = [], [], []
    for rel in relations:
        if rel.has_loops:
            raise GraphError("merge expects loop-free relation graphs")
        rows.append(rel.row_ids())
        cols.append(rel.cols)
        vals.append(rel.vals)
    indptr, mcols, mvals = _coo_to_csr(
        n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    )
    return SparseAdjacency(n, indptr, mcols, mvals, validate=False)


def merge_relations(g: MultiRelationGraph) -> SparseAdjacency:
    """Single homogeneous user graph for the attention and aggregation stages."""
    return merge_adjacencies(g.n, g.relations)
