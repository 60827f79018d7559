"""The model's four stages and its training loss.

Stage 1 runs an independent convolution stack per relation, stage 2 fuses
the per-relation outputs by concatenation and row normalization, stage 3
is one multi-head attention layer on the merged user graph, stage 4
consolidates each embedding with its neighborhood mean. A small MLP with a
sigmoid head turns the final embedding into an anomaly probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sparse import SparseAdjacency, SparseOp

ATTENTION_SLOPE = 0.2  # leaky slope for attention scores
FUSE_EPS = 1e-12
PROB_CLAMP = 1e-12


@dataclass
class GcnStack:
    """Convolution weights for one relation, one tensor per layer."""

    weights: list[Tensor]


@dataclass
class GatParams:
    """Per-head linear maps and score vectors of the attention layer.

    ``attn[k]`` stacks the source and destination halves of head k's score
    vector, so it has 2 * head_dim rows.
    """

    lin: list[Tensor]
    attn: list[Tensor]

    @property
    def heads(self) -> int:
        return len(self.lin)

    @property
    def head_dim(self) -> int:
        return self.lin[0].values.shape[1]


@dataclass
class ClassifierParams:
    """One hidden ReLU layer, then a single logit."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass(frozen=True)
class AttentionGraph:
    """Edge-level view of a self-loop-augmented adjacency.

    Edges are grouped per destination row (CSR order), which is exactly the
    grouping the per-node softmax needs.
    """

    n: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    indptr: np.ndarray

    @classmethod
    def from_adjacency(cls, adj: SparseAdjacency) -> "AttentionGraph":
        if not adj.has_loops:
            adj = adj.add_self_loops()
        return cls(adj.n, adj.row_ids(), adj.cols, adj.indptr)


def gcn_forward(norm_adj: SparseOp, h: Tensor, weight: Tensor) -> Tensor:
    """One propagation layer: relu(A_hat @ h @ weight)."""
    return ad.relu(ad.matmul(ad.sparse_matmul(norm_adj, h), weight))


def fuse_relations(per_relation: list[Tensor]) -> Tensor:
    """Concatenate per-relation embeddings and L2-normalize each row.

    All-zero rows are left untouched by the normalization guard.
    """
    if not per_relation:
        raise ad.AutodiffError("fusion needs at least one relation output")
    return ad.row_l2_normalize(ad.concat_cols(per_relation), eps=FUSE_EPS)


def gat_forward(graph: AttentionGraph, h: Tensor, params: GatParams) -> Tensor:
    """Multi-head attention over each node's neighborhood (self included).

    Head k scores edge (i, j) as leaky_relu(a_src . T_k h_i + a_dst . T_k h_j),
    normalizes scores per destination node with a softmax, and averages the
    transformed neighbor features with those weights. Head outputs are
    concatenated, then passed through ReLU.
    """
    head_outputs = []
    for lin, attn in zip(params.lin, params.attn):
        dh = lin.values.shape[1]
        th = ad.matmul(h, lin)
        a_src = ad.slice_rows(attn, 0, dh)
        a_dst = ad.slice_rows(attn, dh, 2 * dh)
        s = ad.matmul(th, a_src)
        t = ad.matmul(th, a_dst)
        scores = ad.leaky_relu(
            ad.add(ad.gather_rows(s, graph.row_idx), ad.gather_rows(t, graph.col_idx)),
            slope=ATTENTION_SLOPE,
        )
        alpha = ad.segment_softmax(scores, graph.indptr)
        head_outputs.append(
            ad.weighted_neighbor_sum(alpha, th, graph.col_idx, graph.indptr)
        )
    return ad.relu(ad.concat_cols(head_outputs))


def attention_weights(graph: AttentionGraph, h: Tensor, params: GatParams):
    """Per-head attention coefficients, grouped per node by graph.indptr.

    Inference-side helper for tests and inspection; mirrors the scoring in
    :func:`gat_forward`.
    """
    out = []
    for lin, attn in zip(params.lin, params.attn):
        dh = lin.values.shape[1]
        th = h.values @ lin.values
        s = th @ attn.values[:dh]
        t = th @ attn.values[dh:]
        raw = s[graph.row_idx, 0] + t[graph.col_idx, 0]
        scores = Tensor(np.where(raw > 0, raw, ATTENTION_SLOPE * raw)[:, None])
        out.append(ad.segment_softmax(scores, graph.indptr).values[:, 0])
    return out


def enhanced_aggregate(mean_op: SparseOp, z0: Tensor) -> Tensor:
    """Add each node's neighborhood mean to its own embedding, then ReLU.

    Isolated nodes see a zero mean and keep relu(z0).
    """
    return ad.relu(ad.add(z0, ad.sparse_matmul(mean_op, z0)))


def discriminate(z: Tensor, clf: ClassifierParams) -> Tensor:
    """Anomaly probability per node: sigmoid(MLP(z)), one column."""
    hidden = ad.relu(ad.add(ad.matmul(z, clf.w1), clf.b1))
    return ad.sigmoid(ad.add(ad.matmul(hidden, clf.w2), clf.b2))


def loss(probs: Tensor, labels: np.ndarray, params, l2_penalty: float) -> Tensor:
    """Mean binary cross-entropy plus an L2 penalty on all parameters.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs, so the
    value is finite for confident mistakes.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if labels.shape[0] != probs.values.shape[0] or probs.values.shape[1] != 1:
        raise ad.AutodiffError("probabilities and labels must align, one column")
    if np.any((labels != 0) & (labels != 1)):
        raise ad.AutodiffError("labels must be 0 or 1")
    if l2_penalty < 0:
        raise ad.AutodiffError("l2 penalty must be non-negative")
    batch = labels.shape[0]
    y = Tensor(labels)
    ones = Tensor(np.ones_like(labels))
    p = ad.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_neg = ad.add(ones, ad.scale(p, -1.0))
    y_neg = Tensor(1.0 - labels)
    ll = ad.add(
        ad.elementwise_mul(y, ad.log(p)),
        ad.elementwise_mul(y_neg, ad.log(p_neg)),
    )
    total = ad.scale(ad.sum_all(ll), -1.0 / batch)
    if l2_penalty > 0:
        for theta in params:
            total = ad.add(
                total, ad.scale(ad.sum_all(ad.elementwise_mul(theta, theta)), l2_penalty)
            )
    return total
