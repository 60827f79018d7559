"""Full detector assembly: configuration, parameters, batching, training.

The full pipeline runs per-relation convolution stacks, fuses them, applies
one attention layer on the merged graph, consolidates with a neighborhood
mean, and discriminates. Two reduced variants exist for attribution
studies: ``pr`` swaps the convolution fusion for a plain propagate-and-sum
of raw features, ``pa`` skips the final consolidation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tape, Tensor
from .graphs import UNLABELED, MultiRelationGraph, merge_adjacencies, merge_relations
from .layers import AttentionGraph, ClassifierParams, GatParams, GcnStack
from .optim import AdamState, adam_step, xavier_init
from .sparse import (
    GraphError,
    SparseAdjacency,
    SparseOp,
    _concat_ranges,
    extract_submatrix,
    mean_neighbor_operator,
    normalize,
    normalize_with_degrees,
)

VARIANTS = ("full", "pr", "pa")
GAT_LAYERS = 1  # the attention stage is a single layer by design


@dataclass
class ModelConfig:
    variant: str = "full"
    gcn_layers: int = 2
    gat_heads: int = 4
    embed_dim: int = 64
    lr: float = 0.005
    l2_penalty: float = 0.001
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    hop_count: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise GraphError(f"unknown variant {self.variant!r}")
        if self.gcn_layers < 1:
            raise GraphError("need at least one convolution layer")
        if self.embed_dim % self.gat_heads != 0:
            raise GraphError("embed_dim must be divisible by gat_heads")
        if self.batch_size < 1:
            raise GraphError("batch_size must be at least 1")
        if self.lr < 0:
            raise GraphError("learning rate must be non-negative")
        if self.epochs < 0:
            raise GraphError("epochs must be non-negative")

    @property
    def resolved_hops(self) -> int:
        """Sampling depth covering the receptive field of every stage."""
        if self.hop_count is not None:
            return self.hop_count
        return self.gcn_layers + GAT_LAYERS + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """All trainable tensors, with a canonical flat name -> tensor view."""

    variant: str
    gcn: list[GcnStack]
    gat: GatParams
    clf: ClassifierParams

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for ri, stack in enumerate(self.gcn):
            for li, w in enumerate(stack.weights):
                out[f"gcn.r{ri}.l{li}"] = w
        for k in range(self.gat.heads):
            out[f"gat.h{k}.lin"] = self.gat.lin[k]
            out[f"gat.h{k}.attn"] = self.gat.attn[k]
        out["clf.w1"] = self.clf.w1
        out["clf.b1"] = self.clf.b1
        out["clf.w2"] = self.clf.w2
        out["clf.b2"] = self.clf.b2
        return out

    def all(self) -> list[Tensor]:
        return list(self.named().values())

    def n_entries(self) -> int:
        return sum(t.values.size for t in self.all())


def init_params(
    config: ModelConfig,
    feature_dim: int,
    n_relations: int,
    seed_seq: np.random.SeedSequence | None = None,
) -> ModelParams:
    """Xavier-initialized parameters; biases start at zero.

    Per-tensor seeds are spawned from one root sequence in canonical
    parameter order, so identical configs rebuild identical weights.
    """
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(config.seed)
    d_out = config.embed_dim
    head_dim = d_out // config.gat_heads
    if config.variant == "pr":
        gcn_tensors = 0
        gat_in = feature_dim
    else:
        gcn_tensors = n_relations * config.gcn_layers
        gat_in = n_relations * d_out
    children = iter(seed_seq.spawn(gcn_tensors + 2 * config.gat_heads + 2))

    gcn = []
    if config.variant != "pr":
        for _ in range(n_relations):
            dims = [feature_dim] + [d_out] * config.gcn_layers
            gcn.append(
                GcnStack(
                    [
                        xavier_init(dims[li], dims[li + 1], next(children))
                        for li in range(config.gcn_layers)
                    ]
                )
            )
    lin = [xavier_init(gat_in, head_dim, next(children)) for _ in range(config.gat_heads)]
    attn = [xavier_init(2 * head_dim, 1, next(children)) for _ in range(config.gat_heads)]
    clf = ClassifierParams(
        w1=xavier_init(d_out, d_out, next(children)),
        b1=Tensor(np.zeros((1, d_out)), requires_grad=True),
        w2=xavier_init(d_out, 1, next(children)),
        b2=Tensor(np.zeros((1, 1)), requires_grad=True),
    )
    return ModelParams(config.variant, gcn, GatParams(lin, attn), clf)


@dataclass(frozen=True)
class GraphView:
    """Precomputed propagation structures for one graph or subgraph."""

    n: int
    features: np.ndarray
    rel_norm: list[SparseOp]
    attn: AttentionGraph
    mean_op: SparseOp

    @classmethod
    def from_graph(cls, g: MultiRelationGraph) -> "GraphView":
        cached = g._view_cache.get("view")
        if cached is not None:
            return cached
        merged = merge_relations(g)
        view = cls(
            n=g.n,
            features=g.features,
            rel_norm=[SparseOp.from_normalized(normalize(rel)) for rel in g.relations],
            attn=AttentionGraph.from_adjacency(merged.add_self_loops()),
            mean_op=mean_neighbor_operator(merged),
        )
        g._view_cache["view"] = view
        return view

    @classmethod
    def from_batch(cls, batch: "BatchSubgraph") -> "GraphView":
        merged = merge_adjacencies(batch.n, batch.relations)
        return cls(
            n=batch.n,
            features=batch.features,
            rel_norm=[
                SparseOp.from_normalized(normalize_with_degrees(rel, deg))
                for rel, deg in zip(batch.relations, batch.lifted_degrees)
            ],
            attn=AttentionGraph.from_adjacency(merged.add_self_loops()),
            mean_op=mean_neighbor_operator(merged),
        )


@dataclass
class BatchSubgraph:
    """Seed nodes plus their hop-neighborhood, remapped to local indices.

    ``lifted_degrees`` keeps the parent graph's self-loop-lifted degrees so
    normalization inside the subgraph matches the full graph exactly for
    every node whose receptive field is covered.
    """

    seeds: np.ndarray
    included: np.ndarray
    seed_local: np.ndarray
    relations: list[SparseAdjacency]
    lifted_degrees: list[np.ndarray]
    features: np.ndarray
    seed_labels: np.ndarray

    @property
    def n(self) -> int:
        return int(self.included.size)


def _expand_seeds(g: MultiRelationGraph, seeds: np.ndarray, hops: int) -> np.ndarray:
    """Sorted node ids reachable from the seeds within ``hops`` union steps."""
    visited = np.zeros(g.n, dtype=bool)
    visited[seeds] = True
    frontier = np.unique(seeds)
    for _ in range(hops):
        if frontier.size == 0:
            break
        neigh = []
        for rel in g.relations:
            starts = rel.indptr[frontier]
            counts = rel.indptr[frontier + 1] - starts
            neigh.append(rel.cols[_concat_ranges(starts, counts)])
        candidates = np.unique(np.concatenate(neigh)) if neigh else frontier[:0]
        frontier = candidates[~visited[candidates]]
        visited[frontier] = True
    return np.flatnonzero(visited)


def _build_batch(
    g: MultiRelationGraph, seeds: np.ndarray, included: np.ndarray
) -> BatchSubgraph:
    return BatchSubgraph(
        seeds=seeds,
        included=included,
        seed_local=np.searchsorted(included, seeds),
        relations=[extract_submatrix(rel, included) for rel in g.relations],
        lifted_degrees=[
            (rel.weighted_degrees() + 1.0)[included] for rel in g.relations
        ],
        features=g.features[included],
        seed_labels=g.labels[seeds],
    )


def sample_batch(g: MultiRelationGraph, seed_nodes, hops: int) -> BatchSubgraph:
    """Breadth-first expansion of the seeds over the union of all relations."""
    seeds = np.asarray(seed_nodes, dtype=np.int64)
    if seeds.size == 0:
        raise GraphError("empty seed set")
    if np.any(g.labels[seeds] == UNLABELED):
        raise GraphError("batch seeds must be labeled")
    if hops < 1:
        raise GraphError("hops must be at least 1")
    return _build_batch(g, seeds, _expand_seeds(g, seeds, hops))


def _resolve_view(source) -> GraphView:
    if isinstance(source, GraphView):
        return source
    if isinstance(source, BatchSubgraph):
        return GraphView.from_batch(source)
    if isinstance(source, MultiRelationGraph):
        return GraphView.from_graph(source)
    raise GraphError(f"cannot run a forward pass on {type(source).__name__}")


def _fused_embedding(view: GraphView, params: ModelParams) -> Tensor:
    feat = Tensor(view.features)
    if params.variant == "pr":
        # plain-relation variant: raw features propagated once per relation,
        # summed elementwise, then row-normalized
        acc = ad.sparse_matmul(view.rel_norm[0], feat)
        for op in view.rel_norm[1:]:
            acc = ad.add(acc, ad.sparse_matmul(op, feat))
        return ad.row_l2_normalize(acc, eps=layers.FUSE_EPS)
    outputs = []
    for op, stack in zip(view.rel_norm, params.gcn):
        h = feat
        for w in stack.weights:
            h = layers.gcn_forward(op, h, w)
        outputs.append(h)
    return layers.fuse_relations(outputs)


def _forward(view: GraphView, params: ModelParams):
    z = _fused_embedding(view, params)
    h = layers.gat_forward(view.attn, z, params.gat)
    if params.variant == "pa":
        final = h
    else:
        final = layers.enhanced_aggregate(view.mean_op, h)
    return final, layers.discriminate(final, params.clf)


def forward(source, params: ModelParams):
    """Run the variant the parameters were built for.

    Returns (final embeddings, anomaly probabilities), both per node of the
    supplied graph, batch subgraph, or prebuilt view.
    """
    return _forward(_resolve_view(source), params)


def forward_full(source, params: ModelParams):
    if params.variant != "full":
        raise GraphError("parameters were not built for the full variant")
    return forward(source, params)


def forward_pr(source, params: ModelParams):
    if params.variant != "pr":
        raise GraphError("parameters were not built for the pr variant")
    return forward(source, params)


def forward_pa(source, params: ModelParams):
    if params.variant != "pa":
        raise GraphError("parameters were not built for the pa variant")
    return forward(source, params)


def _collect_grads(tape: Tape, named: dict[str, Tensor], grads) -> dict[str, np.ndarray]:
    out = {}
    for name, t in named.items():
        if t._tape is tape and t.node_id is not None and t.node_id in grads:
            out[name] = grads[t.node_id]
        else:
            out[name] = np.zeros_like(t.values)
    return out


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]


def train(
    g: MultiRelationGraph,
    config: ModelConfig,
    train_nodes=None,
    epoch_callback=None,
) -> TrainResult:
    """Mini-batch training over the labeled nodes.

    Each step samples the batch seeds' hop-neighborhood, runs the forward
    pass on that subgraph, scores the loss on the seeds only, and applies
    one Adam update. Batches draw from the positive and negative pools
    alternately, so the minority class is cycled more often.

    ``epoch_callback(epoch, params)``, when given, runs after each epoch;
    it must not mutate the parameters.
    """
    if train_nodes is None:
        train_nodes = g.labeled_nodes()
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if train_nodes.size == 0:
        raise GraphError("no labeled training nodes")
    labels = g.labels[train_nodes]
    if np.any(labels == UNLABELED):
        raise GraphError("training nodes must be labeled")
    pos = train_nodes[labels == 1]
    neg = train_nodes[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise GraphError(
            "single-class training split: need at least one node per class"
        )

    root = np.random.SeedSequence(config.seed)
    ss_params, ss_batches = root.spawn(2)
    params = init_params(config, g.feature_dim, g.n_relations, ss_params)
    named = params.named()
    state = AdamState.init(named)
    rng = np.random.Generator(np.random.PCG64(ss_batches))

    steps_per_epoch = math.ceil(train_nodes.size / config.batch_size)
    hops = config.resolved_hops
    full_view = GraphView.from_graph(g)
    losses: list[float] = []

    for epoch in range(config.epochs):
        pos_order = rng.permutation(pos)
        neg_order = rng.permutation(neg)
        pi = ni = 0
        for _ in range(steps_per_epoch):
            batch_ids = np.empty(config.batch_size, dtype=np.int64)
            for k in range(config.batch_size):
                if k % 2 == 0:
                    batch_ids[k] = pos_order[pi % pos_order.size]
                    pi += 1
                else:
                    batch_ids[k] = neg_order[ni % neg_order.size]
                    ni += 1
            included = _expand_seeds(g, batch_ids, hops)
            if included.size == g.n:
                view, seed_rows = full_view, batch_ids
                seed_labels = g.labels[batch_ids]
            else:
                batch = _build_batch(g, batch_ids, included)
                view, seed_rows = GraphView.from_batch(batch), batch.seed_local
                seed_labels = batch.seed_labels
            with Tape() as tape:
                _, probs = _forward(view, params)
                p_seeds = ad.gather_rows(probs, seed_rows)
                step_loss = layers.loss(
                    p_seeds, seed_labels, named.values(), config.l2_penalty
                )
                grads = ad.backward(tape, step_loss)
            adam_step(named, _collect_grads(tape, named, grads), state, config.lr)
            losses.append(float(step_loss.values[0, 0]))
        if epoch_callback is not None:
            epoch_callback(epoch, params)
    return TrainResult(params=params, losses=losses)
