"""Anomalous-user detection on multi-relation interaction graphs."""

from .autodiff import AutodiffError, Tape, Tensor, backward
from .graphs import UNLABELED, MultiRelationGraph, merge_relations
from .metrics import MetricsReport, evaluate
from .model import (
    BatchSubgraph,
    ModelConfig,
    ModelParams,
    forward,
    forward_full,
    forward_pa,
    forward_pr,
    init_params,
    sample_batch,
    train,
)
from .optim import AdamState, adam_step, xavier_init
from .sparse import (
    GraphError,
    IncidenceMatrix,
    NormalizedAdjacency,
    SparseAdjacency,
    build_relation_graph,
    normalize,
    sp_dense_matmul,
)
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AutodiffError",
    "BatchSubgraph",
    "GraphError",
    "IncidenceMatrix",
    "MetricsReport",
    "ModelConfig",
    "ModelParams",
    "MultiRelationGraph",
    "NormalizedAdjacency",
    "SparseAdjacency",
    "SynthConfig",
    "Tape",
    "Tensor",
    "UNLABELED",
    "adam_step",
    "backward",
    "build_relation_graph",
    "evaluate",
    "forward",
    "forward_full",
    "forward_pa",
    "forward_pr",
    "generate",
    "init_params",
    "merge_relations",
    "normalize",
    "sample_batch",
    "sp_dense_matmul",
    "train",
    "xavier_init",
]
