"""Evaluation metrics for a labeled split."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graphs import UNLABELED, MultiRelationGraph
from .layers import PROB_CLAMP
from .model import ModelParams, forward
from .sparse import GraphError

logger = logging.getLogger(__name__)

THRESHOLD = 0.5  # a probability at or above this predicts "anomalous"


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_eval: int
    loss: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "n_eval": self.n_eval,
            "loss": self.loss,
        }


def report_from_predictions(labels: np.ndarray, probs: np.ndarray) -> MetricsReport:
    """Confusion counts, accuracy, anomalous-class recall, and mean BCE."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise GraphError("empty evaluation split")
    preds = (probs >= THRESHOLD).astype(np.int64)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    if tp + fn == 0:
        logger.warning("no positive nodes in the evaluation split; recall set to 0")
        recall = 0.0
    else:
        recall = tp / (tp + fn)
    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -np.mean(labels * np.log(clamped) + (1 - labels) * np.log(1.0 - clamped))
    return MetricsReport(
        accuracy=(tp + tn) / labels.size,
        recall=recall,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        n_eval=int(labels.size),
        loss=float(bce),
    )


def evaluate(
    params: ModelParams, g: MultiRelationGraph, eval_split
) -> MetricsReport:
    """Forward pass on the full graph, thresholded at 0.5 over the split."""
    split = np.asarray(eval_split, dtype=np.int64)
    if split.size == 0:
        raise GraphError("empty evaluation split")
    labels = g.labels[split]
    if np.any(labels == UNLABELED):
        raise GraphError("evaluation split must be fully labeled")
    _, probs = forward(g, params)
    return report_from_predictions(labels, probs.values[split, 0])
