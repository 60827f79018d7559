"""Experiment orchestration: splits, result grids, sweeps, gradient checks."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tape
from .graphs import MultiRelationGraph
from .metrics import evaluate
from .model import (
    GraphView,
    ModelConfig,
    _collect_grads,
    forward,
    init_params,
    train,
)
from .sparse import GraphError, SparseAdjacency

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("variant", "train_pct", "seed", "accuracy", "recall", "loss", "wall_time_s")
SWEEP_COLUMNS = ("gcn_layers", "embed_dim", "seed", "accuracy", "recall", "loss", "wall_time_s")
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5
BEST_EVAL_INTERVAL = 10  # epochs between checkpoint evaluations for the best-epoch report


def stratified_split(labels: np.ndarray, train_pct: float, seed_seq) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random split of the labeled nodes; at least one train node per class."""
    if not 0 < train_pct <= 100:
        raise GraphError("train_pct must lie in (0, 100]")
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    train_parts, test_parts = [], []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size == 0:
            raise GraphError(f"no labeled nodes of class {cls}")
        order = rng.permutation(members)
        take = max(1, int(round(members.size * train_pct / 100.0)))
        train_parts.append(order[:take])
        test_parts.append(order[take:])
    return (
        np.sort(np.concatenate(train_parts)),
        np.sort(np.concatenate(test_parts)),
    )


def _format_row(values) -> list[str]:
    out = []
    for v in values:
        if isinstance(v, float):
            out.append(f"{v:.6f}")
        else:
            out.append(str(v))
    return out


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(_format_row([row[c] for c in columns]))


def _write_summary(path, rows, group_cols) -> None:
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault(tuple(row[c] for c in group_cols), []).append(row)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(group_cols) + ["n_runs", "median_accuracy", "median_recall", "median_loss"])
        for key in sorted(groups):
            members = groups[key]
            w.writerow(
                _format_row(
                    list(key)
                    + [
                        len(members),
                        float(np.median([m["accuracy"] for m in members])),
                        float(np.median([m["recall"] for m in members])),
                        float(np.median([m["loss"] for m in members])),
                    ]
                )
            )


def run_single(
    g: MultiRelationGraph,
    config: ModelConfig,
    train_pct: float,
    timing: bool = True,
) -> dict:
    """Split, train, evaluate once; returns one result row.

    The row carries final-epoch metrics; the best metrics seen at the
    periodic evaluations (every ``BEST_EVAL_INTERVAL`` epochs plus the
    final state) ride along under the ``best_*`` keys, since long runs can
    drift past their best checkpoint.
    """
    labels = g.labels
    train_idx, test_idx = stratified_split(
        labels, train_pct, np.random.SeedSequence([config.seed, int(train_pct)])
    )
    if test_idx.size == 0:
        raise GraphError("train_pct leaves no test nodes")
    best: dict = {}

    def track_best(epoch, params):
        if (epoch + 1) % BEST_EVAL_INTERVAL != 0:
            return
        snapshot = evaluate(params, g, test_idx)
        if not best or snapshot.accuracy > best["report"].accuracy:
            best.update(report=snapshot, epoch=epoch)

    started = time.perf_counter()
    result = train(g, config, train_nodes=train_idx, epoch_callback=track_best)
    report = evaluate(result.params, g, test_idx)
    elapsed = time.perf_counter() - started
    if not best or report.accuracy > best["report"].accuracy:
        best.update(report=report, epoch=config.epochs - 1)
    return {
        "variant": config.variant,
        "train_pct": int(train_pct),
        "seed": config.seed,
        "accuracy": report.accuracy,
        "recall": report.recall,
        "loss": report.loss,
        "wall_time_s": elapsed if timing else 0.0,
        "best_accuracy": best["report"].accuracy,
        "best_recall": best["report"].recall,
        "best_loss": best["report"].loss,
        "_result": result,
        "_report": report,
        "_best_report": best["report"],
    }


def run_experiment(
    g: MultiRelationGraph,
    base_config: ModelConfig,
    variants,
    train_pcts,
    seeds,
    out_path=None,
    timing: bool = True,
) -> list[dict]:
    """Grid of (variant, train_pct, seed) runs with a CSV and median summary.

    Rows are sorted before writing so the file content is independent of
    execution order; the split depends only on (seed, train_pct), so all
    variants of one cell compare on identical splits.
    """
    rows = []
    for variant in variants:
        for pct in train_pcts:
            for seed in seeds:
                config = replace(base_config, variant=variant, seed=int(seed))
                row = run_single(g, config, pct, timing=timing)
                logger.info(
                    "run variant=%s pct=%s seed=%s accuracy=%.4f recall=%.4f",
                    variant, pct, seed, row["accuracy"], row["recall"],
                )
                rows.append(row)
    rows.sort(key=lambda r: (r["variant"], r["train_pct"], r["seed"]))
    if out_path is not None:
        out_path = Path(out_path)
        _write_csv(out_path, RESULT_COLUMNS, rows)
        _write_summary(
            out_path.with_name(out_path.stem + "_summary.csv"),
            rows,
            ("variant", "train_pct"),
        )
        # same schema, metrics taken at each run's best periodic evaluation
        best_rows = [
            dict(r, accuracy=r["best_accuracy"], recall=r["best_recall"], loss=r["best_loss"])
            for r in rows
        ]
        _write_csv(out_path.with_name(out_path.stem + "_best.csv"), RESULT_COLUMNS, best_rows)
    return rows


def run_sweep(
    g: MultiRelationGraph,
    base_config: ModelConfig,
    gcn_layer_counts,
    embed_dims,
    train_pct: float = 20,
    out_path=None,
    timing: bool = True,
) -> list[dict]:
    """Depth-by-width hyperparameter grid on one split; emits a CSV."""
    rows = []
    for n_layers in gcn_layer_counts:
        for dim in embed_dims:
            heads = base_config.gat_heads
            if dim % heads != 0:
                heads = 1
            config = replace(
                base_config, gcn_layers=int(n_layers), embed_dim=int(dim), gat_heads=heads
            )
            row = run_single(g, config, train_pct, timing=timing)
            rows.append(
                {
                    "gcn_layers": int(n_layers),
                    "embed_dim": int(dim),
                    "seed": config.seed,
                    "accuracy": row["accuracy"],
                    "recall": row["recall"],
                    "loss": row["loss"],
                    "wall_time_s": row["wall_time_s"],
                }
            )
    rows.sort(key=lambda r: (r["gcn_layers"], r["embed_dim"], r["seed"]))
    if out_path is not None:
        _write_csv(Path(out_path), SWEEP_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def finite_difference_gradients(loss_fn, named_params, step: float = GRADCHECK_STEP):
    """Central finite differences of a scalar function, entry by entry."""
    grads = {}
    for name, tensor in named_params.items():
        grad = np.zeros_like(tensor.values)
        flat = tensor.values.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = grad
    return grads


def _random_symmetric_adjacency(n: int, rng, avg_degree: float = 3.0) -> SparseAdjacency:
    n_edges = max(1, int(n * avg_degree / 2))
    src = rng.integers(0, n, size=4 * n_edges)
    dst = rng.integers(0, n, size=4 * n_edges)
    keep = src < dst
    src, dst = src[keep][:n_edges], dst[keep][:n_edges]
    pairs = np.unique(src * np.int64(n) + dst)
    if pairs.size == 0:
        pairs = np.array([1], dtype=np.int64)  # edge (0, 1)
    return SparseAdjacency.from_edges(n, pairs // n, pairs % n)


def gradcheck_graph(
    n: int = 12, n_relations: int = 2, feature_dim: int = 6, seed: int = 7
) -> MultiRelationGraph:
    """Small random labeled graph for gradient verification."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    relations = [_random_symmetric_adjacency(n, rng) for _ in range(n_relations)]
    features = rng.standard_normal((n, feature_dim))
    labels = rng.permutation(np.arange(n) % 2)
    return MultiRelationGraph(
        n=n,
        relation_names=[f"rel{i}" for i in range(n_relations)],
        relations=relations,
        features=features,
        labels=labels,
    )


@dataclass
class GradCheckReport:
    passed: bool
    worst_rel_err: float
    worst_param: str
    n_params: int
    per_param: dict[str, float]
    message: str = ""

    def format_lines(self) -> list[str]:
        lines = [
            f"parameters checked: {self.n_params}",
            f"worst relative error: {self.worst_rel_err:.3e} ({self.worst_param})",
        ]
        for name in sorted(self.per_param):
            lines.append(f"  {name}: {self.per_param[name]:.3e}")
        lines.append(
            f"gradcheck {'PASS' if self.passed else 'FAIL'}"
            + (f" ({self.message})" if self.message else "")
        )
        return lines


def gradcheck(config: ModelConfig | None = None, graph: MultiRelationGraph | None = None) -> GradCheckReport:
    """Analytic gradients of the full stack against central differences.

    Uses a compact configuration (two convolution layers per relation, one
    two-head attention layer, the consolidation stage, and the classifier)
    on a 12-node random graph unless told otherwise.
    """
    if config is None:
        config = ModelConfig(
            variant="full", gcn_layers=2, gat_heads=2, embed_dim=8, seed=7
        )
    if graph is None:
        graph = gradcheck_graph(seed=config.seed)
    view = GraphView.from_graph(graph)
    params = init_params(config, graph.feature_dim, graph.n_relations)
    named = params.named()
    if not named:
        return GradCheckReport(
            passed=False,
            worst_rel_err=float("inf"),
            worst_param="",
            n_params=0,
            per_param={},
            message="no trainable parameters to check",
        )
    labels = graph.labels

    def loss_value() -> float:
        _, probs = forward(view, params)
        value = layers.loss(probs, labels, named.values(), config.l2_penalty)
        return float(value.values[0, 0])

    with Tape() as tape:
        _, probs = forward(view, params)
        loss_t = layers.loss(probs, labels, named.values(), config.l2_penalty)
        grads = ad.backward(tape, loss_t)
    analytic = _collect_grads(tape, named, grads)
    numeric = finite_difference_gradients(loss_value, named)

    expected = sum(t.values.size for t in named.values())
    got = sum(a.size for a in analytic.values())
    if expected != got:
        return GradCheckReport(
            passed=False,
            worst_rel_err=float("inf"),
            worst_param="",
            n_params=expected,
            per_param={},
            message=f"gradient entry count mismatch: {got} of {expected}",
        )

    per_param = {}
    worst, worst_name = 0.0, ""
    for name in named:
        a, b = analytic[name].reshape(-1), numeric[name].reshape(-1)
        errs = np.array([relative_error(x, y) for x, y in zip(a, b)])
        err = float(errs.max()) if errs.size else 0.0
        per_param[name] = err
        if err > worst:
            worst, worst_name = err, name
    return GradCheckReport(
        passed=worst < GRADCHECK_TOLERANCE,
        worst_rel_err=worst,
        worst_param=worst_name,
        n_params=expected,
        per_param=per_param,
    )
