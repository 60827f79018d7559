"""Command-line surface.

Subcommands: ingest, synth, train, eval, experiment, sweep, gradcheck.
Every flag can also come from a flat ``key = value`` config file passed
with --config; explicit command-line flags win over file values. Exit
codes: 0 success, 1 validation error, 2 failed gradient check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataio import IngestError, ingest_dir, load_graph_any, save_graph
from .experiment import gradcheck, run_experiment, run_sweep, stratified_split
from .metrics import evaluate
from .model import ModelConfig, train
from .serialize import load_checkpoint, save_checkpoint
from .sparse import GraphError
from .synth import SynthConfig, write_dataset

logger = logging.getLogger(__name__)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file: ints, floats, booleans, comma lists, strings."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GraphError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def _parse_value(value: str):
    if value.startswith('"') and value.endswith('"') and len(value) >= 2:
        return value[1:-1]
    if "," in value:
        return [_parse_value(v.strip()) for v in value.split(",")]
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags (explicit flags are non-None)."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_values = parse_config_file(args.config)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise GraphError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


_MODEL_DEFAULTS = {
    "variant": "full",
    "gcn_layers": 2,
    "gat_heads": 4,
    "embed_dim": 64,
    "lr": 0.005,
    "l2": 0.001,
    "batch_size": 256,
    "epochs": 100,
    "seed": 0,
    "hop_count": None,
}


def _model_config(merged: dict, variant=None, seed=None) -> ModelConfig:
    return ModelConfig(
        variant=variant if variant is not None else merged["variant"],
        gcn_layers=int(merged["gcn_layers"]),
        gat_heads=int(merged["gat_heads"]),
        embed_dim=int(merged["embed_dim"]),
        lr=float(merged["lr"]),
        l2_penalty=float(merged["l2"]),
        batch_size=int(merged["batch_size"]),
        epochs=int(merged["epochs"]),
        seed=int(seed if seed is not None else merged["seed"]),
        hop_count=merged["hop_count"],
    )


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--variant", choices=("full", "pr", "pa"))
    sub.add_argument("--gcn-layers", type=int, dest="gcn_layers")
    sub.add_argument("--gat-heads", type=int, dest="gat_heads")
    sub.add_argument("--embed-dim", type=int, dest="embed_dim")
    sub.add_argument("--lr", type=float)
    sub.add_argument("--l2", type=float)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--hop-count", type=int, dest="hop_count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relgad",
        description="Anomalous-user detection on multi-relation interaction graphs",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset directory and cache it")
    p.add_argument("dataset_dir")
    p.add_argument("--out", required=True, help="output cache file (binary)")
    p.add_argument("--config")

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--n-users", type=int, dest="n_users")
    p.add_argument("--anomaly-frac", type=float, dest="anomaly_frac")
    p.add_argument("--camouflage-rate", type=float, dest="camouflage_rate")
    p.add_argument("--n-relations", type=int, dest="n_relations")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--feature-shift", type=float, dest="feature_shift")
    p.add_argument("--entities-per-relation", type=int, dest="entities_per_relation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config")

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--graph", required=True, help="dataset directory or cache file")
    p.add_argument("--train-pct", type=float, dest="train_pct")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config")
    _add_model_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--graph", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train-pct", type=float, dest="train_pct",
                   help="evaluate on the held-out side of this split")
    p.add_argument("--config")

    p = sub.add_parser("experiment", help="grid of (variant, train_pct, seed) runs")
    p.add_argument("--graph", required=True)
    p.add_argument("--train-pcts", dest="train_pcts")
    p.add_argument("--seeds", help="seed count N (0..N-1) or a comma list")
    p.add_argument("--variants")
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--no-timing", action="store_true",
                   help="write wall_time_s as 0 for bitwise-reproducible output")
    p.add_argument("--config")
    _add_model_flags(p)

    p = sub.add_parser("sweep", help="depth-by-width hyperparameter grid")
    p.add_argument("--graph", required=True)
    p.add_argument("--gcn-layer-grid", dest="gcn_layer_grid")
    p.add_argument("--embed-dim-grid", dest="embed_dim_grid")
    p.add_argument("--train-pct", type=float, dest="train_pct")
    p.add_argument("--out", required=True)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--config")
    _add_model_flags(p)

    p = sub.add_parser("gradcheck", help="verify analytic gradients of the full stack")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    return parser


def _cmd_ingest(args) -> int:
    graph = ingest_dir(args.dataset_dir)
    save_graph(graph, args.out)
    print(
        f"ingested {graph.n} nodes, {graph.feature_dim} features, "
        f"{graph.n_relations} relations -> {args.out}"
    )
    return 0


def _cmd_synth(args) -> int:
    defaults = {
        "n_users": 2000,
        "anomaly_frac": 0.2,
        "camouflage_rate": 0.5,
        "n_relations": 3,
        "feature_dim": 16,
        "feature_shift": 0.5,
        "entities_per_relation": None,
        "seed": 0,
    }
    merged = _merge(args, defaults)
    cfg = SynthConfig(
        n_users=int(merged["n_users"]),
        anomaly_fraction=float(merged["anomaly_frac"]),
        camouflage_rate=float(merged["camouflage_rate"]),
        n_relations=int(merged["n_relations"]),
        feature_dim=int(merged["feature_dim"]),
        feature_shift=float(merged["feature_shift"]),
        entities_per_relation=merged["entities_per_relation"],
        seed=int(merged["seed"]),
    )
    out = write_dataset(cfg, args.out)
    print(f"wrote synthetic dataset to {out}")
    return 0


def _cmd_train(args) -> int:
    defaults = dict(_MODEL_DEFAULTS, train_pct=100.0)
    merged = _merge(args, defaults)
    config = _model_config(merged)
    graph = load_graph_any(args.graph)
    pct = float(merged["train_pct"])
    if pct >= 100.0:
        train_nodes = graph.labeled_nodes()
    else:
        train_nodes, _ = stratified_split(
            graph.labels, pct, np.random.SeedSequence([config.seed, int(pct)])
        )
    result = train(graph, config, train_nodes=train_nodes)
    save_checkpoint(
        args.out, result.params, config, graph.feature_dim, graph.n_relations,
        losses=result.losses,
    )
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {config.variant} for {config.epochs} epochs, final loss {final:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    graph = load_graph_any(args.graph)
    params, config, _ = load_checkpoint(args.ckpt)
    if args.train_pct is not None:
        _, split = stratified_split(
            graph.labels, float(args.train_pct),
            np.random.SeedSequence([config.seed, int(args.train_pct)]),
        )
    else:
        split = graph.labeled_nodes()
    report = evaluate(params, graph, split)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_experiment(args) -> int:
    defaults = dict(
        _MODEL_DEFAULTS,
        train_pcts="10,20,30,40",
        seeds="5",
        variants="full,pr,pa",
    )
    merged = _merge(args, defaults)
    graph = load_graph_any(args.graph)
    seeds_spec = str(merged["seeds"])
    seed_list = _int_list(seeds_spec) if "," in seeds_spec else list(range(int(seeds_spec)))
    rows = run_experiment(
        graph,
        _model_config(merged),
        variants=_str_list(str(merged["variants"])),
        train_pcts=_int_list(str(merged["train_pcts"])),
        seeds=seed_list,
        out_path=args.out,
        timing=not args.no_timing,
    )
    print(f"wrote {len(rows)} result rows to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    defaults = dict(
        _MODEL_DEFAULTS,
        gcn_layer_grid="1,2,3",
        embed_dim_grid="16,32,64,128",
        train_pct=20.0,
    )
    merged = _merge(args, defaults)
    graph = load_graph_any(args.graph)
    rows = run_sweep(
        graph,
        _model_config(merged),
        gcn_layer_counts=_int_list(str(merged["gcn_layer_grid"])),
        embed_dims=_int_list(str(merged["embed_dim_grid"])),
        train_pct=float(merged["train_pct"]),
        out_path=args.out,
        timing=not args.no_timing,
    )
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    merged = _merge(args, {"seed": 7})
    config = ModelConfig(variant="full", gcn_layers=2, gat_heads=2, embed_dim=8,
                         seed=int(merged["seed"]))
    report = gradcheck(config)
    for line in report.format_lines():
        print(line)
    return 0 if report.passed else 2


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "experiment": _cmd_experiment,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except (GraphError, IngestError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
