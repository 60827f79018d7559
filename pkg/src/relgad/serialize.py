"""Weight persistence and training checkpoints.

Weights live in one binary file: magic ``RAUW``, a u32 format version, then
one record per parameter (u32 name length, utf-8 name, u32 rows, u32 cols,
row-major float64 payload), all little-endian. A ``meta.json`` alongside
carries the hyperparameters and the run seed.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, ModelParams, init_params
from .sparse import GraphError

WEIGHTS_MAGIC = b"RAUW"
WEIGHTS_FORMAT_VERSION = 1
META_FORMAT = "relgad-checkpoint-v1"

WEIGHTS_FILE = "weights.bin"
META_FILE = "meta.json"
TRAJECTORY_FILE = "loss_trajectory.csv"


def save_weights(named: dict[str, Tensor], path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_FORMAT_VERSION))
        for name, tensor in named.items():
            raw = name.encode("utf-8")
            rows, cols = tensor.values.shape
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise GraphError(f"{path}: not a weights file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WEIGHTS_FORMAT_VERSION:
            raise GraphError(f"{path}: unsupported weights version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            payload = fh.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise GraphError(f"{path}: truncated record for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    return out


def save_checkpoint(
    ckpt_dir,
    params: ModelParams,
    config: ModelConfig,
    feature_dim: int,
    n_relations: int,
    losses=None,
) -> Path:
    """Write weights, meta.json, and the loss trajectory into a directory."""
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(params.named(), out / WEIGHTS_FILE)
    meta = {
        "format": META_FORMAT,
        "config": config.to_dict(),
        "feature_dim": int(feature_dim),
        "n_relations": int(n_relations),
        "seed": int(config.seed),
    }
    with open(out / META_FILE, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if losses is not None:
        with open(out / TRAJECTORY_FILE, "w") as fh:
            fh.write("step,loss\n")
            for step, value in enumerate(losses):
                fh.write(f"{step},{value!r}\n")
    return out


def load_checkpoint(ckpt_dir):
    """Rebuild (params, config, meta) from a checkpoint directory."""
    root = Path(ckpt_dir)
    with open(root / META_FILE) as fh:
        meta = json.load(fh)
    if meta.get("format") != META_FORMAT:
        raise GraphError(f"{root}: unknown checkpoint format {meta.get('format')!r}")
    config = ModelConfig(**meta["config"])
    params = init_params(config, meta["feature_dim"], meta["n_relations"])
    stored = load_weights(root / WEIGHTS_FILE)
    named = params.named()
    if set(stored) != set(named):
        raise GraphError(
            f"checkpoint parameters do not match the config: "
            f"missing {sorted(set(named) - set(stored))}, "
            f"unexpected {sorted(set(stored) - set(named))}"
        )
    for name, tensor in named.items():
        if stored[name].shape != tensor.values.shape:
            raise GraphError(f"shape mismatch for parameter {name!r}")
        tensor.values = stored[name]
    return params, config, meta
