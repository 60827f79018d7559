"""Dataset-directory ingest and a binary graph cache.

A dataset directory holds ``features.csv`` (node_id,f0..f{d-1}),
``labels.csv`` (node_id,label with an empty label meaning unlabeled), and
one ``incidence_<relation>.csv`` (node_id,entity_id) or
``edges_<relation>.csv`` (src,dst) per relation. Node ids are arbitrary
strings mapped to dense indices in features.csv order; the mapping is
written back as ``node_index.csv``.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .graphs import UNLABELED, MultiRelationGraph
from .sparse import (
    GraphError,
    IncidenceMatrix,
    SparseAdjacency,
    build_relation_graph,
)

GRAPH_MAGIC = b"RGRF"
GRAPH_FORMAT_VERSION = 1


class IngestError(GraphError):
    """A dataset directory fails validation."""


def _read_rows(path: Path, expected_header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path.name}: empty file") from None
        if expected_header is not None and header[: len(expected_header)] != expected_header:
            raise IngestError(
                f"{path.name}: header must start with {','.join(expected_header)}"
            )
        return header, list(reader)


def ingest_dir(dataset_dir, entity_degree_cap=None) -> MultiRelationGraph:
    """Validate a dataset directory and build the multi-relation graph."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")

    feat_path = root / "features.csv"
    if not feat_path.exists():
        raise IngestError("features.csv is missing")
    header, rows = _read_rows(feat_path, ["node_id"])
    d = len(header) - 1
    if d < 1:
        raise IngestError("features.csv: need at least one feature column")
    if header[1:] != [f"f{j}" for j in range(d)]:
        raise IngestError("features.csv: feature columns must be named f0..f{d-1}")
    index: dict[str, int] = {}
    features = np.zeros((len(rows), d), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != d + 1:
            raise IngestError(f"features.csv: row {i + 2} has {len(row)} fields, expected {d + 1}")
        nid = row[0]
        if nid in index:
            raise IngestError(f"features.csv: duplicate node id {nid!r}")
        index[nid] = i
        try:
            features[i] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise IngestError(f"features.csv: row {i + 2}: {exc}") from None
    n = len(index)
    if n == 0:
        raise IngestError("features.csv: no nodes")

    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise IngestError("labels.csv is missing")
    _, label_rows = _read_rows(labels_path, ["node_id", "label"])
    labels = np.full(n, UNLABELED, dtype=np.int64)
    for row in label_rows:
        if row[0] not in index:
            raise IngestError(f"labels.csv: unknown node id {row[0]!r}")
        value = row[1].strip() if len(row) > 1 else ""
        if value == "":
            continue
        if value not in ("0", "1"):
            raise IngestError(f"labels.csv: label for {row[0]!r} must be 0, 1 or empty")
        labels[index[row[0]]] = int(value)

    cap_kwargs = {} if entity_degree_cap is None else {"entity_degree_cap": entity_degree_cap}
    names, relations = [], []
    for path in sorted(root.glob("incidence_*.csv")):
        name = path.stem[len("incidence_"):]
        _, pair_rows = _read_rows(path, ["node_id", "entity_id"])
        entity_ids: dict[str, int] = {}
        users, ents = [], []
        for row in pair_rows:
            if row[0] not in index:
                raise IngestError(f"{path.name}: unknown node id {row[0]!r}")
            users.append(index[row[0]])
            ents.append(entity_ids.setdefault(row[1], len(entity_ids)))
        inc = IncidenceMatrix.from_pairs(
            n, max(len(entity_ids), 1), zip(users, ents)
        )
        names.append(name)
        relations.append(build_relation_graph(inc, **cap_kwargs))
    for path in sorted(root.glob("edges_*.csv")):
        name = path.stem[len("edges_"):]
        if name in names:
            raise IngestError(f"relation {name!r} has both incidence and edge files")
        _, edge_rows = _read_rows(path, ["src", "dst"])
        src, dst = [], []
        for row in edge_rows:
            if row[0] not in index or row[1] not in index:
                raise IngestError(f"{path.name}: unknown node id in edge {row!r}")
            if row[0] == row[1]:
                raise IngestError(f"{path.name}: self-edge on {row[0]!r}")
            src.append(index[row[0]])
            dst.append(index[row[1]])
        relations.append(SparseAdjacency.from_edges(n, src, dst))
        names.append(name)
    if not relations:
        raise IngestError("no incidence_*.csv or edges_*.csv relation files found")

    order = sorted(range(len(names)), key=lambda k: names[k])
    graph = MultiRelationGraph(
        n=n,
        relation_names=[names[k] for k in order],
        relations=[relations[k] for k in order],
        features=features,
        labels=labels,
    )
    write_node_index(root / "node_index.csv", index)
    return graph


def write_node_index(path, index: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "index"])
        for nid, i in sorted(index.items(), key=lambda kv: kv[1]):
            w.writerow([nid, i])


def _write_array(fh, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fh, count: int, dtype: str) -> np.ndarray:
    nbytes = count * np.dtype(dtype).itemsize
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise IngestError("graph cache is truncated")
    return np.frombuffer(buf, dtype=dtype).copy()


def save_graph(g: MultiRelationGraph, path) -> None:
    """Write the graph to a little-endian binary cache file."""
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<I", GRAPH_FORMAT_VERSION))
        fh.write(struct.pack("<QQQ", g.n, g.feature_dim, g.n_relations))
        _write_array(fh, g.features, "<f8")
        _write_array(fh, g.labels, "<i8")
        for name, rel in zip(g.relation_names, g.relations):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BQ", int(rel.has_loops), rel.nnz))
            _write_array(fh, rel.indptr, "<i8")
            _write_array(fh, rel.cols, "<i8")
            _write_array(fh, rel.vals, "<f8")


def load_graph(path) -> MultiRelationGraph:
    with open(path, "rb") as fh:
        if fh.read(4) != GRAPH_MAGIC:
            raise IngestError(f"{path}: not a graph cache file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != GRAPH_FORMAT_VERSION:
            raise IngestError(f"{path}: unsupported cache version {version}")
        n, d, r = struct.unpack("<QQQ", fh.read(24))
        features = _read_array(fh, n * d, "<f8").reshape(n, d)
        labels = _read_array(fh, n, "<i8")
        names, relations = [], []
        for _ in range(r):
            (name_len,) = struct.unpack("<I", fh.read(4))
            names.append(fh.read(name_len).decode("utf-8"))
            has_loops, nnz = struct.unpack("<BQ", fh.read(9))
            indptr = _read_array(fh, n + 1, "<i8")
            cols = _read_array(fh, nnz, "<i8")
            vals = _read_array(fh, nnz, "<f8")
            relations.append(
                SparseAdjacency(n, indptr, cols, vals, has_loops=bool(has_loops))
            )
    return MultiRelationGraph(
        n=n, relation_names=names, relations=relations, features=features, labels=labels
    )


def load_graph_any(path) -> MultiRelationGraph:
    """Load from a dataset directory or a binary cache file."""
    p = Path(path)
    if p.is_dir():
        return ingest_dir(p)
    return load_graph(p)
