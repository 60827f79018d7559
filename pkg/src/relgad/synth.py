"""Deterministic synthetic multi-relation graphs with planted anomalies.

Anomalous users co-attach to shared "campaign" entities, which the
incidence projection turns into dense intra-class blocks, and additionally
touch popular benign entities at a configurable camouflage rate to dilute
their structural footprint. Benign users pick entities by a heavy-tailed
popularity draw so hub entities exist.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import MultiRelationGraph
from .sparse import GraphError, IncidenceMatrix, build_relation_graph

# internal shape of the benchmark, not part of the public configuration
_CAMPAIGN_SIZE = 8         # target anomalous users per campaign entity
_CAMPAIGNS_PER_USER = 3    # entity draws per anomalous user per relation
_BENIGN_ATTACH = 2         # entity draws per benign user per relation
_ENTITY_CAPACITY = 16      # soft per-entity degree bound during generation
_ZIPF_EXPONENT = 1.1
# per-relation scaling of the camouflage rate: relations differ in how
# reliable their structural signal is, like real interaction types do
_RELATION_CAMOUFLAGE_WEIGHT = (0.5, 1.0, 1.5)


@dataclass
class SynthConfig:
    n_users: int = 2000
    anomaly_fraction: float = 0.2
    n_relations: int = 3
    feature_dim: int = 16
    feature_shift: float = 0.5
    camouflage_rate: float = 0.5
    entities_per_relation: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.anomaly_fraction < 1.0:
            raise GraphError("anomaly_fraction must lie in (0, 1)")
        if not 0.0 <= self.camouflage_rate <= 1.0:
            raise GraphError("camouflage_rate must lie in [0, 1]")
        if self.n_relations < 1 or self.feature_dim < 1 or self.n_users < 4:
            raise GraphError("infeasible synthetic configuration")


def _zipf_weights(k: int) -> np.ndarray:
    w = np.arange(1, k + 1, dtype=np.float64) ** -_ZIPF_EXPONENT
    return w / w.sum()


def _capped_draws(rng, weights: np.ndarray, n_draws: int, capacity: int) -> np.ndarray:
    """Popularity-weighted entity draws with a per-entity capacity bound.

    Overflow beyond ``capacity`` is redistributed to the remaining entities
    in further weighted rounds; deterministic given the generator state.
    """
    k = weights.size
    counts = np.zeros(k, dtype=np.int64)
    chosen = []
    remaining = n_draws
    active = weights.copy()
    while remaining > 0:
        if not np.any(active > 0):
            raise GraphError("entity pool too small for the requested draws")
        cdf = np.cumsum(active / active.sum())
        picks = np.searchsorted(cdf, rng.random(remaining), side="right")
        picks = np.minimum(picks, k - 1)
        new_counts = np.bincount(picks, minlength=k)
        room = capacity - counts
        admitted = np.minimum(new_counts, np.maximum(room, 0))
        counts += admitted
        chosen.append(np.repeat(np.arange(k), admitted))
        remaining = n_draws - int(counts.sum())
        active = np.where(counts >= capacity, 0.0, weights)
    return np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)


def _relation_incidence(
    cfg: SynthConfig, rel_index: int, anomalous_mask: np.ndarray, rng
) -> IncidenceMatrix:
    n = cfg.n_users
    anomalous = np.flatnonzero(anomalous_mask)
    benign = np.flatnonzero(~anomalous_mask)
    n_campaign = max(1, math.ceil(anomalous.size / _CAMPAIGN_SIZE))
    if cfg.entities_per_relation is None:
        n_benign_ent = max(16, n // 4)
    else:
        n_benign_ent = cfg.entities_per_relation - n_campaign
        if n_benign_ent < 1:
            raise GraphError("entities_per_relation leaves no benign entities")
    n_entities = n_campaign + n_benign_ent
    weight = _RELATION_CAMOUFLAGE_WEIGHT[rel_index % len(_RELATION_CAMOUFLAGE_WEIGHT)]
    camo_rate = min(1.0, cfg.camouflage_rate * weight)
    if cfg.camouflage_rate == 0.0:
        camo_rate = 0.0

    pairs_u, pairs_e = [], []

    # benign users: popularity-weighted entity draws over the benign pool
    pop_weights = _zipf_weights(n_benign_ent)
    draws = _capped_draws(rng, pop_weights, benign.size * _BENIGN_ATTACH, _ENTITY_CAPACITY)
    draws = rng.permutation(draws)
    pairs_u.append(np.repeat(benign, _BENIGN_ATTACH))
    pairs_e.append(n_campaign + draws)

    # anomalous users: a home campaign plus extra campaign memberships,
    # then camouflage attachments to the popular benign entities
    home = rng.permutation(np.arange(anomalous.size) % n_campaign)
    n_camo = int(round(_CAMPAIGNS_PER_USER * camo_rate))
    n_camp_links = max(1, _CAMPAIGNS_PER_USER - n_camo)
    for k, user in enumerate(anomalous):
        camp = {int(home[k])}
        while len(camp) < min(n_camp_links, n_campaign):
            camp.add(int(rng.integers(n_campaign)))
        pairs_u.append(np.full(len(camp), user))
        pairs_e.append(np.fromiter(camp, dtype=np.int64))
    if n_camo > 0 and anomalous.size:
        camo = _capped_draws(
            rng, pop_weights, anomalous.size * n_camo, _ENTITY_CAPACITY
        )
        camo = rng.permutation(camo)
        pairs_u.append(np.repeat(anomalous, n_camo))
        pairs_e.append(n_campaign + camo)

    users = np.concatenate(pairs_u)
    ents = np.concatenate(pairs_e)
    # binary occurrence: collapse repeated (user, entity) pairs
    key = users * np.int64(n_entities) + ents
    uniq = np.unique(key)
    return IncidenceMatrix(
        n, n_entities, (uniq // n_entities).astype(np.int64), (uniq % n_entities).astype(np.int64)
    )


def _build(cfg: SynthConfig):
    root = np.random.SeedSequence(cfg.seed)
    ss_labels, ss_feats, *ss_rels = root.spawn(2 + cfg.n_relations)
    n_anom = int(cfg.n_users * cfg.anomaly_fraction)
    if n_anom < 1 or n_anom >= cfg.n_users:
        raise GraphError("anomaly_fraction leaves an empty class")

    rng_labels = np.random.Generator(np.random.PCG64(ss_labels))
    anomalous_mask = np.zeros(cfg.n_users, dtype=bool)
    anomalous_mask[rng_labels.choice(cfg.n_users, size=n_anom, replace=False)] = True
    labels = anomalous_mask.astype(np.int64)

    rng_feats = np.random.Generator(np.random.PCG64(ss_feats))
    features = rng_feats.standard_normal((cfg.n_users, cfg.feature_dim))
    features[anomalous_mask] += cfg.feature_shift

    incidences = []
    for ri, ss in enumerate(ss_rels):
        rng = np.random.Generator(np.random.PCG64(ss))
        incidences.append((f"rel{ri}", _relation_incidence(cfg, ri, anomalous_mask, rng)))
    return features, labels, incidences


def generate(cfg: SynthConfig) -> MultiRelationGraph:
    """Materialize the benchmark graph; identical seeds give identical bytes."""
    features, labels, incidences = _build(cfg)
    names = [name for name, _ in incidences]
    relations = [build_relation_graph(inc) for _, inc in incidences]
    return MultiRelationGraph(
        n=cfg.n_users,
        relation_names=names,
        relations=relations,
        features=features,
        labels=labels,
    )


def write_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Emit the benchmark in the ingestable directory layout.

    Writes features.csv, labels.csv, one incidence_<relation>.csv per
    relation, and node_index.csv with the id mapping.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features, labels, incidences = _build(cfg)
    node_ids = [f"u{i:05d}" for i in range(cfg.n_users)]

    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id"] + [f"f{j}" for j in range(cfg.feature_dim)])
        for i, nid in enumerate(node_ids):
            w.writerow([nid] + [repr(float(v)) for v in features[i]])
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "label"])
        for i, nid in enumerate(node_ids):
            w.writerow([nid, int(labels[i])])
    for name, inc in incidences:
        with open(out / f"incidence_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "entity_id"])
            for u, e in zip(inc.user_idx, inc.entity_idx):
                w.writerow([node_ids[u], f"{name}_e{e:05d}"])
    with open(out / "node_index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "index"])
        for i, nid in enumerate(node_ids):
            w.writerow([nid, i])
    return out
