"""Disease-centric two-layer subgraph extraction."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from qkg import kernels
from qkg.kg.store import GraphStore


@dataclass(frozen=True)
class Subgraph:
    target: int
    direct_ids: np.ndarray = field(repr=False)
    intermediate_entities: frozenset[int]
    indirect_ids: np.ndarray = field(repr=False)
    merged: GraphStore = field(repr=False)
    source: GraphStore = field(repr=False)

    @property
    def direct_triplets(self) -> set:
        return {self.source.triplet(int(t)) for t in self.direct_ids}

    @property
    def indirect_triplets(self) -> set:
        return {self.source.triplet(int(t)) for t in self.indirect_ids}

    def stats(self) -> dict:
        m = self.merged
        ent_types = Counter(e.entity_type.value for e in m.entities.values())
        rel_counts = Counter(m.relation_vocab[c] for c in m.relation_codes.tolist())
        n_ent = len(m.entities)
        return {
            "target": self.target,
            "target_source_id": self.source.entity(self.target).source_id,
            "direct_triplets": int(len(self.direct_ids)),
            "intermediate_entities": len(self.intermediate_entities),
            "indirect_triplets": int(len(self.indirect_ids)),
            "indirect_new_triplets": int(len(np.setdiff1d(self.indirect_ids, self.direct_ids))),
            "merged_triplets": len(m),
            "entities_with_target": n_ent,
            "entities_without_target": n_ent - (1 if self.target in m.entities else 0),
            "entity_types": dict(sorted(ent_types.items())),
            "relation_types": dict(sorted(rel_counts.items())),
        }


def extract_direct_layer(store: GraphStore, target: int) -> tuple[np.ndarray, frozenset[int]]:
    """Triplet ids incident to ``target`` and the other endpoints (E1)."""
    ids = store.incident_triplet_ids(target)
    ends = np.concatenate([store.heads[ids], store.tails[ids]])
    e1 = frozenset(int(e) for e in np.unique(ends) if e != target)
    return ids, e1


def extract_indirect_layer(store: GraphStore, intermediates) -> np.ndarray:
    """Ids of all triplets with at least one endpoint in ``intermediates``."""
    member = store.member_mask(intermediates)
    if not member.any():
        return np.zeros(0, dtype=np.int64)
    heads_pos, tails_pos, _ = store.triplet_arrays()
    return np.flatnonzero(kernels.endpoint_mask(heads_pos, tails_pos, member)).astype(np.int64)


def build_subgraph(store: GraphStore, target: int) -> Subgraph:
    direct, e1 = extract_direct_layer(store, target)
    indirect = extract_indirect_layer(store, e1)
    merged_ids = np.union1d(direct, indirect).astype(np.int64)
    merged = store.subset(merged_ids, extra_entities=(target,))
    return Subgraph(target, direct, e1, indirect, merged, store)


def find_entity(store: GraphStore, source_id: str) -> int:
    """Entity index for a source id like ``MONDO:5015`` or bare ``5015``."""
    vocab, _, ident = source_id.rpartition(":")
    hits = [e.index for e in store.entities.values()
            if e.source_id == source_id
            or (vocab and e.source_id == ident and e.source_vocab.upper() == vocab.upper())]
    if not hits:
        raise KeyError(f"no entity with source id {source_id!r}")
    if len(hits) > 1:
        raise KeyError(f"source id {source_id!r} is ambiguous: indices {sorted(hits)}")
    return hits[0]
