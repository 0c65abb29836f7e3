"""Four-stage construction of a KG-grounded QA evaluation set.

Stage 1 extracts entity mentions and grounds them to concept ids through a
pluggable nearest-neighbour index; stage 2 aligns concepts to graph nodes
(direct id match, then ancestor walk); stage 3 counts single-edge paths
between aligned nodes and keeps the top-K samples; stage 4 attaches a
structured patient context.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from qkg import kernels
from qkg.context import extract_patient_context
from qkg.kg.store import GraphStore, TripletRecord
from qkg.llm.gateway import Gateway, GatewayError
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import ResponseParseError, extract_json_object
from qkg.pipeline import QASample

logger = logging.getLogger(__name__)


class HierarchyCycleError(ValueError):
    pass


class ConceptIndex(Protocol):
    def lookup(self, text: str, k: int = 1) -> list[tuple[str, float]]:
        """Best ``k`` (concept id, score) candidates, best first."""


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero vector cannot be cosine-normalised")
    return m / norms


class CosineConceptIndex:
    """Exact cosine search over a dense matrix of concept vectors."""

    def __init__(self, concept_ids: Sequence[str], vectors, embed: Callable[[str], Sequence[float]] | None = None):
        mat = np.asarray(vectors, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != len(concept_ids):
            raise ValueError("need one vector row per concept id")
        self.concept_ids = list(concept_ids)
        self._unit = _unit_rows(mat)
        self.embed = embed

    def lookup_vector(self, vector, k: int = 1) -> list[tuple[str, float]]:
        q = np.asarray(vector, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0:
            return []
        scores = self._unit @ (q / norm)
        k = min(k, len(scores))
        # stable: higher score first, then lower row
        order = np.lexsort((np.arange(len(scores)), -scores))[:k]
        return [(self.concept_ids[i], float(scores[i])) for i in order]

    def lookup(self, text: str, k: int = 1) -> list[tuple[str, float]]:
        if self.embed is None:
            raise ValueError("index has no text embedder")
        try:
            vec = self.embed(text)
        except KeyError:
            return []
        return self.lookup_vector(vec, k)


def load_vectors(path) -> tuple[list[str], np.ndarray]:
    """Read ``{"id": ..., "vector": [...]}`` JSONL (``text`` is accepted for ``id``)."""
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            key = obj.get("id", obj.get("text"))
            if key is None or "vector" not in obj:
                raise ValueError(f"{path}: line {lineno}: need 'id' (or 'text') and 'vector'")
            ids.append(str(key))
            rows.append([float(x) for x in obj["vector"]])
    if rows and len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: vectors differ in dimension")
    return ids, np.asarray(rows, dtype=np.float64)


class TableEmbedder:
    """Text -> vector from a precomputed table, case-insensitive."""

    def __init__(self, texts: Sequence[str], vectors: np.ndarray):
        self._table = {t.strip().lower(): v for t, v in zip(texts, vectors)}

    def __call__(self, text: str):
        return self._table[text.strip().lower()]


@dataclass(frozen=True)
class GroundedEntity:
    surface: str
    concept_id: str | None
    score: float = 0.0
    kg_index: int | None = None
    method: str | None = None  # direct | hierarchy
    matched_concept: str | None = None

    def __post_init__(self):
        if self.kg_index is not None and self.method not in ("direct", "hierarchy"):
            raise ValueError("aligned entities need an alignment method")

    @property
    def resolved(self) -> bool:
        return self.concept_id is not None

    @property
    def aligned(self) -> bool:
        return self.kg_index is not None

    def to_dict(self) -> dict:
        return {"surface": self.surface, "concept_id": self.concept_id, "score": self.score,
                "kg_index": self.kg_index, "method": self.method,
                "matched_concept": self.matched_concept}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundedEntity":
        return cls(d["surface"], d.get("concept_id"), float(d.get("score", 0.0)),
                   d.get("kg_index"), d.get("method"), d.get("matched_concept"))


def ground_entities(texts: Iterable[str], index: ConceptIndex | None,
                    min_score: float | None = None) -> list[GroundedEntity]:
    """Best concept per text; unresolved texts come back with ``concept_id=None``."""
    if index is None:
        raise ValueError("no concept index available")
    out = []
    for text in texts:
        hits = index.lookup(text, 1)
        if not hits or (min_score is not None and hits[0][1] < min_score):
            out.append(GroundedEntity(text, None, hits[0][1] if hits else 0.0))
        else:
            out.append(GroundedEntity(text, hits[0][0], hits[0][1]))
    return out


def _check_acyclic(concept: str, hierarchy: Mapping[str, Sequence[str]]) -> None:
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    stack = [(concept, iter(hierarchy.get(concept, ())))]
    state[concept] = 1
    while stack:
        node, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            state[node] = 2
            stack.pop()
            continue
        s = state.get(nxt)
        if s == 1:
            raise HierarchyCycleError(f"hierarchy cycle reachable from concept {concept!r} (at {nxt!r})")
        if s is None:
            state[nxt] = 1
            stack.append((nxt, iter(hierarchy.get(nxt, ()))))


def _source_id_map(store: GraphStore) -> dict[str, int]:
    out: dict[str, int] = {}
    for idx in sorted(store.entities):
        e = store.entities[idx]
        out.setdefault(e.source_id, idx)
        if e.source_vocab:
            out.setdefault(f"{e.source_vocab}:{e.source_id}", idx)
    return out


def align_to_kg(grounded: Sequence[GroundedEntity], store: GraphStore,
                hierarchy: Mapping[str, Sequence[str]] | None = None,
                xref: Mapping[str, int] | None = None) -> list[GroundedEntity]:
    """Attach a graph node to each grounded concept.

    Direct match on entity source id (or the ``xref`` concept -> index map)
    first; otherwise ancestors are walked breadth-first via ``hierarchy``
    (child -> parents) until one matches.
    """
    hierarchy = hierarchy or {}
    ids = _source_id_map(store)
    xref = xref or {}

    def direct(concept):
        if concept in xref and xref[concept] in store:
            return xref[concept]
        return ids.get(concept)

    out = []
    for g in grounded:
        if not g.resolved:
            out.append(g)
            continue
        hit = direct(g.concept_id)
        if hit is not None:
            out.append(replace(g, kg_index=hit, method="direct", matched_concept=g.concept_id))
            continue
        _check_acyclic(g.concept_id, hierarchy)
        seen = {g.concept_id}
        queue = deque(hierarchy.get(g.concept_id, ()))
        found = None
        while queue:
            anc = queue.popleft()
            if anc in seen:
                continue
            seen.add(anc)
            hit = direct(anc)
            if hit is not None:
                found = (anc, hit)
                break
            queue.extend(hierarchy.get(anc, ()))
        if found:
            out.append(replace(g, kg_index=found[1], method="hierarchy", matched_concept=found[0]))
        else:
            out.append(g)
    return out


def load_hierarchy(path) -> dict[str, list[str]]:
    """Edge list file: ``child<TAB>parent`` (or comma separated) per line."""
    parents: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in (line.split("\t") if "\t" in line else line.split(","))]
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected child and parent")
            if parts == ["child", "parent"]:
                continue
            parents.setdefault(parts[0], []).append(parts[1])
    return parents


def enumerate_onehop_paths(aligned: Iterable[int], graph: GraphStore) -> tuple[int, list[TripletRecord]]:
    """Edges joining two distinct aligned nodes, each counted once."""
    nodes = {int(i) for i in aligned if int(i) in graph}
    if len(nodes) < 2:
        return 0, []
    member = graph.member_mask(nodes)
    heads_pos, tails_pos, _ = graph.triplet_arrays()
    ids = np.flatnonzero(kernels.both_endpoints_mask(heads_pos, tails_pos, member))
    return len(ids), [graph.triplet(int(t)) for t in ids]


@dataclass(frozen=True)
class CandidateSample:
    sample: QASample
    entities: tuple[str, ...] = ()
    grounded: tuple[GroundedEntity, ...] = ()
    path_count: int = 0

    def __post_init__(self):
        if self.path_count < 0:
            raise ValueError("path count must be >= 0")

    @property
    def id(self) -> str:
        return self.sample.id

    def to_dict(self) -> dict:
        return {"sample": self.sample.to_dict(), "entities": list(self.entities),
                "grounded": [g.to_dict() for g in self.grounded], "path_count": self.path_count}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CandidateSample":
        if "sample" not in d:
            return cls(QASample.from_dict(d), tuple(d.get("entities") or ()))
        return cls(QASample.from_dict(d["sample"]), tuple(d.get("entities") or ()),
                   tuple(GroundedEntity.from_dict(g) for g in d.get("grounded") or ()),
                   int(d.get("path_count", 0)))


def rank_and_filter(candidates: Iterable[CandidateSample], k: int) -> list[CandidateSample]:
    """Drop zero-path candidates, sort by path count (desc) then id, keep the first ``k``."""
    if k < 1:
        raise ValueError("K must be >= 1")
    kept = [c for c in candidates if c.path_count > 0]
    kept.sort(key=lambda c: (-c.path_count, c.id))
    return kept[:k]


# ---- stage drivers ----

def extract_mentions(sample: QASample, gateway: Gateway | None, role: str | None) -> tuple[str, ...]:
    if gateway is None or not gateway.has_role(role):
        raise ValueError(f"{sample.id}: no entity list and no extraction role configured")
    prompt = render_prompt("entity_extraction_v1", question=sample.question,
                           choices="\n".join(f"({k}) {v}" for k, v in sorted(sample.choices.items())))
    obj = extract_json_object(gateway.complete(role, [{"role": "user", "content": prompt}]))
    ents = obj.get("entities")
    if not isinstance(ents, list):
        raise ResponseParseError("expected an 'entities' list")
    return tuple(dict.fromkeys(str(e).strip() for e in ents if str(e).strip()))


def stage1(cands: Sequence[CandidateSample], index: ConceptIndex, gateway=None, role=None,
           min_score=None, workers: int = 4) -> list[CandidateSample]:
    def one(c: CandidateSample) -> CandidateSample:
        ents = c.entities
        if not ents:
            try:
                ents = extract_mentions(c.sample, gateway, role)
            except (GatewayError, ResponseParseError) as exc:
                logger.warning("%s: entity extraction failed: %s", c.id, exc)
                ents = ()
        return replace(c, entities=ents, grounded=tuple(ground_entities(ents, index, min_score)))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, cands))


def stage2(cands, store, hierarchy=None, xref=None) -> list[CandidateSample]:
    return [replace(c, grounded=tuple(align_to_kg(c.grounded, store, hierarchy, xref))) for c in cands]


def stage3(cands, graph: GraphStore, k: int) -> list[CandidateSample]:
    counted = []
    for c in cands:
        n, _ = enumerate_onehop_paths([g.kg_index for g in c.grounded if g.aligned], graph)
        counted.append(replace(c, path_count=n))
    return rank_and_filter(counted, k)


def stage4(cands, gateway=None, role=None, workers: int = 4) -> list[QASample]:
    def one(c: CandidateSample) -> QASample:
        ctx = c.sample.precomputed_context or extract_patient_context(c.sample.question, gateway, role)
        grounding = {"matched_entities": sorted({g.kg_index for g in c.grounded if g.aligned}),
                     "path_count": c.path_count}
        return replace(c.sample, precomputed_context=ctx, kg_grounding=grounding)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, cands))


def source_histogram(samples: Iterable[QASample]) -> dict[str, int]:
    return dict(sorted(Counter(s.source or "unknown" for s in samples).items()))


def read_candidates(path) -> list[CandidateSample]:
    with open(path, encoding="utf-8") as fh:
        return [CandidateSample.from_dict(json.loads(l)) for l in fh if l.strip()]


def write_candidates(cands: Iterable[CandidateSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cands:
            fh.write(json.dumps(c.to_dict(), ensure_ascii=False) + "\n")
