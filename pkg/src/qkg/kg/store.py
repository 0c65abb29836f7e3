"""Immutable in-memory triplet store with CSR adjacency and a name index."""

from __future__ import annotations

import bisect
import csv
import json
import logging
import re
from collections import defaultdict
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from qkg import kernels

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1


class GraphFormatError(ValueError):
    """Raised for malformed graph input; message names the row or index."""


class UnknownEntityError(KeyError):
    pass


class EntityType(str, Enum):
    GENE_PROTEIN = "gene/protein"
    DRUG = "drug"
    DISEASE = "disease"
    BIOLOGICAL_PROCESS = "biological process"
    PHENOTYPE = "phenotype"
    PATHWAY = "pathway"
    EXPOSURE = "exposure"
    MOLECULAR_FUNCTION = "molecular function"
    CELLULAR_COMPONENT = "cellular component"
    ANATOMY = "anatomy"

    @classmethod
    def parse(cls, value: str) -> "EntityType":
        key = value.strip().lower().replace("_", " ")
        key = _TYPE_ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown entity type {value!r}") from None


# PrimeKG export spellings
_TYPE_ALIASES = {
    "effect/phenotype": "phenotype",
    "gene": "gene/protein",
    "protein": "gene/protein",
}


@dataclass(frozen=True)
class EntityRecord:
    index: int
    source_id: str
    source_vocab: str
    entity_type: EntityType
    name: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entity_type"] = self.entity_type.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EntityRecord":
        return cls(
            index=int(d["index"]),
            source_id=str(d["source_id"]),
            source_vocab=str(d.get("source_vocab", "")),
            entity_type=EntityType.parse(str(d["entity_type"])),
            name=str(d["name"]),
        )


@dataclass(frozen=True)
class TripletRecord:
    head: int
    relation: str
    tail: int


_PUNCT = re.compile(r"[^\w\s]")
_SPACE = re.compile(r"\s+")


def normalize_name(text: str) -> str:
    """Lowercase, replace punctuation with spaces, collapse whitespace."""
    text = _PUNCT.sub(" ", text.lower())
    return _SPACE.sub(" ", text).strip()


class GraphStore:
    """Read-only triplet store.

    Triplets are held as parallel arrays in triplet-id order. Adjacency is two
    CSR indexes over dense entity positions, one for head occurrences and one
    for tail occurrences, so each triplet appears exactly once per endpoint.
    """

    def __init__(
        self,
        entities: Iterable[EntityRecord],
        heads: Sequence[int],
        relations: Sequence[str],
        tails: Sequence[int],
        *,
        load_stats: Mapping | None = None,
    ):
        ents = sorted(entities, key=lambda e: e.index)
        index_arr = np.array([e.index for e in ents], dtype=np.int64)
        if len(index_arr) and np.any(np.diff(index_arr) == 0):
            dup = int(index_arr[np.flatnonzero(np.diff(index_arr) == 0)[0]])
            raise GraphFormatError(f"duplicate entity index {dup}")
        vocab = sorted(set(relations))
        code_of = {r: i for i, r in enumerate(vocab)}
        rel_codes = np.array([code_of[r] for r in relations], dtype=np.int64)
        self._init_arrays(ents, index_arr, np.asarray(heads, dtype=np.int64),
                          rel_codes, np.asarray(tails, dtype=np.int64), tuple(vocab),
                          load_stats)

    @classmethod
    def _from_arrays(cls, ents, heads, rel_codes, tails, vocab, load_stats=None):
        self = cls.__new__(cls)
        ents = sorted(ents, key=lambda e: e.index)
        index_arr = np.array([e.index for e in ents], dtype=np.int64)
        self._init_arrays(ents, index_arr, heads, rel_codes, tails, tuple(vocab), load_stats)
        return self

    def _init_arrays(self, ents, index_arr, heads, rel_codes, tails, vocab, load_stats):
        self._entities = MappingProxyType({e.index: e for e in ents})
        self._index = index_arr
        max_index = int(index_arr.max()) if len(index_arr) else -1
        lookup = np.full(max_index + 1, -1, dtype=np.int64)
        lookup[index_arr] = np.arange(len(index_arr), dtype=np.int64)
        self._lookup = lookup

        heads_pos = self._positions(heads)
        tails_pos = self._positions(tails)

        # dedup on the exact (head, relation, tail) key, keep first occurrence
        n_raw = len(heads)
        if n_raw:
            keys = np.stack([heads, rel_codes, tails], axis=1)
            _, first = np.unique(keys, axis=0, return_index=True)
            keep = np.sort(first)
        else:
            keep = np.zeros(0, dtype=np.int64)
        self._heads = heads[keep]
        self._rels = rel_codes[keep]
        self._tails = tails[keep]
        self._heads_pos = heads_pos[keep]
        self._tails_pos = tails_pos[keep]
        # drop vocab entries no longer referenced
        used = np.unique(self._rels)
        if len(used) != len(vocab):
            remap = np.full(len(vocab), -1, dtype=np.int64)
            remap[used] = np.arange(len(used))
            self._rels = remap[self._rels]
            vocab = tuple(vocab[i] for i in used)
        self._vocab = vocab

        n_ent = len(index_arr)
        self._out_indptr, self._out_order = kernels.csr_from_keys(self._heads_pos, n_ent)
        self._in_indptr, self._in_order = kernels.csr_from_keys(self._tails_pos, n_ent)
        for arr in (self._heads, self._rels, self._tails, self._heads_pos, self._tails_pos,
                    self._out_indptr, self._out_order, self._in_indptr, self._in_order,
                    self._index, self._lookup):
            arr.setflags(write=False)

        self._build_name_index(ents)
        stats = dict(load_stats or {})
        stats.setdefault("rows", n_raw)
        stats["duplicates"] = stats.get("duplicates", 0) + (n_raw - len(keep))
        stats["triplets"] = len(keep)
        stats["entities"] = n_ent
        self._load_stats = MappingProxyType(stats)

    def _positions(self, indices: np.ndarray) -> np.ndarray:
        if len(indices) == 0:
            return np.zeros(0, dtype=np.int64)
        bad = (indices < 0) | (indices >= len(self._lookup))
        pos = np.where(bad, -1, self._lookup[np.where(bad, 0, indices)])
        missing = np.flatnonzero(pos < 0)
        if len(missing):
            raise GraphFormatError(
                f"dangling endpoint reference: entity index {int(indices[missing[0]])} "
                "has no entity record")
        return pos

    def _build_name_index(self, ents):
        by_name: dict[str, list[int]] = defaultdict(list)
        tokens: dict[str, set[int]] = defaultdict(set)
        for e in ents:
            norm = normalize_name(e.name)
            by_name[norm].append(e.index)
            for tok in norm.split():
                tokens[tok].add(e.index)
        self._name_index = MappingProxyType({k: tuple(v) for k, v in by_name.items()})
        self._sorted_names = sorted(by_name)
        self._token_index = MappingProxyType({k: frozenset(v) for k, v in tokens.items()})

    # ---- read API ----

    @property
    def entities(self) -> Mapping[int, EntityRecord]:
        return self._entities

    @property
    def relation_vocab(self) -> tuple[str, ...]:
        return self._vocab

    @property
    def name_index(self) -> Mapping[str, tuple[int, ...]]:
        return self._name_index

    @property
    def load_stats(self) -> Mapping:
        return self._load_stats

    @property
    def heads(self) -> np.ndarray:
        return self._heads

    @property
    def tails(self) -> np.ndarray:
        return self._tails

    @property
    def relation_codes(self) -> np.ndarray:
        return self._rels

    def __len__(self) -> int:
        return len(self._heads)

    def __contains__(self, entity: int) -> bool:
        return entity in self._entities

    def entity(self, index: int) -> EntityRecord:
        try:
            return self._entities[index]
        except KeyError:
            raise UnknownEntityError(f"unknown entity index {index}") from None

    def position(self, index: int) -> int:
        self.entity(index)
        return int(self._lookup[index])

    def member_mask(self, indices: Iterable[int]) -> np.ndarray:
        """Boolean mask over dense positions for a set of entity indices."""
        mask = np.zeros(len(self._index), dtype=np.bool_)
        for i in indices:
            mask[self.position(i)] = True
        return mask

    def positions_to_indices(self, pos: np.ndarray) -> np.ndarray:
        return self._index[pos]

    def triplet(self, tid: int) -> TripletRecord:
        return TripletRecord(int(self._heads[tid]), self._vocab[self._rels[tid]],
                             int(self._tails[tid]))

    def triplets(self) -> Iterator[TripletRecord]:
        for tid in range(len(self)):
            yield self.triplet(tid)

    def triplet_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(heads_pos, tails_pos, relation codes), positional, read-only."""
        return self._heads_pos, self._tails_pos, self._rels

    def head_degree(self) -> np.ndarray:
        return np.diff(self._out_indptr)

    def tail_degree(self) -> np.ndarray:
        return np.diff(self._in_indptr)

    def incident_triplet_ids(self, entity: int) -> np.ndarray:
        pos = self.position(entity)
        return kernels.incident_ids(self._out_indptr, self._out_order,
                                    self._in_indptr, self._in_order, pos)

    def neighbors(self, entity: int) -> list[TripletRecord]:
        """Triplets with ``entity`` as head or tail, once each, by triplet id."""
        return [self.triplet(int(t)) for t in self.incident_triplet_ids(entity)]

    def search(self, query: str, limit: int = 10) -> list[EntityRecord]:
        q = normalize_name(query)
        if not q:
            raise ValueError("empty search query")
        seen: set[int] = set()
        ranked: list[int] = []

        def take(indices):
            for i in sorted(indices):
                if i not in seen:
                    seen.add(i)
                    ranked.append(i)

        take(self._name_index.get(q, ()))
        prefix_hits = []
        start = bisect.bisect_left(self._sorted_names, q)
        for name in self._sorted_names[start:]:
            if not name.startswith(q):
                break
            prefix_hits.extend(self._name_index[name])
        take(prefix_hits)
        toks = q.split()
        sets = [self._token_index.get(t) for t in toks]
        if all(sets):
            take(frozenset.intersection(*sets))
        return [self._entities[i] for i in ranked[:limit]]

    def subset(self, triplet_ids: np.ndarray, extra_entities: Iterable[int] = ()) -> "GraphStore":
        """New store over the given triplet ids and their endpoints."""
        triplet_ids = np.asarray(triplet_ids, dtype=np.int64)
        keep = set(np.unique(np.concatenate(
            [self._heads[triplet_ids], self._tails[triplet_ids]])).tolist())
        keep.update(extra_entities)
        ents = [self._entities[i] for i in keep]
        return GraphStore._from_arrays(
            ents, self._heads[triplet_ids].copy(), self._rels[triplet_ids].copy(),
            self._tails[triplet_ids].copy(), self._vocab)


def neighbors(store: GraphStore, entity: int) -> list[TripletRecord]:
    return store.neighbors(entity)


def search_entities(store: GraphStore, query: str, limit: int = 10) -> list[EntityRecord]:
    return store.search(query, limit)


# ---- import / export ----

PRIMEKG_COLUMNS = {
    "relation": "relation",
    "x_index": "x_index", "x_id": "x_id", "x_type": "x_type", "x_name": "x_name",
    "x_source": "x_source",
    "y_index": "y_index", "y_id": "y_id", "y_type": "y_type", "y_name": "y_name",
    "y_source": "y_source",
}
_OPTIONAL_COLUMNS = {"x_source", "y_source"}


class _Builder:
    def __init__(self, symmetrize: bool):
        self.entities: dict[int, EntityRecord] = {}
        self.heads: list[int] = []
        self.rels: list[str] = []
        self.tails: list[int] = []
        self.rows = 0
        self.symmetrize = symmetrize

    def add_entity(self, ent: EntityRecord, where: str):
        prev = self.entities.get(ent.index)
        if prev is None:
            self.entities[ent.index] = ent
        elif prev != ent:
            raise GraphFormatError(
                f"{where}: entity index {ent.index} conflicts with an earlier record")

    def add_triplet(self, h: int, r: str, t: int):
        self.rows += 1
        self.heads.append(h)
        self.rels.append(r)
        self.tails.append(t)
        if self.symmetrize and h != t:
            self.heads.append(t)
            self.rels.append(r)
            self.tails.append(h)

    def build(self) -> GraphStore:
        store = GraphStore(self.entities.values(), self.heads, self.rels, self.tails,
                           load_stats={"rows": self.rows})
        logger.info("loaded %d rows -> %d triplets (%d duplicates), %d entities",
                    self.rows, len(store), store.load_stats["duplicates"], len(store.entities))
        return store


def _entity_from_row(row, cols, side, where) -> EntityRecord:
    try:
        index = int(row[cols[f"{side}_index"]])
    except (TypeError, ValueError):
        raise GraphFormatError(f"{where}: bad {side}_index {row.get(cols[f'{side}_index'])!r}") from None
    name = row.get(cols[f"{side}_name"])
    sid = row.get(cols[f"{side}_id"])
    if name is None or sid is None:
        raise GraphFormatError(f"{where}: missing {side}_id or {side}_name")
    try:
        etype = EntityType.parse(row.get(cols[f"{side}_type"]) or "")
    except ValueError as exc:
        raise GraphFormatError(f"{where}: {exc}") from None
    source_col = cols.get(f"{side}_source")
    vocab = row.get(source_col, "") if source_col else ""
    return EntityRecord(index, sid, vocab or "", etype, name)


def _load_csv(path: Path, column_map: Mapping | None, symmetrize: bool) -> GraphStore:
    cols = dict(PRIMEKG_COLUMNS)
    cols.update(column_map or {})
    b = _Builder(symmetrize)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or ())
        missing = [k for k, v in cols.items() if v not in header and k not in _OPTIONAL_COLUMNS]
        if missing:
            raise GraphFormatError(f"{path}: header lacks columns {missing}")
        for k in _OPTIONAL_COLUMNS:
            if cols[k] not in header:
                cols.pop(k)
        for row in reader:
            where = f"{path}: row {reader.line_num}"
            if None in row or any(v is None for v in row.values()):
                raise GraphFormatError(f"{where}: wrong number of fields")
            rel = row[cols["relation"]]
            if not rel:
                raise GraphFormatError(f"{where}: empty relation")
            x = _entity_from_row(row, cols, "x", where)
            y = _entity_from_row(row, cols, "y", where)
            b.add_entity(x, where)
            b.add_entity(y, where)
            b.add_triplet(x.index, rel, y.index)
    return b.build()


def _load_jsonl(path: Path, symmetrize: bool) -> GraphStore:
    b = _Builder(symmetrize)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}: row {lineno}"
            try:
                obj = json.loads(line)
                if "entity" in obj:
                    b.add_entity(EntityRecord.from_dict(obj["entity"]), where)
                    continue
                if "x" in obj:
                    x = EntityRecord.from_dict(obj["x"])
                    b.add_entity(x, where)
                    h = x.index
                else:
                    h = int(obj["x_index"])
                if "y" in obj:
                    y = EntityRecord.from_dict(obj["y"])
                    b.add_entity(y, where)
                    t = y.index
                else:
                    t = int(obj["y_index"])
                rel = obj["relation"]
            except GraphFormatError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise GraphFormatError(f"{where}: {exc}") from None
            b.add_triplet(h, rel, t)
    return b.build()


def _load_npz(path: Path) -> GraphStore:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CACHE_FORMAT_VERSION:
            raise GraphFormatError(f"{path}: cache version {version}, expected {CACHE_FORMAT_VERSION}")
        ents = [EntityRecord.from_dict(d) for d in json.loads(str(data["entities"]))]
        vocab = json.loads(str(data["relations"]))
        return GraphStore._from_arrays(ents, data["heads"].copy(), data["rel_codes"].copy(),
                                       data["tails"].copy(), vocab)


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".csv", ".tsv"):
        return "csv"
    if suffix in (".jsonl", ".json"):
        return "jsonl"
    if suffix == ".npz":
        return "npz"
    raise GraphFormatError(f"cannot infer graph format from {path.name}")


def load_graph(path, format: str | None = None, *, column_map: Mapping | None = None,
               symmetrize: bool = False) -> GraphStore:
    """Load a store from CSV (PrimeKG columns), JSONL, or the npz cache.

    ``column_map`` maps logical column names (``relation``, ``x_index`` ...)
    to the file's header names. With ``symmetrize`` each row also yields the
    reversed triplet.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = format or _infer_format(path)
    if fmt == "csv":
        return _load_csv(path, column_map, symmetrize)
    if fmt == "jsonl":
        return _load_jsonl(path, symmetrize)
    if fmt == "npz":
        return _load_npz(path)
    raise GraphFormatError(f"unknown graph format {fmt!r}")


def save_graph(store: GraphStore, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _infer_format(path)
    heads, tails = store.heads, store.tails
    if fmt == "jsonl":
        used = set(heads.tolist()) | set(tails.tolist())
        with open(path, "w", encoding="utf-8") as fh:
            for idx in sorted(set(store.entities) - used):
                fh.write(json.dumps({"entity": store.entities[idx].to_dict()}) + "\n")
            for t in store.triplets():
                fh.write(json.dumps({"relation": t.relation,
                                     "x": store.entities[t.head].to_dict(),
                                     "y": store.entities[t.tail].to_dict()}) + "\n")
    elif fmt == "csv":
        if len(store.entities) != len(set(heads.tolist()) | set(tails.tolist())):
            logger.warning("CSV export drops isolated entities")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["relation", "x_index", "x_id", "x_type", "x_name", "x_source",
                        "y_index", "y_id", "y_type", "y_name", "y_source"])
            for t in store.triplets():
                x, y = store.entities[t.head], store.entities[t.tail]
                w.writerow([t.relation, x.index, x.source_id, x.entity_type.value, x.name,
                            x.source_vocab, y.index, y.source_id, y.entity_type.value,
                            y.name, y.source_vocab])
    elif fmt == "npz":
        ents = json.dumps([e.to_dict() for e in store.entities.values()])
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh, format_version=np.int64(CACHE_FORMAT_VERSION), heads=heads,
                rel_codes=store.relation_codes, tails=tails,
                relations=np.array(json.dumps(list(store.relation_vocab))),
                entities=np.array(ents))
    else:
        raise GraphFormatError(f"unknown graph format {fmt!r}")
