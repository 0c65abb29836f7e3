"""ConstraintItem records: patient-conditional applicability attached to triplets."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

from qkg.kg.store import GraphStore, TripletRecord
from qkg.llm.gateway import Gateway, GatewayError
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import ResponseParseError, extract_json_object

logger = logging.getLogger(__name__)

FORMAT_NAME = "qkg-relation-facts"
FORMAT_VERSION = 1

DEFAULT_LEVELS = (
    "Definitely Applicable",
    "Probably Applicable",
    "Uncertain",
    "Probably NOT Applicable",
    "Definitely NOT Applicable",
)

CONTEXT_SENSITIVE_RELATIONS = frozenset(
    {"indication", "contraindication", "off-label use", "drug_effect"})


class ConstraintFormatError(ValueError):
    pass


def _squash(label: str) -> str:
    return re.sub(r"[\s_]+", " ", label.strip()).lower()


@dataclass(frozen=True)
class ApplicabilityScale:
    """Ordered applicability labels, most applicable first."""

    labels: tuple[str, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        if len(self.labels) != 5:
            raise ValueError("applicability scale needs exactly five levels")
        if len({_squash(lab) for lab in self.labels}) != 5:
            raise ValueError("applicability levels must be distinct")

    def canonical(self, label: str) -> str:
        key = _squash(label)
        for lab in self.labels:
            if _squash(lab) == key:
                return lab
        raise ValueError(f"unknown applicability level {label!r}")

    def rank(self, label: str) -> int:
        """0 for the most applicable level, 4 for the least."""
        return self.labels.index(self.canonical(label))

    def compare(self, a: str, b: str) -> int:
        """-1 if ``a`` is more applicable than ``b``, 1 if less, 0 if equal."""
        ra, rb = self.rank(a), self.rank(b)
        return (ra > rb) - (ra < rb)


DEFAULT_SCALE = ApplicabilityScale()


@dataclass(frozen=True)
class ConstraintItem:
    patient_characteristics: str
    applicability: str
    evidence: str = ""

    def __post_init__(self):
        if not self.patient_characteristics or not self.patient_characteristics.strip():
            raise ValueError("patient_characteristics must be non-empty")

    def to_dict(self) -> dict:
        return {"patient_characteristics": self.patient_characteristics,
                "applicability": self.applicability, "evidence": self.evidence}


class TripletKey(NamedTuple):
    head: str
    relation: str
    tail: str

    @classmethod
    def of(cls, store: GraphStore, triplet: TripletRecord) -> "TripletKey":
        return cls(store.entity(triplet.head).source_id, triplet.relation,
                   store.entity(triplet.tail).source_id)


@dataclass(frozen=True)
class AnnotatedRelation:
    triplet_key: TripletKey
    constraints: tuple[ConstraintItem, ...]

    def to_dict(self) -> dict:
        return {"triplet_key": list(self.triplet_key),
                "constraints": [c.to_dict() for c in self.constraints]}


@dataclass
class ConstraintStore:
    """One AnnotatedRelation per triplet key, in insertion order."""

    scale: ApplicabilityScale = DEFAULT_SCALE
    relations: dict[TripletKey, AnnotatedRelation] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def add(self, key: TripletKey, items: Iterable[ConstraintItem]) -> None:
        key = TripletKey(*key)
        if key in self.relations:
            raise ValueError(f"duplicate triplet key {key}")
        checked = []
        for it in items:
            self.scale.canonical(it.applicability)
            checked.append(it)
        self.relations[key] = AnnotatedRelation(key, tuple(checked))

    def get(self, key) -> list[ConstraintItem]:
        rel = self.relations.get(TripletKey(*key))
        return list(rel.constraints) if rel else []

    def __len__(self) -> int:
        return len(self.relations)

    def __eq__(self, other):
        if not isinstance(other, ConstraintStore):
            return NotImplemented
        return (self.scale == other.scale
                and list(self.relations.items()) == list(other.relations.items()))

    def summary(self) -> dict:
        ents = set()
        rels: Counter = Counter()
        for k in self.relations:
            ents.update((k.head, k.tail))
            rels[k.relation] += 1
        return {
            "annotated_relations": len(self.relations),
            "constraint_items": sum(len(r.constraints) for r in self.relations.values()),
            "unique_entities": len(ents),
            "relation_types": dict(sorted(rels.items())),
            "failures": len(self.failures),
        }


def get_constraints(store: ConstraintStore, triplet_key) -> list[ConstraintItem]:
    return store.get(triplet_key)


# ---- persistence ----

def save_constraints(store: ConstraintStore, path) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "levels": list(store.scale.labels)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for rel in store.relations.values():
            fh.write(json.dumps(rel.to_dict(), ensure_ascii=False) + "\n")


_ITEM_FIELDS = ("patient_characteristics", "applicability", "evidence")


def _item_from(obj, where: str, scale: ApplicabilityScale, strict: bool) -> ConstraintItem:
    if not isinstance(obj, Mapping):
        raise ConstraintFormatError(f"{where}: constraint must be an object")
    for f in _ITEM_FIELDS:
        if f not in obj:
            raise ConstraintFormatError(f"{where}: missing field '{f}'")
        if not isinstance(obj[f], str):
            raise ConstraintFormatError(f"{where}: field '{f}' must be a string")
    try:
        label = obj["applicability"] if strict else scale.canonical(obj["applicability"])
        scale.canonical(label)
        return ConstraintItem(obj["patient_characteristics"], label, obj["evidence"])
    except ValueError as exc:
        field_name = "applicability" if "applicab" in str(exc) else "patient_characteristics"
        raise ConstraintFormatError(f"{where}: field '{field_name}': {exc}") from None


def load_constraints(path) -> ConstraintStore:
    path = Path(path)
    store = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name}: line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConstraintFormatError(f"{where}: invalid JSON ({exc.msg})") from None
            if store is None:
                store = ConstraintStore()
                if obj.get("format") == FORMAT_NAME:
                    if obj.get("version") != FORMAT_VERSION:
                        raise ConstraintFormatError(f"{where}: unsupported version {obj.get('version')}")
                    store.scale = ApplicabilityScale(tuple(obj.get("levels") or DEFAULT_LEVELS))
                    continue
            key = obj.get("triplet_key")
            if not (isinstance(key, list) and len(key) == 3 and all(isinstance(k, str) for k in key)):
                raise ConstraintFormatError(f"{where}: field 'triplet_key' must be [head, relation, tail]")
            cons = obj.get("constraints")
            if not isinstance(cons, list):
                raise ConstraintFormatError(f"{where}: field 'constraints' must be a list")
            items = [_item_from(c, f"{where} constraints[{i}]", store.scale, strict=True)
                     for i, c in enumerate(cons)]
            try:
                store.add(TripletKey(*key), items)
            except ValueError as exc:
                raise ConstraintFormatError(f"{where}: {exc}") from None
    return store or ConstraintStore()


_HEAD_KEYS = ("head", "x_id", "head_id", "source_id")
_TAIL_KEYS = ("tail", "y_id", "tail_id", "target_id")
_LIST_KEYS = ("constraints", "facts", "constraint_items", "ConstraintItems")


def _first(obj, keys):
    for k in keys:
        if k in obj and obj[k] not in (None, ""):
            return obj[k]
    return None


def import_relation_facts(path, scale: ApplicabilityScale = DEFAULT_SCALE) -> ConstraintStore:
    """Lenient importer for externally produced relation-facts JSONL.

    Accepts rows keyed by ``triplet_key`` or by head/relation/tail columns
    (``x_id``/``y_id`` as in PrimeKG), carrying either a list of constraints
    or one flat constraint per row. Rows for the same key are merged in file
    order; applicability labels are matched case-insensitively.
    """
    path = Path(path)
    grouped: dict[TripletKey, list[ConstraintItem]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path.name}: line {lineno}"
            obj = json.loads(line)
            if obj.get("format") == FORMAT_NAME:
                scale = ApplicabilityScale(tuple(obj.get("levels") or DEFAULT_LEVELS))
                continue
            if "triplet_key" in obj:
                key = TripletKey(*[str(k) for k in obj["triplet_key"]])
            else:
                h, t, r = _first(obj, _HEAD_KEYS), _first(obj, _TAIL_KEYS), obj.get("relation")
                if h is None or t is None or r is None:
                    raise ConstraintFormatError(f"{where}: cannot find head/relation/tail")
                key = TripletKey(str(h), str(r), str(t))
            lst = _first(obj, _LIST_KEYS)
            if isinstance(lst, str):
                lst = json.loads(lst)
            raw_items = lst if isinstance(lst, list) else [obj]
            items = [_item_from(c, f"{where} item {i}", scale, strict=False)
                     for i, c in enumerate(raw_items)]
            grouped.setdefault(key, []).extend(items)
    store = ConstraintStore(scale=scale)
    for key, items in grouped.items():
        store.add(key, items)
    return store


# ---- LLM annotation ----

def _parse_annotation(raw: str, scale: ApplicabilityScale) -> list[ConstraintItem]:
    obj = extract_json_object(raw)
    lst = obj.get("constraints")
    if not isinstance(lst, list) or not lst:
        raise ResponseParseError("response has no non-empty 'constraints' list")
    try:
        return [_item_from(c, f"constraints[{i}]", scale, strict=False) for i, c in enumerate(lst)]
    except ConstraintFormatError as exc:
        raise ResponseParseError(str(exc)) from None


def _annotate_one(gateway, role, store, triplet, scale, max_attempts):
    head, tail = store.entity(triplet.head), store.entity(triplet.tail)
    prompt = render_prompt(
        "annotate_v1", head=head.name, head_type=head.entity_type.value,
        relation=triplet.relation, tail=tail.name, tail_type=tail.entity_type.value,
        levels="\n".join(f"- {lab}" for lab in scale.labels))
    messages = [{"role": "user", "content": prompt}]
    last = "no attempts"
    for attempt in range(max_attempts):
        try:
            raw = gateway.complete(role, messages)
        except GatewayError as exc:
            return None, {"error": f"gateway: {exc}", "attempts": attempt + 1}
        try:
            return _parse_annotation(raw, scale), None
        except ResponseParseError as exc:
            last = str(exc)
            messages = messages + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": render_prompt("reformat_v1", error=last)}]
    return None, {"error": f"schema: {last}", "attempts": max_attempts}


def annotate_relations(graph: GraphStore, gateway: Gateway, *, role: str = "annotator",
                       relation_filter: Iterable[str] = CONTEXT_SENSITIVE_RELATIONS,
                       scale: ApplicabilityScale = DEFAULT_SCALE, max_attempts: int = 3,
                       workers: int = 4) -> ConstraintStore:
    """Annotate every unique triplet whose relation is in ``relation_filter``.

    Failures (schema or gateway) land in ``store.failures``; the rest of the
    store is still returned.
    """
    wanted = set(relation_filter)
    jobs: dict[TripletKey, TripletRecord] = {}
    for t in graph.triplets():
        if t.relation in wanted:
            jobs.setdefault(TripletKey.of(graph, t), t)
    store = ConstraintStore(scale=scale)
    if not jobs:
        return store

    def run(item):
        return _annotate_one(gateway, role, graph, item[1], scale, max_attempts)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, jobs.items()))
    for (key, _), (items, failure) in zip(jobs.items(), results):
        if items is not None:
            store.add(key, items)
        else:
            store.failures.append({"triplet_key": list(key), **failure})
    if store.failures:
        logger.warning("%d of %d relations failed annotation", len(store.failures), len(jobs))
    return store
