"""Validator agent: checks reasoner claims against the graph over a JSON tool protocol."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from qkg.constraints import ConstraintStore, TripletKey
from qkg.context import (
    DEFAULT_POLICY,
    ApplicabilityDecision,
    ApplicabilityPolicy,
    PatientContext,
    apply_constraint_items,
)
from qkg.kg.store import GraphStore, TripletRecord, UnknownEntityError
from qkg.kg.subgraph import Subgraph
from qkg.llm.gateway import Gateway, GatewayError
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import ANSWER_LETTERS, ResponseParseError, extract_json_object

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

SUPPORTED = "SUPPORTED"
CONTRADICTED = "CONTRADICTED"
NO_COVERAGE = "NO_COVERAGE"
STATUSES = (SUPPORTED, CONTRADICTED, NO_COVERAGE)

KG_ONLY = "kg_only"
QKG = "qkg_with_context"
MODES = (KG_ONLY, QKG)

TOOLS = ("search_entities", "get_relations_with_context")
_TRACE_CHARS = 4000


@dataclass(frozen=True)
class Claim:
    option_label: str
    statement: str
    supports: bool = True

    def __post_init__(self):
        if self.option_label not in ANSWER_LETTERS or len(self.option_label) != 1:
            raise ValueError(f"claim option must be a letter A-J, got {self.option_label!r}")

    def to_dict(self) -> dict:
        return {"option_label": self.option_label, "statement": self.statement,
                "supports": self.supports}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Claim":
        supports = d.get("supports", True)
        if isinstance(supports, str):
            supports = supports.strip().lower() in ("true", "1", "yes")
        return cls(str(d["option_label"]).strip().upper(), str(d["statement"]), bool(supports))


@dataclass(frozen=True)
class ToolCall:
    turn: int
    tool: str
    args: dict
    result: str

    def to_dict(self) -> dict:
        return {"turn": self.turn, "tool": self.tool, "args": self.args, "result": self.result}


@dataclass(frozen=True)
class ClaimVerdict:
    claim: Claim
    status: str
    evidence: str
    tool_trace: tuple[ToolCall, ...] = ()

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"bad status {self.status!r}")
        if self.status != NO_COVERAGE and not self.evidence.strip():
            raise ValueError(f"{self.status} verdict needs evidence")

    def to_dict(self) -> dict:
        return {"claim": self.claim.to_dict(), "status": self.status, "evidence": self.evidence,
                "tool_trace": [t.to_dict() for t in self.tool_trace]}


@dataclass(frozen=True)
class ValidationReport:
    verdicts: tuple[ClaimVerdict, ...]
    turns: int
    mode: str
    turn_budget: int = 20
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.turns > self.turn_budget:
            raise ValueError("turn counter exceeds budget")

    @property
    def has_contradiction(self) -> bool:
        return any(v.status == CONTRADICTED for v in self.verdicts)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "mode": self.mode, "turns": self.turns,
                "turn_budget": self.turn_budget, "notes": list(self.notes),
                "verdicts": [v.to_dict() for v in self.verdicts]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ValidationReport":
        if d.get("schema_version", REPORT_SCHEMA_VERSION) != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        verdicts = []
        for v in d.get("verdicts", []):
            trace = tuple(ToolCall(t["turn"], t["tool"], dict(t["args"]), t["result"])
                          for t in v.get("tool_trace", []))
            verdicts.append(ClaimVerdict(Claim.from_dict(v["claim"]), v["status"],
                                         v.get("evidence", ""), trace))
        return cls(tuple(verdicts), int(d.get("turns", 0)), d.get("mode", QKG),
                   int(d.get("turn_budget", 20)), tuple(d.get("notes", ())))


# ---- evidence retrieval ----

@dataclass(frozen=True)
class RelationEvidence:
    triplet: TripletRecord
    key: TripletKey
    head_name: str
    tail_name: str
    decision: ApplicabilityDecision | None = None

    def to_dict(self) -> dict:
        d = {"head": self.head_name, "head_index": self.triplet.head,
             "relation": self.triplet.relation,
             "tail": self.tail_name, "tail_index": self.triplet.tail}
        if self.decision is not None:
            dec = self.decision
            d["applicability"] = {"verdict": dec.verdict, "weight": dec.weight,
                                  "rationale": dec.rationale}
            if dec.matched_constraint is not None:
                d["applicability"]["constraint"] = dec.matched_constraint.to_dict()
        return d


@dataclass
class EvidenceBundle:
    relations: list[RelationEvidence] = field(default_factory=list)
    total: int = 0

    def __len__(self):
        return len(self.relations)


def _graph_of(subgraph) -> GraphStore:
    return subgraph.merged if isinstance(subgraph, Subgraph) else subgraph


def get_relations_with_context(entities: Iterable[int], subgraph, constraint_store: ConstraintStore | None,
                               context: PatientContext | None, mode: str = QKG, *,
                               relation: str | None = None, limit: int | None = None,
                               gateway: Gateway | None = None, judge_role: str | None = None,
                               policy: ApplicabilityPolicy = DEFAULT_POLICY) -> EvidenceBundle:
    """Incident relations of ``entities``; in QKG mode each carries an applicability decision."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    graph = _graph_of(subgraph)
    seen: set[TripletRecord] = set()
    rels: list[TripletRecord] = []
    for e in dict.fromkeys(entities):
        for t in graph.neighbors(e):
            if t not in seen and (relation is None or t.relation == relation):
                seen.add(t)
                rels.append(t)
    bundle = EvidenceBundle(total=len(rels))
    if limit is not None:
        rels = rels[:limit]
    keys = [TripletKey.of(graph, t) for t in rels]
    decisions: list = [None] * len(rels)
    if mode == QKG:
        store = constraint_store or ConstraintStore()
        decisions = apply_constraint_items(
            [(k, store.get(k)) for k in keys], context or PatientContext(),
            gateway, judge_role, policy)
    for t, k, dec in zip(rels, keys, decisions):
        bundle.relations.append(RelationEvidence(
            t, k, graph.entity(t.head).name, graph.entity(t.tail).name, dec))
    return bundle


# ---- agent loop ----

@dataclass
class _Session:
    graph: GraphStore
    constraint_store: ConstraintStore | None
    context: PatientContext | None
    mode: str
    gateway: Gateway
    judge_role: str | None
    policy: ApplicabilityPolicy
    relation_limit: int

    def run_tool(self, name: str, args: Mapping) -> str:
        if name == "search_entities":
            query = str(args.get("query", ""))
            limit = max(1, min(int(args.get("limit", 10)), 25))
            hits = self.graph.search(query, limit)
            return json.dumps([{"index": e.index, "name": e.name, "type": e.entity_type.value,
                                "source_id": e.source_id} for e in hits], ensure_ascii=False)
        if name == "get_relations_with_context":
            ents = args.get("entities")
            if isinstance(ents, int):
                ents = [ents]
            if not isinstance(ents, list) or not all(isinstance(e, int) for e in ents):
                raise ValueError("'entities' must be a list of entity indices")
            limit = max(1, min(int(args.get("limit", self.relation_limit)), self.relation_limit))
            bundle = get_relations_with_context(
                ents, self.graph, self.constraint_store, self.context, self.mode,
                relation=args.get("relation"), limit=limit, gateway=self.gateway,
                judge_role=self.judge_role, policy=self.policy)
            return json.dumps({"total": bundle.total, "shown": len(bundle),
                               "relations": [r.to_dict() for r in bundle.relations]},
                              ensure_ascii=False)
        raise ValueError(f"unknown tool {name!r}; available: {', '.join(TOOLS)}")


def _claims_listing(claims: Sequence[Claim]) -> str:
    lines = []
    for i, c in enumerate(claims):
        stance = "supports choosing" if c.supports else "argues for eliminating"
        lines.append(f"[{i}] option {c.option_label} ({stance}): {c.statement}")
    return "\n".join(lines)


def _claim_index(value, n) -> int | None:
    if isinstance(value, bool):
        return None
    try:
        i = int(value)
    except (TypeError, ValueError):
        return None
    return i if 0 <= i < n else None


def validate_claims(claims: Sequence[Claim], context: PatientContext | None, subgraph,
                    constraint_store: ConstraintStore | None, gateway: Gateway, *,
                    role: str = "validator", mode: str = QKG, turn_budget: int = 20,
                    judge_role: str | None = None, policy: ApplicabilityPolicy = DEFAULT_POLICY,
                    relation_limit: int = 50) -> ValidationReport:
    """Run one validation round and return a verdict per claim.

    Each LLM call is one turn; the budget covers the whole round. Claims left
    without a verdict (budget, gateway failure, omitted by the model) become
    NO_COVERAGE with a note.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    claims = list(claims)
    if not claims:
        return ValidationReport((), 0, mode, turn_budget)
    session = _Session(_graph_of(subgraph), constraint_store,
                       context if mode == QKG else None, mode, gateway, judge_role, policy,
                       relation_limit)
    if mode == QKG:
        ctx_block = render_prompt("validator_context_v1", context=json.dumps(
            (context or PatientContext()).to_dict(), ensure_ascii=False))
    else:
        ctx_block = ""
    messages = [
        {"role": "system", "content": render_prompt("validator_system_v1", budget=turn_budget)},
        {"role": "user", "content": render_prompt("validator_task_v1", claims=_claims_listing(claims),
                                                  context_block=ctx_block)},
    ]
    turns = 0
    results: dict[int, tuple[str, str]] = {}
    per_claim: dict[int, list[ToolCall]] = {i: [] for i in range(len(claims))}
    notes: list[str] = []
    finished = False
    while turns < turn_budget:
        try:
            raw = gateway.complete(role, messages)
        except GatewayError as exc:
            notes.append(f"gateway failure: {exc}")
            break
        turns += 1
        messages.append({"role": "assistant", "content": raw})
        try:
            action = extract_json_object(raw)
        except ResponseParseError as exc:
            messages.append({"role": "user", "content": render_prompt("reformat_v1", error=str(exc))})
            continue
        if "final" in action:
            final = action["final"]
            if not isinstance(final, list):
                messages.append({"role": "user", "content": render_prompt(
                    "reformat_v1", error="'final' must be a list of verdict objects")})
                continue
            for entry in final:
                if not isinstance(entry, Mapping):
                    continue
                idx = _claim_index(entry.get("claim"), len(claims))
                status = str(entry.get("status", "")).strip().upper()
                if idx is None or status not in STATUSES or idx in results:
                    continue
                results[idx] = (status, str(entry.get("evidence", "")))
            finished = True
            break
        if "tool" in action:
            name = str(action["tool"])
            args = action.get("args") or {}
            try:
                if not isinstance(args, Mapping):
                    raise ValueError("'args' must be an object")
                result = session.run_tool(name, args)
            except (ValueError, TypeError, UnknownEntityError) as exc:
                result = json.dumps({"error": str(exc)})
            call = ToolCall(turns, name, dict(args) if isinstance(args, Mapping) else {},
                            result[:_TRACE_CHARS])
            target = _claim_index(action.get("claim", args.get("claim") if isinstance(args, Mapping) else None),
                                  len(claims))
            if target is not None:
                per_claim[target].append(call)
            messages.append({"role": "user", "content": f"[tool result] {result}"})
            continue
        messages.append({"role": "user", "content": render_prompt(
            "reformat_v1", error="expected a JSON object with 'tool' or 'final'")})
    if not finished and turns >= turn_budget:
        notes.append(f"turn budget of {turn_budget} exhausted")

    verdicts = []
    for i, claim in enumerate(claims):
        status, evidence = results.get(i, (NO_COVERAGE, ""))
        if status != NO_COVERAGE and not evidence.strip():
            status, evidence = NO_COVERAGE, "verdict returned without evidence"
        if i not in results:
            evidence = "; ".join(notes) if notes else "validator returned no verdict for this claim"
        verdicts.append(ClaimVerdict(claim, status, evidence, tuple(per_claim[i])))
    return ValidationReport(tuple(verdicts), turns, mode, turn_budget, tuple(notes))
