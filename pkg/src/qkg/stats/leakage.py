"""Leakage classification of validator-driven answer revisions.

Evidence strings from decisive CONTRADICTED verdicts are tagged with four
regex signal families (loaded from ``qkg/data/leakage_patterns_v1.yaml``),
labelled by first-matching branch, and the per-case label is derived from the
set of evidence labels. Cases the rules leave unclassified can be re-labelled
by an LLM role.
"""

from __future__ import annotations

import csv
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

import yaml

from qkg.llm.gateway import Gateway, GatewayError
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import ResponseParseError, extract_json_object
from qkg.pipeline import C2W, W2C, PairedTable, paired_table
from qkg.stats.mcnemar import mcnemar_exact
from qkg.validator import CONTRADICTED, ClaimVerdict, ValidationReport

PATTERN_FILE = "leakage_patterns_v1.yaml"

CLASSIFICATION_COLUMNS = ("sample_id", "direction", "regex_label", "llm_label",
                          "label_source", "ctx_driven", "justification")


class EvidenceLabel(str, Enum):
    CONTEXT = "EvContext"
    LEAKAGE = "EvLeakage"
    KG_GROUNDED = "EvKgGrounded"
    UNCLASSIFIED = "EvUnclassified"


class CaseClass(str, Enum):
    LIKELY_KG_SUPPORTED = "LIKELY_KG_SUPPORTED"
    MIXED = "MIXED"
    LIKELY_LEAKAGE = "LIKELY_LEAKAGE"
    UNCLASSIFIED = "UNCLASSIFIED"

    @classmethod
    def parse(cls, text: str) -> "CaseClass":
        key = re.sub(r"[^a-z]", "", str(text).lower())
        for member in cls:
            if re.sub(r"[^a-z]", "", member.value.lower()) == key:
                return member
        raise ValueError(f"unknown case label {text!r}")


@dataclass(frozen=True)
class SignalSet:
    kg_support: bool = False
    kg_gap: bool = False
    parametric: bool = False
    context: bool = False


@dataclass(frozen=True)
class PatternSet:
    version: int
    kg_support: tuple[re.Pattern, ...]
    kg_gap: tuple[re.Pattern, ...]
    parametric: tuple[re.Pattern, ...]
    context: tuple[re.Pattern, ...]

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PatternSet":
        def fam(key):
            return tuple(re.compile(p, re.I) for p in data.get(key) or ())
        ctx = data.get("context") or {}
        context = tuple(re.compile(p) for p in ctx.get("case_sensitive") or ()) + tuple(
            re.compile(p, re.I) for p in ctx.get("case_insensitive") or ())
        return cls(int(data.get("version", 0)), fam("kg_support"), fam("kg_gap"),
                   fam("parametric"), context)


@lru_cache(maxsize=None)
def default_patterns() -> PatternSet:
    text = resources.files("qkg").joinpath("data", PATTERN_FILE).read_text(encoding="utf-8")
    return PatternSet.from_mapping(yaml.safe_load(text))


def _any(patterns, text) -> bool:
    return any(p.search(text) for p in patterns)


def detect_signals(evidence: str, patterns: PatternSet | None = None) -> SignalSet:
    p = patterns or default_patterns()
    return SignalSet(kg_support=_any(p.kg_support, evidence), kg_gap=_any(p.kg_gap, evidence),
                     parametric=_any(p.parametric, evidence), context=_any(p.context, evidence))


def label_evidence(evidence: str, patterns: PatternSet | None = None) -> EvidenceLabel:
    s = detect_signals(evidence, patterns)
    if s.context:
        return EvidenceLabel.CONTEXT
    if s.kg_gap and s.parametric:
        return EvidenceLabel.LEAKAGE
    if s.parametric and not s.kg_support and not s.kg_gap:
        return EvidenceLabel.LEAKAGE
    if s.kg_support:
        return EvidenceLabel.KG_GROUNDED
    return EvidenceLabel.UNCLASSIFIED


def decisive_items(report: ValidationReport, initial_answer: str | None,
                   target: str | None) -> list[ClaimVerdict]:
    """CONTRADICTED verdicts the reconsideration turned on.

    Decisive: a supporting claim for the initial answer, or an eliminating
    claim against ``target`` (the gold answer for W->C, the final answer for
    C->W). Falls back to every CONTRADICTED verdict when none qualify.
    """
    contradicted = [v for v in report.verdicts if v.status == CONTRADICTED]
    decisive = [v for v in contradicted
                if (v.claim.supports and v.claim.option_label == initial_answer)
                or (not v.claim.supports and v.claim.option_label == target)]
    return decisive or contradicted


@dataclass(frozen=True)
class CaseLabel:
    sample_id: str
    direction: str
    regex_label: CaseClass
    ctx_driven: bool
    llm_label: CaseClass | None = None
    label_source: str = "rules"
    justification: str = ""
    flagged: bool = False

    def __post_init__(self):
        if self.ctx_driven and self.regex_label not in (CaseClass.LIKELY_KG_SUPPORTED, CaseClass.MIXED):
            raise ValueError("ctx_driven cases must be KG-supported or mixed")

    @property
    def label(self) -> CaseClass:
        if self.label_source == "llm" and self.llm_label is not None:
            return self.llm_label
        return self.regex_label

    def csv_row(self) -> dict:
        return {"sample_id": self.sample_id, "direction": self.direction,
                "regex_label": self.regex_label.value,
                "llm_label": self.llm_label.value if self.llm_label else "",
                "label_source": self.label_source, "ctx_driven": int(self.ctx_driven),
                "justification": self.justification}


def classify_labels(labels: Iterable[EvidenceLabel]) -> tuple[CaseClass, bool]:
    labels = set(labels)
    supp = EvidenceLabel.CONTEXT in labels or EvidenceLabel.KG_GROUNDED in labels
    leak = EvidenceLabel.LEAKAGE in labels
    ctx = EvidenceLabel.CONTEXT in labels
    if supp and leak:
        return CaseClass.MIXED, ctx
    if supp:
        return CaseClass.LIKELY_KG_SUPPORTED, ctx
    if leak:
        return CaseClass.LIKELY_LEAKAGE, ctx
    return CaseClass.UNCLASSIFIED, ctx


def classify_case(record, direction: str | None = None,
                  patterns: PatternSet | None = None) -> CaseLabel:
    """Label one revised sample (an ``EvalRecord`` with a validation report)."""
    direction = direction or record.revision
    if record.validation_report is None:
        raise ValueError(f"{record.sample_id}: record has no validation report")
    if direction == W2C:
        target = record.gold
    elif direction == C2W:
        target = record.final_answer
    else:
        # W->W-changed: same rule as C->W, the option that became final
        target = record.final_answer
    items = decisive_items(record.validation_report, record.initial_answer, target)
    cls, ctx = classify_labels(label_evidence(v.evidence, patterns) for v in items)
    return CaseLabel(record.sample_id, direction, cls, ctx)


def decisive_evidence(record, direction: str) -> list[str]:
    target = record.gold if direction == W2C else record.final_answer
    return [v.evidence for v in decisive_items(record.validation_report, record.initial_answer, target)]


def relabel_unclassified(cases: Sequence[CaseLabel], evidence: Mapping[str, Sequence[str]],
                         gateway: Gateway, role: str = "patient-context-llm",
                         workers: int = 4) -> list[CaseLabel]:
    """Ask an LLM to label each rules-UNCLASSIFIED case; others pass through unchanged.

    ``evidence`` maps sample id to its decisive evidence strings. Gateway or
    parse failures leave the case UNCLASSIFIED and flagged.
    """
    todo = [i for i, c in enumerate(cases) if c.regex_label is CaseClass.UNCLASSIFIED]
    out = list(cases)
    if not todo:
        return out

    def ask(case: CaseLabel) -> CaseLabel:
        preamble = ("The validator flipped a wrong initial answer to the correct one."
                    if case.direction == W2C else
                    "The validator flipped a correct initial answer to a wrong one.")
        texts = "\n".join(f"- {e}" for e in evidence.get(case.sample_id, ()))
        prompt = render_prompt("relabel_v1", preamble=preamble, evidence=texts or "- (none)")
        try:
            obj = extract_json_object(gateway.complete(role, [{"role": "user", "content": prompt}]))
            label = CaseClass.parse(obj["label"])
        except (GatewayError, ResponseParseError, KeyError, ValueError) as exc:
            return replace(case, flagged=True, justification=f"relabel failed: {exc}")
        just = " ".join(str(obj.get("justification", "")).split())
        return replace(case, llm_label=label, label_source="llm", justification=just)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(ask, [cases[i] for i in todo]))
    for i, res in zip(todo, results):
        out[i] = res
    return out


def write_classification_csv(cases: Iterable[CaseLabel], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CLASSIFICATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for c in cases:
            w.writerow(c.csv_row())


def read_classification_csv(path) -> list[CaseLabel]:
    """Read a per-case CSV; the LLM label is taken as given when the source says ``llm``."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            regex = CaseClass.parse(r["regex_label"])
            llm = CaseClass.parse(r["llm_label"]) if r.get("llm_label") else None
            ctx = str(r.get("ctx_driven", "")).strip().lower() in ("1", "true", "yes")
            out.append(CaseLabel(r["sample_id"], r["direction"], regex, ctx, llm,
                                 r.get("label_source") or "rules", r.get("justification", "")))
    return out


def class_counts(cases: Iterable[CaseLabel], direction: str) -> dict:
    counts = {c: 0 for c in CaseClass}
    ctx = 0
    for case in cases:
        if case.direction != direction:
            continue
        counts[case.label] += 1
        if case.ctx_driven and case.label is CaseClass.LIKELY_KG_SUPPORTED:
            ctx += 1
    return {"kg_supported": counts[CaseClass.LIKELY_KG_SUPPORTED], "mixed": counts[CaseClass.MIXED],
            "leakage": counts[CaseClass.LIKELY_LEAKAGE],
            "unclassified": counts[CaseClass.UNCLASSIFIED], "ctx": ctx}


def adjusted_accuracy(final_correct: int, n: int, n_leak_w2c: int, n_ctx_c2w: int) -> float:
    """(final_correct - n_leak) / (n - n_leak - n_ctx), exact, rounded to 4 places."""
    denom = n - n_leak_w2c - n_ctx_c2w
    if denom <= 0:
        raise ValueError("adjusted denominator must be positive")
    if n_leak_w2c < 0 or n_ctx_c2w < 0 or n_leak_w2c > final_correct:
        raise ValueError("leak/ctx counts must be >= 0 and n_leak <= final_correct")
    return round(float(Fraction(final_correct - n_leak_w2c, denom)), 4)


def excluded_ids(cases: Iterable[CaseLabel]) -> set[str]:
    """W->C labelled likely-leakage, or ctx-driven KG-supported C->W."""
    out = set()
    for c in cases:
        if c.direction == W2C and c.label is CaseClass.LIKELY_LEAKAGE:
            out.add(c.sample_id)
        elif c.direction == C2W and c.label is CaseClass.LIKELY_KG_SUPPORTED and c.ctx_driven:
            out.add(c.sample_id)
    return out


def adjustment_counts(cases: Iterable[CaseLabel]) -> tuple[int, int]:
    """(n_leak_w2c, n_ctx_c2w) for one run."""
    cases = list(cases)
    leak = sum(1 for c in cases if c.direction == W2C and c.label is CaseClass.LIKELY_LEAKAGE)
    ctx = sum(1 for c in cases if c.direction == C2W and c.label is CaseClass.LIKELY_KG_SUPPORTED
              and c.ctx_driven)
    return leak, ctx


@dataclass(frozen=True)
class AdjustedTest:
    p_value: float
    table: PairedTable
    excluded: frozenset[str]

    @property
    def n(self) -> int:
        return self.table.n

    @property
    def b(self) -> int:
        return self.table.b

    @property
    def c(self) -> int:
        return self.table.c


def leakage_adjusted_paired_test(run_a: Mapping[str, bool], run_b: Mapping[str, bool],
                                 labels_a: Iterable[CaseLabel],
                                 labels_b: Iterable[CaseLabel]) -> AdjustedTest:
    """McNemar on the pairs left after removing samples flagged in either run."""
    drop = excluded_ids(labels_a) | excluded_ids(labels_b)
    a = {k: v for k, v in run_a.items() if k not in drop}
    b = {k: v for k, v in run_b.items() if k not in drop}
    table = paired_table(a, b)
    return AdjustedTest(mcnemar_exact(table.b, table.c), table, frozenset(drop))
