"""Patient context extraction and constraint applicability decisions."""

from __future__ import annotations

import json
import logging
import math
import operator
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from qkg.constraints import DEFAULT_SCALE, ApplicabilityScale, ConstraintItem
from qkg.llm.gateway import Gateway, GatewayError
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import ResponseParseError, extract_json_object

logger = logging.getLogger(__name__)

SEXES = ("female", "male", "other")
COMPARATORS = ("<", "<=", "=", ">=", ">")


@dataclass(frozen=True)
class LabValue:
    name: str
    value: float
    unit: str = ""
    comparator_hint: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"lab {self.name!r} value must be finite")
        if self.comparator_hint is not None and self.comparator_hint not in COMPARATORS:
            raise ValueError(f"bad comparator hint {self.comparator_hint!r}")


@dataclass(frozen=True)
class PatientContext:
    age: float | None = None
    sex: str | None = None
    diagnoses: tuple[str, ...] = ()
    labs: tuple[LabValue, ...] = ()
    medications: tuple[str, ...] = ()
    other_factors: tuple[str, ...] = ()

    def __post_init__(self):
        if self.age is not None and not (self.age >= 0):
            raise ValueError("age must be >= 0")
        if self.sex is not None and self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}")

    def is_empty(self) -> bool:
        return self == PatientContext()

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("diagnoses", "labs", "medications", "other_factors"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatientContext":
        labs = []
        for lab in d.get("labs") or []:
            labs.append(LabValue(str(lab["name"]), float(lab["value"]), str(lab.get("unit") or ""),
                                 lab.get("comparator_hint")))
        age = d.get("age")
        sex = d.get("sex")
        return cls(
            age=None if age is None else float(age),
            sex=None if sex in (None, "") else str(sex).lower(),
            diagnoses=tuple(str(x) for x in d.get("diagnoses") or ()),
            labs=tuple(labs),
            medications=tuple(str(x) for x in d.get("medications") or ()),
            other_factors=tuple(str(x) for x in d.get("other_factors") or ()),
        )


# canonical lab name -> synonyms (all matched case-insensitively)
LAB_SYNONYMS: dict[str, tuple[str, ...]] = {
    "platelet count": ("platelet count", "platelets", "platelet", "plt"),
    "egfr": ("egfr", "estimated gfr", "glomerular filtration rate", "gfr"),
    "hba1c": ("hba1c", "hemoglobin a1c", "haemoglobin a1c", "a1c", "glycated hemoglobin"),
    "creatinine": ("serum creatinine", "creatinine", "cr"),
    "potassium": ("serum potassium", "potassium", "k+"),
    "sodium": ("serum sodium", "sodium", "na+"),
    "glucose": ("fasting glucose", "blood glucose", "plasma glucose", "glucose"),
    "hemoglobin": ("hemoglobin", "haemoglobin", "hgb", "hb"),
    "wbc": ("white blood cell count", "leukocyte count", "wbc"),
    "inr": ("inr",),
    "alt": ("alanine aminotransferase", "alt"),
    "ast": ("aspartate aminotransferase", "ast"),
    "bilirubin": ("total bilirubin", "bilirubin"),
    "ldl": ("ldl cholesterol", "ldl-c", "ldl"),
    "bmi": ("body mass index", "bmi"),
    "systolic blood pressure": ("systolic blood pressure", "systolic bp", "sbp"),
    "heart rate": ("heart rate", "pulse"),
}


def canonical_lab_name(name: str, extra: Mapping[str, Iterable[str]] | None = None) -> str:
    key = re.sub(r"\s+", " ", name.strip().lower())
    tables = [LAB_SYNONYMS] + ([extra] if extra else [])
    for table in tables:
        for canon, syns in table.items():
            if key == canon or key in syns:
                return canon
    return key


# ---- deterministic fallback extraction ----

_NUM = r"(\d{1,3}(?:,\d{3})+|\d+(?:\.\d+)?)"
_UNIT = r"(?:\s?(%|/[\w³²\^\.]+|[A-Za-zµμ]+/[\w³²\^\.]+(?:/[\w³²\.]+)?|mmHg|mg|bpm))?"
_AGE_RES = [
    re.compile(r"\b(\d{1,3})[- ](?:year|yr)s?[- ]old\b", re.I),
    re.compile(r"\baged? (\d{1,3})\b", re.I),
    re.compile(r"\b(\d{1,3}) ?(?:yo|y/o|y\.o\.)\b", re.I),
]
_FEMALE = re.compile(r"\b(woman|female|girl|lady|mother|she|her)\b", re.I)
_MALE = re.compile(r"\b(man|male|boy|gentleman|father|he|his)\b", re.I)
_MEDS = re.compile(r"\b(?:current )?medications? (?:include|includes|are|consist of)\s*:?\s*([^.]+)", re.I)
_HISTORY = re.compile(r"\b(?:past )?(?:medical )?history (?:includes|of|is significant for)\s*:?\s*([^.]+)", re.I)
_FACTORS = {
    "smoking": re.compile(r"\bsmok(?:es|er|ing)\b|\bpack[- ]years?\b|\bcigarettes?\b", re.I),
    "alcohol use": re.compile(r"\balcohol\b|\bdrinks?\b", re.I),
    "pregnancy": re.compile(r"\bpregnan(?:t|cy)\b", re.I),
}


def _split_list(text: str) -> tuple[str, ...]:
    parts = re.split(r",\s*(?:and\s+)?|\s+and\s+|;\s*", text)
    return tuple(p.strip(" .") for p in parts if p.strip(" ."))


def _lab_patterns():
    pats = []
    for canon, syns in LAB_SYNONYMS.items():
        for syn in syns:
            pats.append((len(syn), canon, syn))
    pats.sort(key=lambda x: -x[0])
    compiled = []
    for _, canon, syn in pats:
        rx = re.compile(
            r"(?<![\w+])" + re.escape(syn) + r"(?![\w+])"
            r"(?:\s+(?:level|count|concentration|value))?"
            r"(?:\s+(?:of|is|was|were|at|measured at))?\s*[:=]?\s*"
            r"(<=|>=|≤|≥|<|>)?\s*" + _NUM + _UNIT,
            re.I)
        compiled.append((canon, rx))
    return compiled


_LAB_RES = _lab_patterns()
_OP_NORMAL = {"≤": "<=", "≥": ">="}


def parse_patient_context(text: str) -> PatientContext:
    """Regex extraction of age, sex, labs, medications and history."""
    if not text or not text.strip():
        return PatientContext()
    age = None
    for rx in _AGE_RES:
        m = rx.search(text)
        if m:
            age = float(m.group(1))
            break
    f, mm = _FEMALE.search(text), _MALE.search(text)
    sex = None
    if f and (not mm or f.start() <= mm.start()):
        sex = "female"
    elif mm:
        sex = "male"
    labs, taken, seen = [], [], set()
    for canon, rx in _LAB_RES:
        for m in rx.finditer(text):
            span = m.span()
            if any(s < span[1] and span[0] < e for s, e in taken) or canon in seen:
                continue
            taken.append(span)
            seen.add(canon)
            op = m.group(1)
            labs.append((span[0], LabValue(canon, float(m.group(2).replace(",", "")),
                                            (m.group(3) or "").rstrip("."),
                                 _OP_NORMAL.get(op, op) if op else None)))
    meds = _MEDS.search(text)
    hist = _HISTORY.search(text)
    factors = tuple(name for name, rx in _FACTORS.items() if rx.search(text))
    return PatientContext(
        age=age, sex=sex,
        diagnoses=_split_list(hist.group(1)) if hist else (),
        labs=tuple(lab for _, lab in sorted(labs, key=lambda x: x[0])),
        medications=_split_list(meds.group(1)) if meds else (),
        other_factors=factors,
    )


def extract_patient_context(question: str, gateway: Gateway | None = None,
                            role: str | None = "patient-context-llm") -> PatientContext:
    """LLM extraction when a role is configured, regex fallback otherwise or on failure."""
    if not question or not question.strip():
        return PatientContext()
    if gateway is not None and gateway.has_role(role):
        try:
            raw = gateway.complete(role, [{"role": "user", "content": render_prompt(
                "patient_context_v1", question=question)}])
            return PatientContext.from_dict(extract_json_object(raw))
        except (GatewayError, ResponseParseError, ValueError, KeyError, TypeError) as exc:
            logger.info("patient context extraction fell back to rules: %s", exc)
    return parse_patient_context(question)


# ---- applicability ----

@dataclass(frozen=True)
class ApplicabilityDecision:
    triplet_key: tuple
    verdict: str  # applicable | not_applicable | unknown
    matched_constraint: ConstraintItem | None
    rationale: str
    weight: float

    def __post_init__(self):
        if self.verdict not in ("applicable", "not_applicable", "unknown"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == "applicable" and not self.weight > 0:
            raise ValueError("applicable decisions need positive weight")
        if self.verdict == "not_applicable" and self.weight != 0:
            raise ValueError("not_applicable decisions have weight 0")
        if (self.matched_constraint is None) != (self.verdict == "unknown"):
            raise ValueError("matched_constraint present iff verdict is decided")
        if not 0 <= self.weight <= 1:
            raise ValueError("weight must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"triplet_key": list(self.triplet_key), "verdict": self.verdict,
                "matched_constraint": self.matched_constraint.to_dict()
                if self.matched_constraint else None,
                "rationale": self.rationale, "weight": self.weight}


@dataclass(frozen=True)
class ApplicabilityPolicy:
    scale: ApplicabilityScale = DEFAULT_SCALE
    level_weights: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25, 0.0)
    unannotated_weight: float = 0.5
    lab_synonyms: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        w = self.level_weights
        if len(w) != 5 or any(a < b for a, b in zip(w, w[1:])):
            raise ValueError("level weights must be five non-increasing values")
        if w[-1] != 0 or any(x <= 0 for x in w[:-1]):
            raise ValueError("only the least applicable level may carry weight 0")

    def weight(self, label: str) -> float:
        return self.level_weights[self.scale.rank(label)]


DEFAULT_POLICY = ApplicabilityPolicy()

_CMP = re.compile(
    r"^\s*(?P<name>[A-Za-z][\w\s\-\+\.]*?)\s*(?P<op><=|>=|≤|≥|<|>|=)\s*"
    r"(?P<num>-?\d{1,3}(?:,\d{3})+|-?\d+(?:\.\d+)?)\s*(?P<unit>[^<>=≤≥]*?)\s*$")
_JOINERS = re.compile(r"\b(and|or|with|without|plus|but)\b|[;,]", re.I)
_OPS = {"<": operator.lt, "<=": operator.le, "=": operator.eq, ">=": operator.ge, ">": operator.gt}


def parse_comparator(text: str):
    """(name, op, value, unit) for a single ``NAME OP NUMBER [UNIT]`` expression, else None."""
    m = _CMP.match(text)
    if not m or _JOINERS.search(m.group("unit")) or _JOINERS.search(m.group("name")):
        return None
    op = _OP_NORMAL.get(m.group("op"), m.group("op"))
    return m.group("name").strip(), op, float(m.group("num").replace(",", "")), m.group("unit")


def rule_match(constraint: ConstraintItem, context: PatientContext,
               extra_synonyms: Mapping | None = None) -> bool | None:
    """True/False when the characteristics are a checkable comparator, None otherwise."""
    parsed = parse_comparator(constraint.patient_characteristics)
    if parsed is None:
        return None
    name, op, threshold, _ = parsed
    canon = canonical_lab_name(name, extra_synonyms)
    if canon == "age":
        observed = context.age
    else:
        observed = next((lab.value for lab in context.labs
                         if canonical_lab_name(lab.name, extra_synonyms) == canon), None)
    if observed is None:
        return None
    return _OPS[op](observed, threshold)


def _decide(key, matched: Sequence[ConstraintItem], policy, how: str) -> ApplicabilityDecision:
    # several matches: the least applicable one governs
    best = min(matched, key=lambda c: policy.weight(c.applicability))
    w = policy.weight(best.applicability)
    verdict = "applicable" if w > 0 else "not_applicable"
    return ApplicabilityDecision(
        tuple(key), verdict, best,
        f"{how}: patient matches '{best.patient_characteristics}' "
        f"({policy.scale.canonical(best.applicability)})", w)


def _unknown(key, policy, why: str) -> ApplicabilityDecision:
    return ApplicabilityDecision(tuple(key), "unknown", None, why, policy.unannotated_weight)


def _judge(gateway, role, key, undecided, context, policy):
    listing = "\n".join(f"[{i}] {c.patient_characteristics} -> {c.applicability}"
                        for i, c in enumerate(undecided))
    prompt = render_prompt("applicability_judge_v1",
                           context=json.dumps(context.to_dict(), ensure_ascii=False),
                           relation=" | ".join(key), constraints=listing)
    try:
        obj = extract_json_object(gateway.complete(role, [{"role": "user", "content": prompt}]))
    except (GatewayError, ResponseParseError) as exc:
        return _unknown(key, policy, f"judge failed: {exc}")
    idx = obj.get("match")
    if isinstance(idx, bool) or not (isinstance(idx, int) and 0 <= idx < len(undecided)):
        return _unknown(key, policy, f"judge found no matching constraint: {obj.get('rationale', '')}")
    return _decide(key, [undecided[idx]], policy, "judge")


def apply_constraint_items(relations: Iterable[tuple[tuple, Sequence[ConstraintItem]]],
                           context: PatientContext, gateway: Gateway | None = None,
                           role: str | None = None,
                           policy: ApplicabilityPolicy = DEFAULT_POLICY) -> list[ApplicabilityDecision]:
    """One decision per (triplet key, constraints) pair.

    Rules first; constraints the rules cannot check go to the LLM judge when a
    role is given, else the decision is ``unknown``.
    """
    out = []
    for key, constraints in relations:
        if not constraints:
            out.append(_unknown(key, policy, "no constraints annotated"))
            continue
        results = [(c, rule_match(c, context, policy.lab_synonyms)) for c in constraints]
        matched = [c for c, r in results if r is True]
        if matched:
            out.append(_decide(key, matched, policy, "rule"))
            continue
        undecided = [c for c, r in results if r is None]
        if undecided and gateway is not None and gateway.has_role(role):
            out.append(_judge(gateway, role, key, undecided, context, policy))
        elif undecided:
            out.append(_unknown(key, policy, "rules could not decide"))
        else:
            out.append(_unknown(key, policy, "no constraint matches the patient"))
    return out
