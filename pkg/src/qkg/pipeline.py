"""Reasoner -> validator -> reconsider pipeline and run-level accounting."""

from __future__ import annotations

import csv
import json
import logging
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from qkg.constraints import ConstraintStore
from qkg.context import DEFAULT_POLICY, ApplicabilityPolicy, PatientContext, extract_patient_context
from qkg.llm.gateway import Gateway, GatewayError
from qkg.llm.prompts import render_prompt
from qkg.llm.schema import (
    ANSWER_LETTERS,
    QAResponse,
    ResponseParseError,
    extract_json_object,
    parse_qa_response,
)
from qkg.validator import KG_ONLY, QKG, Claim, ValidationReport, validate_claims

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("sample_id", "initial_answer", "initial_correct", "final_answer",
               "final_correct", "revision", "mode", "validator_model")

UNCHANGED = "unchanged"
W2C = "W->C"
C2W = "C->W"
W2W = "W->W-changed"
REVISIONS = (UNCHANGED, W2C, C2W, W2W)

# CLI mode name -> validator mode (None = no validator)
RUN_MODES = {"none": None, "kg": KG_ONLY, "qkg": QKG}


@dataclass(frozen=True)
class QASample:
    id: str
    question: str
    choices: Mapping[str, str]
    gold: str
    precomputed_context: PatientContext | None = None
    kg_grounding: Mapping | None = None
    source: str | None = None

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError(f"{self.id}: need at least two choices")
        bad = [k for k in self.choices if k not in ANSWER_LETTERS or len(k) != 1]
        if bad:
            raise ValueError(f"{self.id}: choice labels must be letters A-J, got {bad}")
        if self.gold not in self.choices:
            raise ValueError(f"{self.id}: gold {self.gold!r} is not among the choices")

    def to_dict(self) -> dict:
        d = {"id": self.id, "question": self.question, "choices": dict(self.choices),
             "gold": self.gold}
        if self.precomputed_context is not None:
            d["precomputed_context"] = self.precomputed_context.to_dict()
        if self.kg_grounding is not None:
            d["kg_grounding"] = dict(self.kg_grounding)
        if self.source is not None:
            d["source"] = self.source
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "QASample":
        sid = next((d[k] for k in ("id", "sample_id", "qa_id") if k in d), None)
        if sid is None:
            raise KeyError("sample has no id")
        choices = next((d[k] for k in ("choices", "options") if k in d), None)
        if isinstance(choices, str):
            choices = json.loads(choices)
        if isinstance(choices, list):
            choices = {ANSWER_LETTERS[i]: str(c) for i, c in enumerate(choices)}
        if not isinstance(choices, Mapping):
            raise KeyError(f"{sid}: sample has no choices")
        gold = next((d[k] for k in ("gold", "answer_idx", "answer") if k in d), None)
        gold = str(gold).strip().upper() if gold is not None else ""
        if gold not in choices:
            # some exports give the answer text instead of the letter
            by_text = {str(v).strip(): k for k, v in choices.items()}
            gold = by_text.get(str(d.get("answer", "")).strip(), gold)
        ctx = next((d[k] for k in ("precomputed_context", "patient_character") if d.get(k)), None)
        return cls(
            id=str(sid), question=str(d["question"]),
            choices={str(k).strip().upper(): str(v) for k, v in choices.items()},
            gold=gold,
            precomputed_context=PatientContext.from_dict(ctx) if ctx else None,
            kg_grounding=d.get("kg_grounding"),
            source=d.get("source"),
        )


def load_dataset(path) -> list[QASample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    samples.append(QASample.from_dict(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate sample ids")
    return samples


def save_dataset(samples: Iterable[QASample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def revision_of(initial: str | None, final: str | None, gold: str) -> str:
    if initial == final:
        return UNCHANGED
    ic, fc = initial == gold, final == gold
    if fc and not ic:
        return W2C
    if ic and not fc:
        return C2W
    return W2W


@dataclass
class EvalRecord:
    sample_id: str
    gold: str
    initial_answer: str | None
    final_answer: str | None
    mode: str
    validator_model: str = ""
    claims: list[Claim] = field(default_factory=list)
    validation_report: ValidationReport | None = None
    error: str | None = None
    timing: dict = field(default_factory=dict)

    @property
    def initial_correct(self) -> bool:
        return self.initial_answer == self.gold

    @property
    def final_correct(self) -> bool:
        return self.final_answer == self.gold

    @property
    def revision(self) -> str:
        return revision_of(self.initial_answer, self.final_answer, self.gold)

    def csv_row(self) -> dict:
        return {"sample_id": self.sample_id, "initial_answer": self.initial_answer or "",
                "initial_correct": int(self.initial_correct),
                "final_answer": self.final_answer or "",
                "final_correct": int(self.final_correct), "revision": self.revision,
                "mode": self.mode, "validator_model": self.validator_model}

    def to_dict(self) -> dict:
        """Full record without timing (timings go to the run metadata sidecar)."""
        return {"sample_id": self.sample_id, "gold": self.gold,
                "initial_answer": self.initial_answer, "final_answer": self.final_answer,
                "initial_correct": self.initial_correct, "final_correct": self.final_correct,
                "revision": self.revision, "mode": self.mode,
                "validator_model": self.validator_model,
                "claims": [c.to_dict() for c in self.claims],
                "validation_report": self.validation_report.to_dict()
                if self.validation_report else None,
                "error": self.error}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRecord":
        rep = d.get("validation_report")
        return cls(d["sample_id"], d["gold"], d.get("initial_answer"), d.get("final_answer"),
                   d.get("mode", ""), d.get("validator_model", ""),
                   [Claim.from_dict(c) for c in d.get("claims", [])],
                   ValidationReport.from_dict(rep) if rep else None, d.get("error"))


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "qkg"
    reasoner_role: str = "reasoner"
    validator_role: str = "validator"
    context_role: str | None = None
    judge_role: str | None = None
    turn_budget: int = 20
    answer_retries: int = 2
    iterations: int = 1
    workers: int = 4
    relation_limit: int = 50
    policy: ApplicabilityPolicy = DEFAULT_POLICY

    def __post_init__(self):
        if self.mode not in RUN_MODES:
            raise ValueError(f"mode must be one of {sorted(RUN_MODES)}")
        if self.turn_budget < 0 or self.answer_retries < 0 or self.iterations < 1:
            raise ValueError("turn_budget, answer_retries >= 0 and iterations >= 1 required")


def _choices_text(choices: Mapping[str, str]) -> str:
    return "\n".join(f"({k}) {v}" for k, v in sorted(choices.items()))


def _parse_claims(obj: Mapping) -> list[Claim]:
    claims = []
    for c in obj.get("claims") or []:
        try:
            claims.append(Claim.from_dict(c))
        except (KeyError, ValueError, TypeError) as exc:
            logger.debug("dropping malformed claim %r: %s", c, exc)
    return claims


def _ask_reasoner(gateway: Gateway, role: str, prompt: str, retries: int):
    """(QAResponse, claims) or (None, [], error) after ``retries`` reformat rounds."""
    messages = [{"role": "user", "content": prompt}]
    last = ""
    for _ in range(retries + 1):
        raw = gateway.complete(role, messages)
        try:
            resp = parse_qa_response(raw)
            return resp, _parse_claims(extract_json_object(raw)), None
        except ResponseParseError as exc:
            last = str(exc)
            messages = messages + [{"role": "assistant", "content": raw},
                                   {"role": "user", "content": render_prompt("reformat_v1", error=last)}]
    return None, [], f"unparseable reasoner output: {last}"


def _report_text(report: ValidationReport) -> str:
    lines = []
    for v in report.verdicts:
        stance = "supporting" if v.claim.supports else "eliminating"
        lines.append(f"- option {v.claim.option_label} ({stance}) \"{v.claim.statement}\": "
                     f"{v.status}. Evidence: {v.evidence}")
    return "\n".join(lines)


def answer_question(sample: QASample, gateway: Gateway, config: EvalConfig = EvalConfig(),
                    graph=None, constraint_store: ConstraintStore | None = None) -> EvalRecord:
    """Run the full pipeline for one sample. Never raises for model misbehaviour."""
    vmode = RUN_MODES[config.mode]
    vcfg = gateway.roles.get(config.validator_role) if vmode else None
    rec = EvalRecord(sample.id, sample.gold, None, None, config.mode,
                     vcfg.model if vcfg else "")
    t0 = time.perf_counter()
    base_prompt = render_prompt("reasoner_v1", question=sample.question,
                                choices=_choices_text(sample.choices))
    try:
        resp, claims, err = _ask_reasoner(gateway, config.reasoner_role, base_prompt,
                                          config.answer_retries)
    except GatewayError as exc:
        resp, claims, err = None, [], f"reasoner gateway failure: {exc}"
    rec.timing["reasoner_s"] = time.perf_counter() - t0
    rec.claims = claims
    if resp is None:
        rec.error = err
        return rec
    rec.initial_answer = rec.final_answer = resp.llm_answer_choice
    if vmode is None:
        return rec

    if vmode == QKG:
        context = sample.precomputed_context or extract_patient_context(
            sample.question, gateway, config.context_role)
    else:
        context = None
    answer, current_claims = resp.llm_answer_choice, claims
    for _ in range(config.iterations):
        t1 = time.perf_counter()
        report = validate_claims(current_claims, context, graph, constraint_store, gateway,
                                 role=config.validator_role, mode=vmode,
                                 turn_budget=config.turn_budget, judge_role=config.judge_role,
                                 policy=config.policy, relation_limit=config.relation_limit)
        rec.timing["validator_s"] = rec.timing.get("validator_s", 0.0) + time.perf_counter() - t1
        if rec.validation_report is None:
            rec.validation_report = report
        if not report.has_contradiction:
            break
        t2 = time.perf_counter()
        prompt = render_prompt("reconsider_v1", question=sample.question,
                               choices=_choices_text(sample.choices), initial=answer,
                               report=_report_text(report))
        try:
            new, new_claims, err = _ask_reasoner(gateway, config.reasoner_role, prompt,
                                                 config.answer_retries)
        except GatewayError as exc:
            new, new_claims, err = None, [], f"reconsider gateway failure: {exc}"
        rec.timing["reconsider_s"] = rec.timing.get("reconsider_s", 0.0) + time.perf_counter() - t2
        if new is None:
            rec.final_answer = None
            rec.error = err
            break
        answer, current_claims = new.llm_answer_choice, new_claims
        rec.final_answer = answer
    return rec


# ---- per-sample CSV ----

def _as_bool(v) -> bool:
    return str(v).strip().lower() in ("1", "true", "yes")


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for r in reader:
            r = dict(r)
            r["initial_correct"] = _as_bool(r["initial_correct"])
            r["final_correct"] = _as_bool(r["final_correct"])
            rows.append(r)
    return rows


def write_results_csv(rows: Iterable[Mapping], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            out = {k: r[k] for k in CSV_COLUMNS}
            out["initial_correct"] = int(bool(out["initial_correct"]))
            out["final_correct"] = int(bool(out["final_correct"]))
            w.writerow(out)


@dataclass(frozen=True)
class RunSummary:
    n: int
    initial_correct: int
    final_correct: int
    revised: int
    w2c: int
    c2w: int
    w2w_changed: int
    mode: str = ""
    roles: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.final_correct != self.initial_correct + self.w2c - self.c2w:
            raise ValueError("accounting identity violated: final != initial + W->C - C->W")

    @property
    def initial_accuracy(self) -> float:
        return self.initial_correct / self.n if self.n else 0.0

    @property
    def final_accuracy(self) -> float:
        return self.final_correct / self.n if self.n else 0.0

    @property
    def revised_pct(self) -> float:
        return round(100.0 * self.revised / self.n, 2) if self.n else 0.0

    def to_dict(self) -> dict:
        return {"csv_schema_version": CSV_SCHEMA_VERSION, "n": self.n,
                "initial_correct": self.initial_correct, "final_correct": self.final_correct,
                "initial_accuracy": round(self.initial_accuracy, 6),
                "final_accuracy": round(self.final_accuracy, 6),
                "revised": self.revised, "revised_pct": self.revised_pct,
                "w2c": self.w2c, "c2w": self.c2w, "w2w_changed": self.w2w_changed,
                "mode": self.mode, "roles": dict(self.roles)}


def summarize(rows: Sequence[Mapping], mode: str = "", roles: Mapping[str, str] | None = None) -> RunSummary:
    revs = [r["revision"] for r in rows]
    unknown = set(revs) - set(REVISIONS)
    if unknown:
        raise ValueError(f"unknown revision labels {sorted(unknown)}")
    return RunSummary(
        n=len(rows),
        initial_correct=sum(bool(r["initial_correct"]) for r in rows),
        final_correct=sum(bool(r["final_correct"]) for r in rows),
        revised=sum(v != UNCHANGED for v in revs),
        w2c=revs.count(W2C), c2w=revs.count(C2W), w2w_changed=revs.count(W2W),
        mode=mode, roles=dict(roles or {}))


def run_evaluation(samples: Sequence[QASample], gateway: Gateway, config: EvalConfig,
                   out_dir, graph=None, constraint_store: ConstraintStore | None = None,
                   resume: bool = True) -> RunSummary:
    """Evaluate ``samples`` into ``out_dir`` (results.csv, records.jsonl, summary.json).

    Completed sample ids already in ``results.csv`` are skipped when resuming.
    Files are rewritten in dataset order at the end so reruns are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, rec_path = out / "results.csv", out / "records.jsonl"
    order = {s.id: i for i, s in enumerate(samples)}
    rows: dict[str, dict] = {}
    recs: dict[str, str] = {}
    if resume and csv_path.exists():
        for r in read_results_csv(csv_path):
            if r["sample_id"] in order:
                rows[r["sample_id"]] = r
        if rec_path.exists():
            with open(rec_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        sid = json.loads(line)["sample_id"]
                        if sid in rows:
                            recs[sid] = line.rstrip("\n")
        logger.info("resuming: %d samples already done", len(rows))
    else:
        for p in (csv_path, rec_path):
            p.unlink(missing_ok=True)

    todo = [s for s in samples if s.id not in rows]
    lock = threading.Lock()
    timings: dict[str, dict] = {}
    new_file = not csv_path.exists()
    csv_fh = open(csv_path, "a", newline="", encoding="utf-8")
    rec_fh = open(rec_path, "a", encoding="utf-8")
    writer = csv.DictWriter(csv_fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    if new_file:
        writer.writeheader()

    def work(sample: QASample):
        try:
            rec = answer_question(sample, gateway, config, graph, constraint_store)
        except Exception as exc:  # a broken sample must not stop the run
            logger.exception("sample %s failed", sample.id)
            rec = EvalRecord(sample.id, sample.gold, None, None, config.mode,
                             error=f"{type(exc).__name__}: {exc}")
        row = rec.csv_row()
        line = json.dumps(rec.to_dict(), ensure_ascii=False)
        with lock:
            writer.writerow(row)
            rec_fh.write(line + "\n")
            csv_fh.flush()
            rec_fh.flush()
            rows[sample.id] = row
            recs[sample.id] = line
            timings[sample.id] = rec.timing

    try:
        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
            list(pool.map(work, todo))
    finally:
        csv_fh.close()
        rec_fh.close()

    ordered = sorted(rows, key=order.__getitem__)
    write_results_csv([rows[i] for i in ordered], csv_path)
    with open(rec_path, "w", encoding="utf-8") as fh:
        for sid in ordered:
            if sid in recs:
                fh.write(recs[sid] + "\n")
    roles = {name: cfg.model for name, cfg in sorted(gateway.roles.items())}
    summary = summarize([rows[i] for i in ordered], config.mode, roles)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n", encoding="utf-8")
    meta_path = out / "run_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"timings": {}}
    meta["timings"].update(timings)
    meta["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return summary


# ---- paired comparison ----

@dataclass(frozen=True)
class PairedTable:
    pairs: Mapping[str, tuple[bool, bool]]
    b: int
    c: int
    only_in_a: frozenset[str] = frozenset()
    only_in_b: frozenset[str] = frozenset()

    @property
    def n(self) -> int:
        return len(self.pairs)


def paired_table(a: Mapping[str, bool], b: Mapping[str, bool]) -> PairedTable:
    common = [k for k in a if k in b]
    if not common:
        raise ValueError("runs share no sample ids")
    only_a, only_b = frozenset(a) - frozenset(b), frozenset(b) - frozenset(a)
    if only_a or only_b:
        warnings.warn(f"runs differ in sample ids: {len(only_a)} only in A, {len(only_b)} only in B; "
                      f"using the {len(common)}-sample intersection", stacklevel=2)
    pairs = {k: (bool(a[k]), bool(b[k])) for k in common}
    nb = sum(1 for x, y in pairs.values() if x and not y)
    nc = sum(1 for x, y in pairs.values() if y and not x)
    return PairedTable(pairs, nb, nc, only_a, only_b)


def compare_runs(run_a, run_b, column_a: str = "final_correct",
                 column_b: str = "final_correct") -> PairedTable:
    """Pair two per-sample CSVs (paths or row lists) on sample id.

    ``b`` counts samples correct in A and wrong in B, ``c`` the reverse. Use
    the same run with ``initial_correct``/``final_correct`` for the
    reasoner-only vs validated comparison.
    """
    rows_a = read_results_csv(run_a) if isinstance(run_a, (str, Path)) else run_a
    rows_b = read_results_csv(run_b) if isinstance(run_b, (str, Path)) else run_b
    return paired_table({r["sample_id"]: bool(r[column_a]) for r in rows_a},
                        {r["sample_id"]: bool(r[column_b]) for r in rows_b})
