import json
import random

import pytest

from conftest import NITROUS_EVIDENCE_A, NITROUS_EVIDENCE_C, gateway_for, make_graph
from qkg.constraints import ConstraintItem, ConstraintStore, TripletKey
from qkg.context import LabValue, PatientContext, parse_patient_context
from qkg.validator import (CONTRADICTED, KG_ONLY, NO_COVERAGE, QKG, SUPPORTED, Claim, ClaimVerdict,
                           ValidationReport, get_relations_with_context, validate_claims)

TPA_CONSTRAINT = ConstraintItem("platelet count < 100,000/mm3", "Definitely Applicable",
                                "AVOID in thrombocytopenia: IV tPA is contraindicated below 100,000/mm3")


@pytest.fixture
def tpa():
    g = make_graph(["alteplase", "thrombocytopenia", "ischemic stroke"],
                   [(0, "contraindication", 1), (0, "indication", 2)],
                   types={0: "drug", 1: "disease", 2: "disease"})
    store = ConstraintStore()
    t = next(t for t in g.triplets() if t.relation == "contraindication")
    store.add(TripletKey.of(g, t), [TPA_CONSTRAINT])
    return g, store


PATIENT = PatientContext(age=67, labs=(LabValue("platelet count", 95000, "/mm3"),))


def test_relations_with_context_qkg(tpa):
    g, store = tpa
    bundle = get_relations_with_context([0], g, store, PATIENT, QKG)
    assert len(bundle) == 2
    contra = next(r for r in bundle.relations if r.triplet.relation == "contraindication")
    assert contra.decision.verdict == "applicable"
    assert contra.decision.matched_constraint == TPA_CONSTRAINT
    assert "AVOID" in json.dumps(contra.to_dict())
    other = next(r for r in bundle.relations if r.triplet.relation == "indication")
    assert other.decision.verdict == "unknown"


def test_relations_kg_only_has_no_decisions(tpa):
    g, store = tpa
    bundle = get_relations_with_context([0], g, store, PATIENT, KG_ONLY)
    assert len(bundle) == 2 and all(r.decision is None for r in bundle.relations)
    assert len(get_relations_with_context([], g, store, PATIENT, QKG)) == 0


def test_relation_filter_and_limit(tpa):
    g, store = tpa
    b = get_relations_with_context([0, 1], g, store, PATIENT, QKG, relation="contraindication")
    assert [r.triplet.relation for r in b.relations] == ["contraindication"]
    b = get_relations_with_context([0], g, store, PATIENT, QKG, limit=1)
    assert len(b) == 1 and b.total == 2


def test_zero_claims(tpa):
    gw = gateway_for(lambda r, m: pytest.fail("no calls"))
    rep = validate_claims([], PATIENT, tpa[0], tpa[1], gw)
    assert rep.verdicts == () and rep.turns == 0


def test_declining_validator_gives_no_coverage(tpa):
    def responder(role, msgs):
        if not any(m["content"].startswith("[tool result]") for m in msgs):
            return json.dumps({"tool": "search_entities", "args": {"query": "unobtainium"}, "claim": 0})
        return json.dumps({"final": [{"claim": 0, "status": "NO_COVERAGE",
                                      "evidence": "no entity found"}]})
    rep = validate_claims([Claim("A", "unobtainium cures stroke")], PATIENT, tpa[0], tpa[1],
                          gateway_for(responder))
    assert rep.verdicts[0].status == NO_COVERAGE
    assert rep.verdicts[0].tool_trace[0].result == "[]"
    assert rep.turns == 2


def test_nitrous_replay(tpa):
    claims = [Claim("C", "Nitrous oxide is contraindicated with prosthetic valves"),
              Claim("A", "Antibiotic prophylaxis is not recommended", supports=False)]
    final = {"final": [{"claim": 0, "status": "CONTRADICTED", "evidence": NITROUS_EVIDENCE_C},
                       {"claim": 1, "status": "CONTRADICTED", "evidence": NITROUS_EVIDENCE_A}]}
    rep = validate_claims(claims, None, tpa[0], None, gateway_for(lambda r, m: json.dumps(final)),
                          mode=KG_ONLY)
    assert [v.status for v in rep.verdicts] == [CONTRADICTED, CONTRADICTED]
    assert rep.verdicts[0].evidence == NITROUS_EVIDENCE_C  # verbatim
    assert rep.has_contradiction


def test_budget_exhaustion(tpa):
    gw = gateway_for(lambda r, m: json.dumps({"tool": "search_entities", "args": {"query": "alteplase"},
                                              "claim": 0}))
    rep = validate_claims([Claim("A", "x"), Claim("B", "y")], PATIENT, tpa[0], tpa[1], gw, turn_budget=5)
    assert rep.turns == 5
    assert all(v.status == NO_COVERAGE for v in rep.verdicts)
    assert "budget" in rep.verdicts[0].evidence
    assert sum(len(v.tool_trace) for v in rep.verdicts) <= 5


def test_malformed_actions_consume_turns(tpa):
    replies = iter(["thinking...", '{"foo": 1}', json.dumps({"final": [
        {"claim": 0, "status": "supported", "evidence": "alteplase indication ischemic stroke"}]})])
    rep = validate_claims([Claim("A", "x")], PATIENT, tpa[0], tpa[1], gateway_for(lambda r, m: next(replies)))
    assert rep.turns == 3 and rep.verdicts[0].status == SUPPORTED


def test_gateway_failure_degrades(tpa):
    from qkg.llm.gateway import TransientError

    def down(role, msgs):
        raise TransientError("503")
    rep = validate_claims([Claim("A", "x")], PATIENT, tpa[0], tpa[1], gateway_for(down))
    assert rep.verdicts[0].status == NO_COVERAGE
    assert "gateway failure" in rep.verdicts[0].evidence


def test_verdict_without_evidence_downgraded(tpa):
    gw = gateway_for(lambda r, m: json.dumps({"final": [{"claim": 0, "status": "CONTRADICTED"}]}))
    rep = validate_claims([Claim("A", "x")], PATIENT, tpa[0], tpa[1], gw)
    assert rep.verdicts[0].status == NO_COVERAGE


def test_verdict_invariant():
    with pytest.raises(ValueError):
        ClaimVerdict(Claim("A", "x"), SUPPORTED, " ")
    with pytest.raises(ValueError):
        Claim("Z", "x")


def test_qkg_prompt_carries_context(tpa):
    seen = []

    def responder(role, msgs):
        seen.append(msgs[1]["content"])
        return json.dumps({"final": []})
    validate_claims([Claim("A", "x")], PATIENT, tpa[0], tpa[1], gateway_for(responder), mode=QKG)
    validate_claims([Claim("A", "x")], PATIENT, tpa[0], tpa[1], gateway_for(responder), mode=KG_ONLY)
    assert "95000" in seen[0] and "95000" not in seen[1]


def test_report_json_round_trip(tpa):
    def responder(role, msgs):
        if len(msgs) == 2:
            return json.dumps({"tool": "get_relations_with_context", "args": {"entities": [0]}, "claim": 0})
        return json.dumps({"final": [{"claim": 0, "status": "CONTRADICTED", "evidence": "AVOID: platelets"}]})
    rep = validate_claims([Claim("A", "give tPA")], PATIENT, tpa[0], tpa[1], gateway_for(responder))
    assert "not_applicable" not in rep.verdicts[0].tool_trace[0].result
    assert ValidationReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep


def _random_context(rng):
    return PatientContext(age=rng.choice([None, 30, 70]), sex=rng.choice([None, "female", "male"]),
                          diagnoses=tuple(rng.sample(["ckd", "afib", "copd"], rng.randrange(3))),
                          labs=tuple(LabValue(n, rng.uniform(1, 200000), "") for n in
                                     rng.sample(["egfr", "platelet count", "glucose"], rng.randrange(3))),
                          medications=tuple(rng.sample(["warfarin", "aspirin"], rng.randrange(2))))


def _echo_validator(role, msgs):
    """Deterministic validator whose verdicts depend on everything it is shown."""
    tool_turns = sum(1 for m in msgs if m["content"].startswith("[tool result]"))
    if tool_turns == 0:
        return json.dumps({"tool": "get_relations_with_context", "args": {"entities": [0, 1]}, "claim": 0})
    text = "".join(m["content"] for m in msgs)
    status = "CONTRADICTED" if len(text) % 2 else "SUPPORTED"
    return json.dumps({"final": [{"claim": 0, "status": status, "evidence": f"seen {len(text)} chars"}]})


@pytest.mark.parametrize("seed", range(20))
def test_kg_only_is_context_blind(tpa, seed):
    rng = random.Random(seed)
    g, store = tpa
    claims = [Claim("A", "alteplase treats stroke")]
    contexts = [None] + [_random_context(rng) for _ in range(5)]
    reports = {json.dumps(validate_claims(claims, ctx, g, store, gateway_for(_echo_validator),
                                          mode=KG_ONLY).to_dict()) for ctx in contexts}
    assert len(reports) == 1


def test_qkg_mode_is_context_sensitive(tpa):
    # the same scripted validator does see context in qkg mode, so the blindness test has teeth
    g, store = tpa
    claims = [Claim("A", "alteplase treats stroke")]
    a, b = (validate_claims(claims, ctx, g, store, gateway_for(_echo_validator), mode=QKG).to_dict()
            for ctx in (PATIENT, PatientContext()))
    assert a != b
