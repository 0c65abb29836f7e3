import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import VACCINE_QUESTION, NITROUS_EVIDENCE_A, NITROUS_EVIDENCE_C, VaccineResponder, gateway_for
from oracles import mcnemar_enumerated
from qkg.pipeline import C2W, W2C, EvalRecord
from qkg.stats.leakage import (CaseClass, CaseLabel, EvidenceLabel, adjusted_accuracy, adjustment_counts,
                               class_counts, classify_case, classify_labels, decisive_items,
                               detect_signals, excluded_ids, label_evidence,
                               leakage_adjusted_paired_test, read_classification_csv,
                               relabel_unclassified, write_classification_csv)
from qkg.stats.mcnemar import format_p, mcnemar_exact
from qkg.validator import Claim, ClaimVerdict, ValidationReport

# ---- McNemar -----------------------------------------------------------------


@pytest.mark.parametrize("b,c,expected", [
    (39, 22, "0.04"), (55, 16, "3.8e-06"), (65, 70, "0.73"), (33, 52, "0.05"), (5, 0, "0.062"),
    (1, 1, "1.0"), (0, 0, "1.0"),
])
def test_mcnemar_reported_values(b, c, expected):
    assert format_p(mcnemar_exact(b, c)) == expected


def test_mcnemar_precise_values():
    assert mcnemar_exact(39, 22) == pytest.approx(0.0396, abs=5e-5)
    assert mcnemar_exact(33, 52) == pytest.approx(0.0503, abs=5e-5)
    assert mcnemar_exact(5, 0) == 0.0625
    assert mcnemar_exact(55, 16) == pytest.approx(3.75e-6, rel=0.02)


@pytest.mark.parametrize("b", range(0, 9))
@pytest.mark.parametrize("c", range(0, 8))
def test_mcnemar_matches_enumeration(b, c):
    assert mcnemar_exact(b, c) == pytest.approx(mcnemar_enumerated(b, c), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 400), st.integers(0, 400))
def test_mcnemar_symmetric_and_bounded(b, c):
    p = mcnemar_exact(b, c)
    assert p == mcnemar_exact(c, b) and 0 < p <= 1


def test_mcnemar_rejects_negative():
    with pytest.raises(ValueError):
        mcnemar_exact(-1, 3)


# ---- adjusted accuracy -------------------------------------------------------


def test_adjusted_accuracy_reported():
    assert adjusted_accuracy(2321, 2788, 60, 0) == 0.8288
    # exact rational is 2272/2713 = 0.837449..., one unit below the 0.8375 target
    assert adjusted_accuracy(2327, 2788, 55, 20) == pytest.approx(0.8375, abs=1e-4)


@pytest.mark.parametrize("raw,count", [(0.8325, 2321), (0.8346, 2327)])
def test_final_correct_reconstruction(raw, count):
    assert round(raw * 2788) == count
    assert round(100 * count / 2788, 2) == round(100 * raw, 2)


def test_adjusted_accuracy_decreases_with_leakage():
    for fc in (1500, 2000, 2321):
        vals = [adjusted_accuracy(fc, 2788, k, 10) for k in range(0, 200, 5)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adjusted_accuracy_edges():
    assert adjusted_accuracy(50, 50, 0, 0) == 1.0
    assert adjusted_accuracy(0, 10, 0, 0) == 0.0
    for args in [(5, 10, 6, 0), (5, 10, 5, 5), (5, 10, -1, 0), (5, 10, 0, -1)]:
        with pytest.raises(ValueError):
            adjusted_accuracy(*args)


# ---- evidence labelling ------------------------------------------------------


def test_nitrous_evidence_is_leakage():
    for ev in (NITROUS_EVIDENCE_C, NITROUS_EVIDENCE_A):
        s = detect_signals(ev)
        assert s.kg_gap and s.parametric and not s.context
        assert label_evidence(ev) is EvidenceLabel.LEAKAGE


def test_vaccine_case_evidence_is_leakage():
    assert label_evidence(VaccineResponder.EVIDENCE_D) is EvidenceLabel.LEAKAGE


@pytest.mark.parametrize("text,label", [
    ("Constraint for this relation says AVOID in renal impairment.", EvidenceLabel.CONTEXT),
    ("KG confirms an indication relation between metformin and T2DM.", EvidenceLabel.KG_GROUNDED),
    ("Medically, this is the standard of care.", EvidenceLabel.LEAKAGE),
    ("The drug is commonly used.", EvidenceLabel.UNCLASSIFIED),
    ("KG lacks the relevant edges.", EvidenceLabel.UNCLASSIFIED),
])
def test_label_examples(text, label):
    assert label_evidence(text) is label


def test_context_takes_precedence():
    text = "KG confirms the relation; Medically, AVOID use here. KG lacks dosing data."
    s = detect_signals(text)
    assert s.context and s.kg_support and s.kg_gap and s.parametric
    assert label_evidence(text) is EvidenceLabel.CONTEXT


def test_context_markers_are_case_sensitive():
    text = "Guidance is to avoid; evidence-based applicability for this trial is unclear."
    assert not detect_signals(text).context


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=80), st.sampled_from(["AVOID", "RECOMMENDED", "CAUTION", "ConstraintItem",
                                              "safety judgment"]))
def test_adding_context_token_moves_only_to_context(text, token):
    assert label_evidence(f"{text} {token} ") is EvidenceLabel.CONTEXT


def test_gap_and_parametric_beats_support():
    assert label_evidence("KG confirms X but KG lacks Y. Clinically, Z.") is EvidenceLabel.LEAKAGE


def test_parametric_with_support_only_is_grounded():
    assert label_evidence("KG confirms the link. Medically, consistent.") is EvidenceLabel.KG_GROUNDED


@pytest.mark.parametrize("labels,expected", [
    ({EvidenceLabel.KG_GROUNDED}, (CaseClass.LIKELY_KG_SUPPORTED, False)),
    ({EvidenceLabel.CONTEXT}, (CaseClass.LIKELY_KG_SUPPORTED, True)),
    ({EvidenceLabel.CONTEXT, EvidenceLabel.LEAKAGE}, (CaseClass.MIXED, True)),
    ({EvidenceLabel.LEAKAGE, EvidenceLabel.UNCLASSIFIED}, (CaseClass.LIKELY_LEAKAGE, False)),
    ({EvidenceLabel.UNCLASSIFIED}, (CaseClass.UNCLASSIFIED, False)),
    (set(), (CaseClass.UNCLASSIFIED, False)),
])
def test_classify_labels(labels, expected):
    assert classify_labels(labels) == expected


# ---- decisive items and case classification ----------------------------------


def _verdict(label, supports, status, evidence="e"):
    return ClaimVerdict(Claim(label, "s", supports), status, evidence)


def _report(*verdicts):
    return ValidationReport(tuple(verdicts), turns=3, mode="kg_only")


def test_decisive_items_rules():
    v_sup_init = _verdict("B", True, "CONTRADICTED")
    v_elim_target = _verdict("D", False, "CONTRADICTED")
    v_other = _verdict("A", False, "CONTRADICTED")
    v_ok = _verdict("B", True, "SUPPORTED")
    rep = _report(v_sup_init, v_elim_target, v_other, v_ok)
    assert decisive_items(rep, "B", "D") == [v_sup_init, v_elim_target]
    # no qualifying item: fall back to every CONTRADICTED verdict
    assert decisive_items(rep, "C", "C") == [v_sup_init, v_elim_target, v_other]
    assert decisive_items(_report(v_ok), "B", "D") == []


def test_classify_nitrous_leakage():
    rep = _report(_verdict("C", False, "CONTRADICTED", NITROUS_EVIDENCE_C),
                  _verdict("A", False, "CONTRADICTED", NITROUS_EVIDENCE_A))
    rec = EvalRecord("qa_nitrous", "A", "C", "A", "kg_only", validation_report=rep)
    case = classify_case(rec)
    assert case.direction == W2C and case.label is CaseClass.LIKELY_LEAKAGE and not case.ctx_driven


def test_classify_vaccine_leakage(vaccine_graph):
    from qkg.pipeline import EvalConfig, QASample, answer_question
    from conftest import VACCINE_CHOICES
    rec = answer_question(QASample("qa_9542", VACCINE_QUESTION, VACCINE_CHOICES, "D"),
                          gateway_for(VaccineResponder()), EvalConfig(mode="kg"), vaccine_graph)
    case = classify_case(rec)
    assert case.label is CaseClass.LIKELY_LEAKAGE


def test_classify_c2w_context_driven():
    rep = _report(_verdict("A", True, "CONTRADICTED", "ConstraintItem says CAUTION for elderly."))
    rec = EvalRecord("s1", "A", "A", "B", "qkg_with_context", validation_report=rep)
    case = classify_case(rec)
    assert case.direction == C2W and case.label is CaseClass.LIKELY_KG_SUPPORTED and case.ctx_driven


def test_classify_requires_report():
    with pytest.raises(ValueError):
        classify_case(EvalRecord("s", "A", "B", "A", "none"))


def test_ctx_driven_requires_support_class():
    with pytest.raises(ValueError):
        CaseLabel("s", W2C, CaseClass.LIKELY_LEAKAGE, ctx_driven=True)


# ---- relabelling -------------------------------------------------------------


def _cases():
    return [CaseLabel("a", W2C, CaseClass.UNCLASSIFIED, False),
            CaseLabel("b", W2C, CaseClass.LIKELY_LEAKAGE, False),
            CaseLabel("c", C2W, CaseClass.UNCLASSIFIED, False)]


def test_relabel_only_unclassified():
    seen = []

    def responder(role, msgs):
        seen.append(msgs[0]["content"])
        return json.dumps({"label": "LikelyLeakage", "justification": "relies on  prior\nknowledge"})
    out = relabel_unclassified(_cases(), {"a": ["ev a"], "c": ["ev c"]}, gateway_for(responder))
    assert len(seen) == 2
    assert [c.label for c in out] == [CaseClass.LIKELY_LEAKAGE] * 3
    assert out[0].label_source == "llm" and out[0].regex_label is CaseClass.UNCLASSIFIED
    assert out[0].justification == "relies on prior knowledge"
    assert out[1] == _cases()[1]


def test_relabel_no_unclassified_makes_no_calls():
    cases = [CaseLabel("b", W2C, CaseClass.LIKELY_LEAKAGE, False)]
    out = relabel_unclassified(cases, {}, gateway_for(lambda r, m: pytest.fail("called")))
    assert out == cases


def test_relabel_failure_flags_case():
    out = relabel_unclassified(_cases(), {}, gateway_for(lambda r, m: "not json at all"))
    assert out[0].flagged and out[0].label is CaseClass.UNCLASSIFIED
    assert "relabel failed" in out[0].justification


# ---- CSV, counts, adjusted test ----------------------------------------------


def test_classification_csv_roundtrip(tmp_path):
    cases = [CaseLabel("a", W2C, CaseClass.UNCLASSIFIED, False, CaseClass.MIXED, "llm", "why, so"),
             CaseLabel("b", C2W, CaseClass.LIKELY_KG_SUPPORTED, True)]
    p = tmp_path / "c.csv"
    write_classification_csv(cases, p)
    assert p.read_text().splitlines()[0] == ("sample_id,direction,regex_label,llm_label,label_source,"
                                             "ctx_driven,justification")
    assert read_classification_csv(p) == cases


def test_class_counts_and_adjustment():
    cases = [CaseLabel("1", W2C, CaseClass.LIKELY_LEAKAGE, False),
             CaseLabel("2", W2C, CaseClass.LIKELY_KG_SUPPORTED, True),
             CaseLabel("3", W2C, CaseClass.MIXED, True),
             CaseLabel("4", C2W, CaseClass.LIKELY_KG_SUPPORTED, True),
             CaseLabel("5", C2W, CaseClass.LIKELY_KG_SUPPORTED, False),
             CaseLabel("6", C2W, CaseClass.UNCLASSIFIED, False, CaseClass.LIKELY_LEAKAGE, "llm")]
    assert class_counts(cases, W2C) == {"kg_supported": 1, "mixed": 1, "leakage": 1,
                                        "unclassified": 0, "ctx": 1}
    assert class_counts(cases, C2W)["leakage"] == 1
    assert adjustment_counts(cases) == (1, 1)
    assert excluded_ids(cases) == {"1", "4"}


def test_adjusted_paired_test():
    a = {"1": False, "2": True, "3": True, "4": False}
    b = {"1": True, "2": False, "3": True, "4": True}
    plain = leakage_adjusted_paired_test(a, b, [], [])
    assert (plain.b, plain.c, plain.p_value) == (1, 2, mcnemar_exact(1, 2))
    labels = [CaseLabel(k, W2C, CaseClass.LIKELY_LEAKAGE, False) for k in ("1", "2", "4")]
    adj = leakage_adjusted_paired_test(a, b, labels, [])
    assert (adj.n, adj.b, adj.c, adj.p_value) == (1, 0, 0, 1.0)
