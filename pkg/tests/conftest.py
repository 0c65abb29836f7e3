"""Shared fixtures: tiny graphs and scripted LLM gateways."""

from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from qkg.kg.store import EntityRecord, EntityType, GraphStore
from qkg.llm.gateway import Gateway, MockBackend, RoleConfig

DATA = Path(__file__).parent / "data"

TYPES = list(EntityType)

# criterion number -> PASS/FAIL/SKIP line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def make_graph(names, edges, *, types=None, start=0):
    """GraphStore from a name list and (head_pos, relation, tail_pos) edges."""
    ents = []
    for i, name in enumerate(names):
        etype = (types or {}).get(i, TYPES[i % len(TYPES)])
        ents.append(EntityRecord(start + i, f"ID{start + i}", "TEST", EntityType(etype), name))
    return GraphStore(ents, [start + h for h, _, _ in edges], [r for _, r, _ in edges],
                      [start + t for _, _, t in edges])


def random_graph(rng: random.Random, n_nodes=30, n_edges=60, relations=("a", "b", "c"),
                 self_loops=True):
    edges = []
    for _ in range(n_edges):
        h, t = rng.randrange(n_nodes), rng.randrange(n_nodes)
        if h == t and not self_loops:
            continue
        edges.append((h, rng.choice(relations), t))
    return make_graph([f"node {i}" for i in range(n_nodes)], edges)


def gateway_for(responder, roles=("reasoner", "validator", "annotator", "patient-context-llm",
                                  "judge", "entity-extractor"), **kw):
    retries = kw.pop("max_retries", 0)
    cfgs = {r: RoleConfig(r, model=f"mock-{r}", max_retries=retries) for r in roles}
    return Gateway(cfgs, MockBackend(responder=responder), sleep=lambda s: None, **kw)


def qa_json(letter, text="", claims=()):
    return json.dumps({"llm_answer_choice": letter, "selected_option_text": text,
                       "reasoning": "r", "claims": list(claims)})


def is_reconsider(messages):
    return "A validator checked the claims" in messages[0]["content"]


class VaccineResponder:
    """Scripted reasoner/validator mirroring a wrong-to-correct vaccine revision.

    The reasoner picks B and claims D should be eliminated; the validator marks
    the D-elimination claim CONTRADICTED (or NO_COVERAGE when
    ``contradict=False``); reconsideration switches to D.
    """

    EVIDENCE_D = ("KG contains 'Varicella Zoster Vaccine' entities (indices 20940, etc.) but no "
                  "scheduling data. Medically, this claim incorrectly eliminates D. For a 62-year-old "
                  "who has never received the shingles vaccine, RZV is a high-priority, age-based "
                  "preventive recommendation.")
    EVIDENCE_B = ("KG contains 'influenza' disease entity (index 37766) but lacks explicit vaccination "
                  "schedule, age-threshold, or dosing-interval relations.")

    def __init__(self, contradict=True):
        self.contradict = contradict

    def __call__(self, role, messages):
        if role == "reasoner":
            if is_reconsider(messages):
                return qa_json("D", "Shingles vaccine")
            return qa_json("B", "Influenza vaccine", [
                {"option_label": "B", "statement": "Influenza vaccine is overdue", "supports": True},
                {"option_label": "D", "statement": "Shingles vaccine is less urgent", "supports": False},
            ])
        if role == "validator":
            n_tool = sum(1 for m in messages if m["content"].startswith("[tool result]"))
            if n_tool == 0:
                return json.dumps({"tool": "search_entities",
                                   "args": {"query": "Varicella Zoster Vaccine"}, "claim": 1})
            status = "CONTRADICTED" if self.contradict else "NO_COVERAGE"
            return json.dumps({"final": [
                {"claim": 0, "status": "NO_COVERAGE", "evidence": self.EVIDENCE_B},
                {"claim": 1, "status": status, "evidence": self.EVIDENCE_D},
            ]})
        raise AssertionError(f"unexpected role {role}")


VACCINE_QUESTION = (
    "A 62-year-old woman is seen in June for a routine check-up. Past history includes "
    "appendectomy, chronic back pain, normal mammogram 6 months ago. Her immunisation record "
    "shows: never received pneumococcal or shingles vaccine; last tetanus booster 6 years ago; "
    "last influenza vaccine 2 years ago. Vitals are within normal limits.")
VACCINE_CHOICES = {"A": "Colonoscopy", "B": "Influenza vaccine", "C": "Tetanus vaccine",
                  "D": "Shingles vaccine"}

NITROUS_EVIDENCE_C = (
    "KG query for Nitrous oxide (DB06690) contraindications returned an empty list. No edges link "
    "nitrous oxide to prosthetic valves or valve dysfunction. Medically, nitrous oxide is "
    "contraindicated in closed gas-filled spaces (e.g., pneumothorax, bowel obstruction, "
    "intraocular gas), not in solid/metallic prosthetic heart valves. The claim is factually incorrect.")
NITROUS_EVIDENCE_A = (
    "KG search for Amoxicillin (DB01060) indications lists various bacterial infections but contains "
    "no clinical guideline or prophylaxis protocol data. Medically, AHA guidelines explicitly "
    "RECOMMEND antibiotic prophylaxis for patients with prosthetic cardiac valves undergoing dental "
    "procedures involving gingival manipulation. The claim incorrectly states it is not recommended.")


@pytest.fixture
def vaccine_graph():
    names = ["Varicella Zoster Vaccine", "herpes zoster", "influenza", "Influenza vaccine",
             "Nitrous oxide", "Tetanus toxoid"]
    edges = [(0, "indication", 1), (3, "indication", 2), (5, "indication", 1), (4, "drug_effect", 2)]
    types = {0: "drug", 1: "disease", 2: "disease", 3: "drug", 4: "drug", 5: "drug"}
    return make_graph(names, edges, types=types)
