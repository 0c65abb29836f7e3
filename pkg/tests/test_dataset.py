import json
import random

import numpy as np
import pytest

from conftest import gateway_for, make_graph, random_graph
from oracles import onehop_edges
from qkg.context import PatientContext
from qkg.dataset import (CandidateSample, CosineConceptIndex, GroundedEntity, HierarchyCycleError,
                         TableEmbedder, align_to_kg, enumerate_onehop_paths, ground_entities,
                         load_hierarchy, load_vectors, rank_and_filter, read_candidates, source_histogram,
                         stage1, stage2, stage3, stage4, write_candidates)
from qkg.pipeline import QASample


def _sample(i, question="A 40-year-old man with fever.", source=None):
    return QASample(f"q{i:02d}", question, {"A": "x", "B": "y"}, "A", source=source)


# ---- grounding ---------------------------------------------------------------


def test_cosine_identity_scores_one():
    vecs = np.array([[1.0, 0, 0], [0, 2.0, 0], [1, 1, 0]])
    idx = CosineConceptIndex(["c0", "c1", "c2"], vecs)
    cid, score = idx.lookup_vector([0, 5, 0])[0]
    assert cid == "c1" and score == pytest.approx(1.0)


def test_cosine_ranking_matches_bruteforce():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(5, 8))
    idx = CosineConceptIndex([f"c{i}" for i in range(5)], vecs)
    for _ in range(20):
        q = rng.normal(size=8)
        sims = [float(v @ q / np.linalg.norm(v) / np.linalg.norm(q)) for v in vecs]
        expect = sorted(range(5), key=lambda i: (-sims[i], i))
        got = idx.lookup_vector(q, k=5)
        assert [c for c, _ in got] == [f"c{i}" for i in expect]
        assert [s for _, s in got] == pytest.approx([sims[i] for i in expect])


def test_cosine_ties_break_by_row():
    idx = CosineConceptIndex(["b", "a"], [[1.0, 0], [2.0, 0]])
    assert [c for c, _ in idx.lookup_vector([1, 0], 2)] == ["b", "a"]


def test_cosine_zero_vectors():
    with pytest.raises(ValueError):
        CosineConceptIndex(["a"], [[0.0, 0.0]])
    assert CosineConceptIndex(["a"], [[1.0, 0.0]]).lookup_vector([0, 0]) == []


def test_ground_entities_with_table_embedder():
    idx = CosineConceptIndex(["C1", "C2"], [[1.0, 0], [0, 1.0]],
                             TableEmbedder(["Fever", "cough"], np.array([[1.0, 0.1], [0.2, 1.0]])))
    out = ground_entities(["fever ", "Cough", "unknown thing"], idx, min_score=0.9)
    assert [g.concept_id for g in out] == ["C1", "C2", None]
    assert ground_entities([], idx) == []
    with pytest.raises(ValueError):
        ground_entities(["x"], None)


def test_ground_entities_below_threshold_unresolved():
    idx = CosineConceptIndex(["C1"], [[1.0, 0]], lambda t: [1.0, 1.0])
    (g,) = ground_entities(["x"], idx, min_score=0.9)
    assert g.concept_id is None and g.score == pytest.approx(0.7071, abs=1e-4)


def test_load_vectors(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text('{"id": "a", "vector": [1, 2]}\n\n{"text": "b", "vector": [3, 4]}\n')
    ids, mat = load_vectors(p)
    assert ids == ["a", "b"] and mat.shape == (2, 2)
    p.write_text('{"id": "a", "vector": [1, 2]}\n{"id": "b", "vector": [3]}\n')
    with pytest.raises(ValueError, match="dimension"):
        load_vectors(p)


# ---- alignment ---------------------------------------------------------------


@pytest.fixture
def small_store():
    return make_graph(["n0", "n1", "n2", "n3"], [(0, "a", 1), (1, "a", 2), (2, "b", 3)])


def _g(cid):
    return GroundedEntity(cid, cid, 1.0)


def test_align_direct_hierarchy_and_unaligned(small_store):
    hier = {"CHILD": ["MID"], "MID": ["ID2"], "ORPHAN": ["NOWHERE"]}
    out = align_to_kg([_g("ID1"), _g("TEST:ID3"), _g("CHILD"), _g("ORPHAN"),
                       GroundedEntity("x", None)], small_store, hier)
    assert [(g.kg_index, g.method) for g in out] == [(1, "direct"), (3, "direct"), (2, "hierarchy"),
                                                     (None, None), (None, None)]
    assert out[2].matched_concept == "ID2"


def test_align_prefers_direct(small_store):
    (g,) = align_to_kg([_g("ID0")], small_store, {"ID0": ["ID1"]})
    assert g.kg_index == 0 and g.method == "direct"


def test_align_xref_map(small_store):
    (g,) = align_to_kg([_g("MONDO:1")], small_store, xref={"MONDO:1": 3})
    assert g.kg_index == 3


def test_align_cycle_raises(small_store):
    with pytest.raises(HierarchyCycleError, match="LOOP"):
        align_to_kg([_g("LOOP")], small_store, {"LOOP": ["P"], "P": ["LOOP"]})


def test_align_shared_ancestor_is_not_a_cycle(small_store):
    (g,) = align_to_kg([_g("X")], small_store, {"X": ["L", "R"], "L": ["Z"], "R": ["Z"], "Z": ["ID3"]})
    assert g.kg_index == 3 and g.method == "hierarchy"


def test_grounded_entity_invariant():
    with pytest.raises(ValueError):
        GroundedEntity("x", "C", 1.0, kg_index=3)


def test_load_hierarchy(tmp_path):
    p = tmp_path / "h.tsv"
    p.write_text("child,parent\nA,B\n# note\nA\tC\n")
    assert load_hierarchy(p) == {"A": ["B", "C"]}


# ---- one-hop paths and ranking -----------------------------------------------


def test_onehop_small_cases(small_store):
    assert enumerate_onehop_paths([], small_store)[0] == 0
    assert enumerate_onehop_paths([1], small_store)[0] == 0
    n, trips = enumerate_onehop_paths([0, 1, 2], small_store)
    assert n == 2 and {(t.head, t.tail) for t in trips} == {(0, 1), (1, 2)}


@pytest.mark.parametrize("seed", range(50))
def test_onehop_matches_oracle(seed):
    rng = random.Random(seed)
    g = random_graph(rng, n_nodes=30, n_edges=80)
    aligned = rng.sample(range(30), rng.randrange(0, 12))
    n, trips = enumerate_onehop_paths(aligned, g)
    expect = onehop_edges(list(g.triplets()), aligned)
    key = lambda t: (t.head, t.relation, t.tail)
    assert n == len(expect) and sorted(map(key, trips)) == sorted(map(key, expect))


def _cand(i, count):
    return CandidateSample(_sample(i), path_count=count)


def test_rank_and_filter_example():
    cands = [_cand(i, c) for i, c in enumerate((3, 0, 2, 2, 1))]
    out = rank_and_filter(cands, 3)
    assert [(c.id, c.path_count) for c in out] == [("q00", 3), ("q02", 2), ("q03", 2)]
    assert rank_and_filter([_cand(0, 0), _cand(1, 0)], 5) == []
    with pytest.raises(ValueError):
        rank_and_filter(cands, 0)


@pytest.mark.parametrize("seed", range(20))
def test_rank_and_filter_properties(seed):
    rng = random.Random(seed)
    cands = [_cand(i, rng.randrange(0, 4)) for i in range(rng.randrange(0, 30))]
    k = rng.randrange(1, 20)
    out = rank_and_filter(rng.sample(cands, len(cands)), k)
    assert all(c in cands and c.path_count > 0 for c in out)
    keys = [(-c.path_count, c.id) for c in out]
    assert keys == sorted(keys) and len(out) == min(k, sum(c.path_count > 0 for c in cands))


# ---- stage drivers -----------------------------------------------------------


def test_stages_end_to_end(small_store, tmp_path):
    vecs = np.eye(4)
    idx = CosineConceptIndex(["ID0", "ID1", "ID2", "ORPH"], vecs,
                             TableEmbedder(["alpha", "beta", "gamma", "delta"], vecs))

    def responder(role, msgs):
        if role == "entity-extractor":
            q = msgs[0]["content"]
            return json.dumps({"entities": ["alpha", "beta", "gamma"] if "rich" in q else ["delta"]})
        raise AssertionError(role)
    gw = gateway_for(responder)
    cands = [CandidateSample(_sample(0, "rich case, 70-year-old woman", source="medqa")),
             CandidateSample(_sample(1, "poor case")),
             CandidateSample(_sample(2, "given list"), entities=("alpha", "beta"))]
    s1 = stage1(cands, idx, gw, "entity-extractor", workers=2)
    assert s1[0].entities == ("alpha", "beta", "gamma") and s1[2].entities == ("alpha", "beta")
    s2 = stage2(s1, small_store)
    assert [g.kg_index for g in s2[0].grounded] == [0, 1, 2]
    write_candidates(s2, tmp_path / "c.jsonl")
    assert read_candidates(tmp_path / "c.jsonl") == s2
    s3 = stage3(s2, small_store, k=10)
    assert [(c.id, c.path_count) for c in s3] == [("q00", 2), ("q02", 1)]
    s4 = stage4(s3)  # no context role: rule fallback
    assert s4[0].kg_grounding == {"matched_entities": [0, 1, 2], "path_count": 2}
    assert s4[0].precomputed_context.age == 70
    assert isinstance(s4[1].precomputed_context, PatientContext)
    assert source_histogram(s4) == {"medqa": 1, "unknown": 1}


def test_stage1_failed_extraction_yields_no_entities():
    idx = CosineConceptIndex(["a"], [[1.0]], lambda t: [1.0])
    (c,) = stage1([CandidateSample(_sample(0))], idx, gateway_for(lambda r, m: "nope"), "entity-extractor")
    assert c.entities == () and c.grounded == ()


def test_stage1_without_role_errors():
    idx = CosineConceptIndex(["a"], [[1.0]], lambda t: [1.0])
    with pytest.raises(ValueError, match="extraction role"):
        stage1([CandidateSample(_sample(0))], idx, None, None)
