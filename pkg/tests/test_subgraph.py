import random

import numpy as np
import pytest

from conftest import make_graph, random_graph
from oracles import two_layer_closure
from qkg.kg.store import EntityRecord, EntityType, GraphStore, UnknownEntityError
from qkg.kg.subgraph import build_subgraph, extract_direct_layer, extract_indirect_layer, find_entity


def test_isolated_target():
    g = make_graph(["t", "x"], [(1, "r", 1)])
    ids, e1 = extract_direct_layer(g, 0)
    assert len(ids) == 0 and e1 == frozenset()
    assert len(extract_indirect_layer(g, e1)) == 0


def test_star():
    g = make_graph(["c", "a", "b", "d", "e"], [(0, "r", i) for i in range(1, 5)])
    ids, e1 = extract_direct_layer(g, 0)
    assert len(ids) == 4 and e1 == {1, 2, 3, 4}
    sub = build_subgraph(g, 0)
    assert sub.direct_triplets == sub.indirect_triplets == set(g.triplets())


def test_self_loop_adds_nothing_to_e1():
    g = make_graph(["t", "a"], [(0, "r", 0), (0, "r", 1)])
    _, e1 = extract_direct_layer(g, 0)
    assert e1 == {1}


def test_unknown_target():
    g = make_graph(["t"], [])
    with pytest.raises(UnknownEntityError):
        build_subgraph(g, 7)


@pytest.mark.parametrize("seed", range(50))
def test_matches_set_algebra(seed):
    rng = random.Random(seed)
    g = random_graph(rng, 30, rng.randrange(10, 90))
    target = rng.randrange(30)
    direct, e1, indirect, merged = two_layer_closure(list(g.triplets()), target)
    sub = build_subgraph(g, target)
    assert sub.direct_triplets == direct
    assert sub.intermediate_entities == e1
    assert sub.indirect_triplets == indirect
    assert set(sub.merged.triplets()) == merged
    assert len(sub.merged) <= len(direct) + len(indirect)
    ents = set(sub.merged.entities)
    assert all(x == target or x in e1 or any(t.head in e1 or t.tail in e1 for t in sub.merged.neighbors(x))
               for x in ents)
    # extraction from the merged store keeps the direct layer
    assert build_subgraph(sub.merged, target).direct_triplets == direct


def test_stats_report_both_entity_counts():
    g = make_graph(["t", "a", "b", "c"], [(0, "indication", 1), (1, "target", 2), (3, "x", 3)],
                   types={0: "disease", 1: "drug", 2: "gene/protein", 3: "anatomy"})
    s = build_subgraph(g, 0).stats()
    assert s["direct_triplets"] == 1 and s["indirect_triplets"] == 2 and s["merged_triplets"] == 2
    assert s["indirect_new_triplets"] == 1
    assert s["entities_with_target"] == 3 and s["entities_without_target"] == 2
    assert s["entity_types"] == {"disease": 1, "drug": 1, "gene/protein": 1}
    assert s["relation_types"] == {"indication": 1, "target": 1}


def test_find_entity_by_source_id():
    ents = [EntityRecord(0, "5015", "MONDO", EntityType.DISEASE, "diabetes mellitus"),
            EntityRecord(1, "DB06690", "DrugBank", EntityType.DRUG, "Nitrous oxide")]
    g = GraphStore(ents, [1], ["indication"], [0])
    assert find_entity(g, "MONDO:5015") == 0
    assert find_entity(g, "DB06690") == 1
    with pytest.raises(KeyError):
        find_entity(g, "MONDO:1")
