from qkg.kg.store import (
    EntityRecord,
    EntityType,
    GraphFormatError,
    GraphStore,
    TripletRecord,
    UnknownEntityError,
    load_graph,
    neighbors,
    normalize_name,
    save_graph,
    search_entities,
)
from qkg.kg.subgraph import (
    Subgraph,
    build_subgraph,
    extract_direct_layer,
    extract_indirect_layer,
    find_entity,
)

__all__ = [
    "EntityRecord", "EntityType", "GraphFormatError", "GraphStore", "TripletRecord",
    "UnknownEntityError", "load_graph", "neighbors", "normalize_name", "save_graph",
    "search_entities", "Subgraph", "build_subgraph", "extract_direct_layer",
    "extract_indirect_layer", "find_entity",
]
