"""Flat navigable small-world index: one proximity graph, one fixed entry node.

A flat index is either imported from the base layer of a hierarchical index
(same edges, same entry node) or built directly by inserting every point
into a single layer.  Search is the base-layer beam search alone.
"""

from __future__ import annotations

import numpy as np

from navgraph.graph import FlatGraph, GraphError, SearchTrace
from navgraph.hier_index import BuildParams, HierIndex, SearchResult, _GraphIndex
from navgraph.vecstore import VectorSet

__all__ = ["FlatIndex", "SearchTrace", "build_flat", "from_base_layer", "search_flat"]


class FlatIndex(_GraphIndex):
    """Single-layer graph index.

    ``entry_point`` can be reassigned; by default it is node 0 for direct
    builds and the hierarchical entry node for imports.
    """

    _graph_type = FlatGraph

    def _draw_levels(self, m: int) -> np.ndarray:
        return np.zeros(m, dtype=np.int32)

    def _set_entry(self, entry: int, max_level: int) -> None:
        # the construction entry is the first node; a user-chosen entry survives
        if self.graph.entry_point < 0:
            self.graph.entry_point = entry
        self.graph.max_level = 0

    @property
    def entry_point(self) -> int:
        return self.graph.entry_point

    @entry_point.setter
    def entry_point(self, node: int) -> None:
        if not 0 <= node < self.graph.n:
            raise GraphError(f"entry point {node} out of range")
        self.graph.entry_point = int(node)

    def _search_entry(self) -> tuple[int, int]:
        return self.graph.entry_point, 0

    @classmethod
    def build(cls, vectors: VectorSet, params: BuildParams | None = None) -> "FlatIndex":
        return build_flat(vectors, params)

    @classmethod
    def from_base_layer(cls, hier: HierIndex) -> "FlatIndex":
        return from_base_layer(hier)


def from_base_layer(hier: HierIndex) -> FlatIndex:
    """Copy layer 0 of ``hier`` verbatim; the vector array is shared, not copied."""
    if len(hier) == 0:
        raise ValueError("cannot import the base layer of an empty index")
    flat = FlatIndex._from_parts(FlatGraph.from_layer0(hier.graph), hier.vectors,
                                 hier.metric, hier.params)
    flat._sqn = hier._sqn[:len(hier)]
    return flat


def build_flat(vectors: VectorSet, params: BuildParams | None = None) -> FlatIndex:
    """Insert every point into a single layer, starting the beam from node 0."""
    params = params or BuildParams(metric=vectors.metric)
    if params.metric is not vectors.metric:
        raise ValueError("BuildParams.metric differs from the dataset metric")
    idx = FlatIndex(vectors.dim, params, capacity=vectors.count)
    idx.add(vectors.data)
    return idx


def search_flat(index: FlatIndex, query, k: int = 100, ef_search: int = 200,
                trace: bool = False, query_id: int = 0) -> SearchResult:
    return index.search(query, k, ef_search, trace=trace, query_id=query_id)
