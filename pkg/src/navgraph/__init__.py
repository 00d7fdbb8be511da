"""Hierarchical and flat proximity-graph indexes for approximate nearest-neighbour search,
with a benchmark harness and hubness analysis tools."""

from navgraph.flat_index import FlatIndex, build_flat, from_base_layer, search_flat
from navgraph.graph import (
    FlatGraph,
    GraphError,
    IndexFormatError,
    LayeredGraph,
    SearchTrace,
    deserialize_index,
    load_index,
    save_index,
    serialize_index,
)
from navgraph.hier_index import BuildParams, Candidate, HierIndex, SearchResult, sample_level
from navgraph.vecstore import DatasetFormatError, Metric, VectorSet, distance, load_vectors, save_vectors

__version__ = "0.1.0"

__all__ = [
    "BuildParams",
    "Candidate",
    "DatasetFormatError",
    "FlatGraph",
    "FlatIndex",
    "GraphError",
    "HierIndex",
    "IndexFormatError",
    "LayeredGraph",
    "Metric",
    "SearchResult",
    "SearchTrace",
    "VectorSet",
    "build_flat",
    "deserialize_index",
    "distance",
    "from_base_layer",
    "load_index",
    "load_vectors",
    "sample_level",
    "save_index",
    "save_vectors",
    "search_flat",
    "serialize_index",
]
