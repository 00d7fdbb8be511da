"""Fixed-capacity adjacency storage for layered and flat proximity graphs.

Layer 0 gives every node ``M0`` contiguous neighbour slots; nodes with level
``l >= 1`` additionally own ``l`` rows of ``M`` slots in a shared upper-layer
table.  The arrays are laid out so the compiled kernels can walk them
directly (see :mod:`navgraph._kernels`).

Index file layout (little-endian)::

    b"NVGI" | u32 version | u32 metric | u32 d | u32 n | u32 M | u32 M0
    | u32 max_level | i32 entry_point | u8 level[n]
    | for layer in 0..max_level, for each node present at that layer in id
      order: u32 degree, u32 ids[degree]
    | float32 vectors[n * d]
"""

from __future__ import annotations

import io
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

INDEX_MAGIC = b"NVGI"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIi")
_LOCK_STRIPES = 64


class GraphError(ValueError):
    """Invalid graph access or mutation."""


class IndexFormatError(ValueError):
    """A serialized index is corrupt, truncated or of an unknown version."""


@dataclass
class SearchTrace:
    """Per-query record of first-time node evaluations, in evaluation order."""

    visit_order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int32))
    dist_computations: int = 0
    query_id: int = 0


class LayeredGraph:
    """Layered adjacency lists with per-layer degree caps ``M0`` (layer 0) and ``M``."""

    def __init__(self, M: int, M0: int | None = None, capacity: int = 0):
        if M < 1:
            raise GraphError("M must be positive")
        self.M = int(M)
        self.M0 = int(M0) if M0 is not None else 2 * self.M
        self.n = 0
        self.entry_point = -1
        self.max_level = -1
        self._n_urows = 0
        self.levels = np.zeros(capacity, dtype=np.int32)
        self.links0 = np.zeros((capacity, self.M0), dtype=np.int32)
        self.deg0 = np.zeros(capacity, dtype=np.int32)
        self.uoff = np.full(capacity, -1, dtype=np.int64)
        self.ulinks = np.zeros((0, self.M), dtype=np.int32)
        self.udeg = np.zeros(0, dtype=np.int32)
        self._locks = [threading.Lock() for _ in range(_LOCK_STRIPES)]
        # bumped on every external set_neighbors so build caches can be refreshed
        self.edits = 0

    # -- storage ----------------------------------------------------------

    @property
    def capacity(self) -> int:
        return self.levels.shape[0]

    def _grow_nodes(self, need: int) -> None:
        cap = self.capacity
        if need <= cap:
            return
        new = max(need, 2 * cap, 16)
        self.levels = np.concatenate([self.levels, np.zeros(new - cap, np.int32)])
        self.links0 = np.concatenate([self.links0, np.zeros((new - cap, self.M0), np.int32)])
        self.deg0 = np.concatenate([self.deg0, np.zeros(new - cap, np.int32)])
        self.uoff = np.concatenate([self.uoff, np.full(new - cap, -1, np.int64)])

    def _grow_urows(self, need: int) -> None:
        cap = self.ulinks.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap, 16)
        self.ulinks = np.concatenate([self.ulinks, np.zeros((new - cap, self.M), np.int32)])
        self.udeg = np.concatenate([self.udeg, np.zeros(new - cap, np.int32)])

    def add_nodes(self, levels) -> int:
        """Append nodes with the given levels (no edges); returns the first new id."""
        levels = np.asarray(levels, dtype=np.int32).ravel()
        if levels.size and levels.min() < 0:
            raise GraphError("levels must be non-negative")
        first = self.n
        m = levels.size
        self._grow_nodes(first + m)
        self.levels[first:first + m] = levels
        rows = np.cumsum(levels, dtype=np.int64)
        starts = self._n_urows + rows - levels
        self.uoff[first:first + m] = np.where(levels > 0, starts, -1)
        total = self._n_urows + (int(rows[-1]) if m else 0)
        self._grow_urows(total)
        self._n_urows = total
        self.n = first + m
        return first

    def kernel_view(self):
        return (self.links0, self.deg0, self.ulinks, self.udeg, self.uoff)

    # -- access -----------------------------------------------------------

    def cap(self, layer: int) -> int:
        return self.M0 if layer == 0 else self.M

    def has_node(self, layer: int, node: int) -> bool:
        return 0 <= node < self.n and 0 <= layer <= self.levels[node]

    def _slot(self, layer: int, node: int):
        if not self.has_node(layer, node):
            raise GraphError(f"node {node} is not present at layer {layer}")
        if layer == 0:
            return self.links0, self.deg0, node
        return self.ulinks, self.udeg, int(self.uoff[node]) + layer - 1

    def neighbors(self, layer: int, node: int) -> list[int]:
        links, degs, r = self._slot(layer, node)
        with self._locks[node % _LOCK_STRIPES]:
            return links[r, :degs[r]].tolist()

    def set_neighbors(self, layer: int, node: int, ids) -> None:
        links, degs, r = self._slot(layer, node)
        ids = [int(i) for i in ids]
        if len(ids) > self.cap(layer):
            raise GraphError(
                f"{len(ids)} neighbours exceed the layer-{layer} capacity {self.cap(layer)}"
            )
        if node in ids:
            raise GraphError(f"self-loop on node {node}")
        if len(set(ids)) != len(ids):
            raise GraphError("duplicate neighbour ids")
        for i in ids:
            if not self.has_node(layer, i):
                raise GraphError(f"neighbour {i} is not present at layer {layer}")
        with self._locks[node % _LOCK_STRIPES]:
            links[r, :len(ids)] = ids
            degs[r] = len(ids)
            self.edits += 1

    def nodes_at(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.levels[:self.n] >= layer).astype(np.int32)

    def degrees(self, layer: int = 0) -> np.ndarray:
        nodes = self.nodes_at(layer)
        if layer == 0:
            return self.deg0[nodes]
        return self.udeg[self.uoff[nodes] + layer - 1]

    def iter_layer(self, layer: int):
        """Yield ``(node, neighbour array)`` for every node present at ``layer``."""
        for node in self.nodes_at(layer):
            links, degs, r = self._slot(layer, int(node))
            yield int(node), links[r, :degs[r]]

    # -- checks -----------------------------------------------------------

    def check_invariants(self) -> None:
        """Raise :class:`GraphError` on any structural violation."""
        n = self.n
        if n == 0:
            return
        top = int(self.levels[:n].max())
        if self.max_level != top:
            raise GraphError(f"max_level {self.max_level} != highest node level {top}")
        if not (0 <= self.entry_point < n) or self.levels[self.entry_point] != top:
            raise GraphError("entry point is not a node of maximal level")
        for layer in range(top + 1):
            cap = self.cap(layer)
            present = self.levels[:n] >= layer
            for node, nbrs in self.iter_layer(layer):
                if nbrs.size > cap:
                    raise GraphError(f"node {node} layer {layer}: degree {nbrs.size} > {cap}")
                if np.any(nbrs == node):
                    raise GraphError(f"node {node} layer {layer}: self-loop")
                if np.unique(nbrs).size != nbrs.size:
                    raise GraphError(f"node {node} layer {layer}: duplicate neighbours")
                if nbrs.size and (nbrs.min() < 0 or nbrs.max() >= n or not present[nbrs].all()):
                    raise GraphError(f"node {node} layer {layer}: neighbour absent from layer")

    def _adjacency(self, layer: int) -> csr_matrix:
        rows, cols = [], []
        for node, nbrs in self.iter_layer(layer):
            rows.append(np.full(nbrs.size, node, dtype=np.int64))
            cols.append(nbrs.astype(np.int64))
        r = np.concatenate(rows) if rows else np.empty(0, np.int64)
        c = np.concatenate(cols) if cols else np.empty(0, np.int64)
        return csr_matrix((np.ones(r.size, dtype=np.int8), (r, c)), shape=(self.n, self.n))

    def reachable_fraction(self, layer: int = 0, directed: bool = False) -> float:
        """Fraction of the layer reachable from the entry point.

        Edges are taken as undirected unless ``directed`` is set, in which case
        only out-edges (the ones search follows) count.
        """
        nodes = self.nodes_at(layer)
        if nodes.size == 0:
            return 0.0
        adj = self._adjacency(layer)
        order = breadth_first_order(adj, self.entry_point, directed=directed,
                                    return_predecessors=False)
        return order.size / nodes.size

    def strongly_connected(self, layer: int = 0) -> bool:
        """True when every node of the layer reaches every other along out-edges."""
        nodes = self.nodes_at(layer)
        if nodes.size <= 1:
            return True
        sub = self._adjacency(layer)[nodes][:, nodes]
        count, _ = connected_components(sub, directed=True, connection="strong")
        return count == 1


class FlatGraph(LayeredGraph):
    """Single-layer graph with out-degree cap ``M0`` and a fixed entry point."""

    def add_nodes(self, levels) -> int:
        levels = np.asarray(levels, dtype=np.int32).ravel()
        if levels.size and levels.max() > 0:
            raise GraphError("a flat graph has only layer 0")
        return super().add_nodes(levels)

    def check_invariants(self) -> None:
        if self.n and not (0 <= self.entry_point < self.n):
            raise GraphError("entry point out of range")
        saved = self.max_level, self.entry_point
        try:
            # reuse the layered checks with the entry treated as top-level
            self.max_level = 0 if self.n else -1
            super().check_invariants()
        finally:
            self.max_level, self.entry_point = saved

    @classmethod
    def from_layer0(cls, g: LayeredGraph) -> "FlatGraph":
        flat = cls(g.M, g.M0, capacity=g.n)
        flat.add_nodes(np.zeros(g.n, dtype=np.int32))
        flat.links0[:g.n] = g.links0[:g.n]
        flat.deg0[:g.n] = g.deg0[:g.n]
        flat.entry_point = g.entry_point
        flat.max_level = 0 if g.n else -1
        return flat


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _write_graph(out: io.BytesIO, g: LayeredGraph, metric_code: int, vectors: np.ndarray) -> None:
    n = g.n
    d = vectors.shape[1] if vectors.ndim == 2 else 0
    max_level = max(g.max_level, 0)
    out.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, metric_code, d, n, g.M, g.M0,
                           max_level, g.entry_point))
    out.write(g.levels[:n].astype(np.uint8).tobytes())
    for layer in range(max_level + 1 if n else 0):
        for _node, nbrs in g.iter_layer(layer):
            out.write(struct.pack("<I", nbrs.size))
            out.write(nbrs.astype("<u4").tobytes())
    out.write(np.ascontiguousarray(vectors[:n], dtype="<f4").tobytes())


def serialize_index(index) -> bytes:
    """Encode a hierarchical or flat index (graph and vectors) as bytes."""
    out = io.BytesIO()
    _write_graph(out, index.graph, index.metric.code, index.vectors)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, nbytes: int) -> memoryview:
        if self.pos + nbytes > len(self.buf):
            raise IndexFormatError("truncated index data")
        view = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return view


def _read_graph(buf: bytes):
    r = _Reader(buf)
    if len(buf) < _HEADER.size:
        raise IndexFormatError("truncated index header")
    magic, version, metric, d, n, M, M0, max_level, entry = _HEADER.unpack(r.take(_HEADER.size))
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {bytes(magic)!r}")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    levels = np.frombuffer(r.take(n), dtype=np.uint8).astype(np.int32)
    if n and int(levels.max()) != max_level:
        raise IndexFormatError("max_level disagrees with node levels")
    flat = n == 0 or max_level == 0
    g = (FlatGraph if flat else LayeredGraph)(M, M0, capacity=n)
    g.add_nodes(levels)
    g.entry_point = entry
    g.max_level = max_level if n else -1
    for layer in range(max_level + 1 if n else 0):
        cap = g.cap(layer)
        for node in g.nodes_at(layer):
            deg = struct.unpack("<I", r.take(4))[0]
            if deg > cap:
                raise IndexFormatError(f"degree {deg} exceeds capacity {cap}")
            ids = np.frombuffer(r.take(4 * deg), dtype="<u4").astype(np.int32)
            if layer == 0:
                g.links0[node, :deg] = ids
                g.deg0[node] = deg
            else:
                row = g.uoff[node] + layer - 1
                g.ulinks[row, :deg] = ids
                g.udeg[row] = deg
    vecs = np.frombuffer(r.take(4 * n * d), dtype="<f4").reshape(n, d).astype(np.float32)
    if r.pos != len(buf):
        raise IndexFormatError("trailing bytes after index data")
    return g, metric, vecs


def deserialize_index(buf: bytes, kind: str | None = None):
    """Decode bytes written by :func:`serialize_index`.

    ``kind`` selects ``"hier"`` or ``"flat"``; by default a file whose graph
    has a single layer comes back as a flat index.
    """
    from navgraph.flat_index import FlatIndex
    from navgraph.hier_index import HierIndex
    from navgraph.vecstore import Metric

    g, metric_code, vecs = _read_graph(buf)
    metric = Metric.from_code(metric_code)
    if kind is None:
        kind = "flat" if isinstance(g, FlatGraph) else "hier"
    if kind == "flat":
        if not isinstance(g, FlatGraph):
            g = FlatGraph.from_layer0(g)
        return FlatIndex._from_parts(g, vecs, metric)
    if kind == "hier":
        if isinstance(g, FlatGraph):
            h = LayeredGraph(g.M, g.M0, capacity=g.n)
            h.add_nodes(np.zeros(g.n, dtype=np.int32))
            h.links0[:g.n] = g.links0[:g.n]
            h.deg0[:g.n] = g.deg0[:g.n]
            h.entry_point, h.max_level = g.entry_point, g.max_level
            g = h
        return HierIndex._from_parts(g, vecs, metric)
    raise ValueError(f"unknown index kind {kind!r}")


def save_index(index, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_index(index))


def load_index(path, kind: str | None = None):
    with open(path, "rb") as f:
        return deserialize_index(f.read(), kind)
