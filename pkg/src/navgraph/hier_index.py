"""Hierarchical navigable small-world index.

Nodes draw a level from a geometric law, are linked on every layer up to
that level with the diversity heuristic, and queries descend greedily
through the sparse upper layers before a beam search on layer 0.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from navgraph import _kernels
from navgraph.graph import GraphError, LayeredGraph, SearchTrace
from navgraph.vecstore import Metric, VectorSet

MAX_LEVEL = 255  # levels are stored as u8 in the index file


@dataclass(frozen=True)
class BuildParams:
    """Construction parameters; the defaults are the usual M=32, ef_construction=100."""

    M: int = 32
    ef_construction: int = 100
    seed: int = 0
    metric: Metric = Metric.L2

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if self.M < 2:
            raise ValueError(f"M must be at least 2, got {self.M}")
        if self.ef_construction < self.M:
            raise ValueError(
                f"ef_construction ({self.ef_construction}) must be >= M ({self.M})"
            )
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def M0(self) -> int:
        return 2 * self.M


@dataclass(frozen=True, order=True)
class Candidate:
    """A node with its distance to some query; orders by (dist, node)."""

    dist: float
    node: int


@dataclass
class SearchResult:
    ids: np.ndarray
    dists: np.ndarray
    dist_computations: int
    trace: SearchTrace | None = None

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.dists.tolist()))


def sample_level(rng: np.random.Generator, M: int) -> int:
    """Draw ``floor(-ln(U) / ln(M))`` with ``U`` uniform on (0, 1]."""
    if M < 2:
        raise ValueError("M must be at least 2")
    u = 1.0 - rng.random()
    return min(int(math.floor(-math.log(u) / math.log(M))), MAX_LEVEL)


def sample_levels(rng: np.random.Generator, M: int, size: int) -> np.ndarray:
    """Vectorised :func:`sample_level`; consumes the generator identically."""
    if M < 2:
        raise ValueError("M must be at least 2")
    u = 1.0 - rng.random(size)
    levels = np.floor(-np.log(u) / math.log(M))
    return np.minimum(levels, MAX_LEVEL).astype(np.int32)


class _Visited(threading.local):
    """Per-thread visited markers, grown on demand."""

    def __init__(self):
        self.marks = np.zeros(0, dtype=np.int32)
        self.state = np.zeros(1, dtype=np.int64)

    def get(self, n: int):
        if self.marks.shape[0] < n:
            self.marks = np.zeros(max(n, 2 * self.marks.shape[0]), dtype=np.int32)
            self.state[0] = 0
        return self.marks, self.state


def _as_matrix(x, dim: int) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float32)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"expected vectors of dimension {dim}, got shape {np.shape(x)}")
    return a


def _as_query(q, dim: int) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.ndim != 1 or q.shape[0] != dim:
        raise ValueError(f"expected a query of dimension {dim}, got shape {q.shape}")
    return q


class _GraphIndex:
    """State and search plumbing shared by the hierarchical and flat indexes."""

    _graph_type = LayeredGraph

    def __init__(self, dim: int, params: BuildParams | None = None, capacity: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.params = params or BuildParams()
        self.metric = self.params.metric
        self.dim = int(dim)
        self.graph = self._graph_type(self.params.M, self.params.M0, capacity)
        self._data = np.zeros((capacity, dim), dtype=np.float32)
        self._sqn = np.zeros(capacity, dtype=np.float32)
        self._ld = None
        self._ld_edits = -1
        self._rng = np.random.default_rng(self.params.seed)
        self._visited = _Visited()
        self._write_lock = threading.Lock()

    @classmethod
    def _from_parts(cls, graph, vectors: np.ndarray, metric: Metric, params=None):
        obj = cls.__new__(cls)
        n, dim = vectors.shape
        if params is None:
            params = BuildParams(M=graph.M, ef_construction=max(graph.M, 100), metric=metric)
        obj.params = params
        obj.metric = metric
        obj.dim = dim
        obj.graph = graph
        obj._data = np.ascontiguousarray(vectors, dtype=np.float32)
        obj._sqn = _kernels.squared_norms(obj._data) if n else np.zeros(0, np.float32)
        obj._ld = None
        obj._ld_edits = -1
        obj._rng = np.random.default_rng(params.seed)
        obj._visited = _Visited()
        obj._write_lock = threading.Lock()
        return obj

    # -- basic properties --------------------------------------------------

    def __len__(self) -> int:
        return self.graph.n

    @property
    def vectors(self) -> np.ndarray:
        return self._data[:self.graph.n]

    @property
    def entry_point(self) -> int:
        return self.graph.entry_point

    @property
    def max_level(self) -> int:
        return self.graph.max_level

    def neighbors(self, node: int, layer: int = 0) -> list[int]:
        return self.graph.neighbors(layer, node)

    def check_invariants(self) -> None:
        self.graph.check_invariants()

    # -- construction --------------------------------------------------------

    def _reserve(self, need: int) -> None:
        cap = self._data.shape[0]
        if need <= cap:
            return
        new = max(need, 2 * cap, 16)
        grow = new - cap
        self._data = np.concatenate([self._data, np.zeros((grow, self.dim), np.float32)])
        self._sqn = np.concatenate([self._sqn, np.zeros(grow, np.float32)])

    def _build_caches(self):
        """Link-distance/heuristic caches sized to the graph, refreshed after edits."""
        g = self.graph
        nrows, urows = g.links0.shape[0], g.ulinks.shape[0]
        ld = self._ld
        fresh = ld is None or self._ld_edits != g.edits
        if ld is None or ld[0].shape[0] < nrows or ld[1].shape[0] < urows:
            old = ld
            ld = (np.zeros((nrows, g.M0), np.float32), np.zeros((urows, g.M), np.float32),
                  np.zeros((nrows, g.M0), np.int32), np.zeros((urows, g.M), np.int32),
                  np.zeros(nrows, np.uint8), np.zeros(urows, np.uint8))
            if old is not None and not fresh:
                for new_a, old_a in zip(ld, old):
                    new_a[:old_a.shape[0]] = old_a
        if fresh:
            ld[4][:] = 0
            ld[5][:] = 0
            if g.n:
                _kernels.link_distances(self.metric.code, self._data, self._sqn,
                                        g.kernel_view(), ld, g.levels, g.n)
            self._ld_edits = g.edits
        self._ld = ld
        return ld

    def _draw_levels(self, m: int) -> np.ndarray:
        return sample_levels(self._rng, self.params.M, m)

    def add(self, vectors) -> np.ndarray:
        """Insert a batch of vectors; returns their node ids."""
        x = _as_matrix(vectors, self.dim)
        m = x.shape[0]
        if self.metric is Metric.ANGULAR and m and not np.all(np.any(x != 0, axis=1)):
            raise ValueError("angular indexes cannot store zero vectors")
        with self._write_lock:
            g = self.graph
            start = g.n
            levels = self._draw_levels(m)
            self._reserve(start + m)
            self._data[start:start + m] = x
            self._sqn[start:start + m] = _kernels.squared_norms(x)
            g.add_nodes(levels)
            ld = self._build_caches()
            marks, state = self._visited.get(g.n)
            entry, max_level = _kernels.insert_range(
                self.metric.code, self._data, self._sqn, g.kernel_view(), ld, g.levels,
                start, start + m, g.entry_point, max(g.max_level, 0),
                g.M, g.M0, self.params.ef_construction, marks, state,
            )
            self._set_entry(int(entry), int(max_level))
        return np.arange(start, start + m, dtype=np.int64)

    def _set_entry(self, entry: int, max_level: int) -> None:
        self.graph.entry_point = entry
        self.graph.max_level = max_level

    def insert(self, vector) -> int:
        """Insert a single vector and return its node id."""
        return int(self.add(_as_query(vector, self.dim)[None, :])[0])

    # -- search ----------------------------------------------------------------

    def _search_entry(self) -> tuple[int, int]:
        return self.graph.entry_point, self.graph.max_level

    def _check_search(self, k: int, ef_search: int) -> None:
        if self.graph.n == 0:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError("k must be positive")
        if k > ef_search:
            raise ValueError(f"k ({k}) must not exceed ef_search ({ef_search})")

    def search(self, query, k: int = 100, ef_search: int = 200,
               trace: bool = False, query_id: int = 0) -> SearchResult:
        """Top-``k`` neighbours of ``query`` (ascending distance, ties by id)."""
        self._check_search(k, ef_search)
        q = _as_query(query, self.dim)
        if self.metric is Metric.ANGULAR and not q.any():
            raise ValueError("angular queries must be nonzero")
        marks, state = self._visited.get(self.graph.n)
        stats = np.zeros(2, dtype=np.int64)
        buf = np.empty(self.graph.n if trace else 0, dtype=np.int32)
        entry, max_level = self._search_entry()
        ids, ds = _kernels.search_one(self.metric.code, q, self._data, self._sqn,
                                      self.graph.kernel_view(), entry, max_level, k,
                                      ef_search, marks, state, buf, stats)
        tr = None
        if trace:
            tr = SearchTrace(buf[:stats[1]].copy(), int(stats[0]), query_id)
        return SearchResult(ids, ds, int(stats[0]), tr)

    def search_batch(self, queries, k: int = 100, ef_search: int = 200):
        """Search many queries; returns ``(ids, dists, dist_computations)``.

        ``ids`` is ``(nq, k)`` padded with -1 when fewer than ``k`` nodes exist.
        """
        self._check_search(k, ef_search)
        qs = _as_matrix(queries, self.dim)
        marks, state = self._visited.get(self.graph.n)
        entry, max_level = self._search_entry()
        return _kernels.search_batch(self.metric.code, qs, self._data, self._sqn,
                                     self.graph.kernel_view(), entry, max_level, k,
                                     ef_search, marks, state)

    def search_batch_traced(self, queries, k: int = 100, ef_search: int = 200):
        """Batch search that also returns one :class:`SearchTrace` per query."""
        self._check_search(k, ef_search)
        qs = _as_matrix(queries, self.dim)
        marks, state = self._visited.get(self.graph.n)
        entry, max_level = self._search_entry()
        ids, ds, comps, flat, offsets = _kernels.search_batch_traced(
            self.metric.code, qs, self._data, self._sqn, self.graph.kernel_view(),
            entry, max_level, k, ef_search, marks, state,
        )
        traces = [SearchTrace(flat[offsets[t]:offsets[t + 1]], int(comps[t]), t)
                  for t in range(qs.shape[0])]
        return ids, ds, comps, traces

    def search_layer(self, query, layer: int, entries, ef: int,
                     trace: SearchTrace | None = None) -> list[Candidate]:
        """One best-first beam search on ``layer`` from the given entry nodes.

        When ``trace`` is given, first-time evaluations are appended to its
        ``visit_order`` and counted in ``dist_computations``.
        """
        q = _as_query(query, self.dim)
        entries = np.asarray(list(entries), dtype=np.int32)
        if entries.size == 0:
            raise GraphError("search_layer needs at least one entry node")
        for e in entries:
            if not self.graph.has_node(layer, int(e)):
                raise GraphError(f"entry {int(e)} is not present at layer {layer}")
        if ef < 1:
            raise ValueError("ef must be positive")
        marks, state = self._visited.get(self.graph.n)
        stats = np.zeros(2, dtype=np.int64)
        buf = np.empty(self.graph.n if trace is not None else 0, dtype=np.int32)
        qsq = _kernels.dot(q, q)
        ids, ds = _kernels.search_layer(self.metric.code, q, qsq, self._data, self._sqn,
                                        self.graph.kernel_view(), layer, entries, ef,
                                        marks, state, buf, stats)
        if trace is not None:
            trace.visit_order = np.concatenate([trace.visit_order, buf[:stats[1]]])
            trace.dist_computations += int(stats[0])
        return [Candidate(float(d), int(i)) for i, d in zip(ids, ds)]


class HierIndex(_GraphIndex):
    """Hierarchical index: layered graph plus a top-level entry point."""

    @classmethod
    def build(cls, vectors: VectorSet, params: BuildParams | None = None) -> "HierIndex":
        params = params or BuildParams(metric=vectors.metric)
        if params.metric is not vectors.metric:
            raise ValueError("BuildParams.metric differs from the dataset metric")
        idx = cls(vectors.dim, params, capacity=vectors.count)
        idx.add(vectors.data)
        return idx

    def layer_sizes(self) -> list[int]:
        return [int(self.graph.nodes_at(j).size) for j in range(self.graph.max_level + 1)]


def select_neighbors(vectors, base: int, candidates, cap: int,
                     metric=Metric.L2) -> list[int]:
    """Apply the diversity heuristic with backfill to ``candidates``.

    ``candidates`` is a sequence of :class:`Candidate` (or ``(node, dist)``
    pairs) sorted ascending by distance to ``base``; the base itself only
    enters through those distances.
    """
    del base  # the heuristic needs only the candidate-to-base distances
    data = vectors.data if isinstance(vectors, VectorSet) else np.ascontiguousarray(
        vectors, dtype=np.float32)
    metric = vectors.metric if isinstance(vectors, VectorSet) else Metric.parse(metric)
    ids, ds = [], []
    for c in candidates:
        if isinstance(c, Candidate):
            ids.append(c.node)
            ds.append(c.dist)
        else:
            ids.append(int(c[0]))
            ds.append(float(c[1]))
    m = len(ids)
    if cap < 1 or m == 0:
        return []
    cand_i = np.asarray(ids, dtype=np.int32)
    cand_d = np.asarray(ds, dtype=np.float32)
    sqn = _kernels.squared_norms(data)
    out_i = np.empty(cap, np.int32)
    out_d = np.empty(cap, np.float32)
    out_t = np.empty(cap, np.int32)
    n = _kernels.select_neighbors(metric.code, data, sqn, cand_i, cand_d, m, cap,
                                  out_i, out_d, out_t)
    return out_i[:n].tolist()

