"""Ground truth, recall, latency percentiles and the hierarchical-vs-flat sweep.

Latency is measured single-threaded with one ``perf_counter_ns`` pair around
each query; recall and distance-computation counts come from the very same
timed calls, so the work and the time always describe one execution.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from navgraph import _kernels
from navgraph.flat_index import FlatIndex, build_flat, from_base_layer
from navgraph.hier_index import BuildParams, HierIndex
from navgraph.vecstore import Metric, VectorSet, load_vectors

CSV_COLUMNS = ("dataset", "index_type", "ef_search", "k", "recall", "p50_us", "p99_us",
               "mean_dist_comps", "build_s")
_QUERY_BLOCK = 256
_RERANK_SLACK = 32


@dataclass
class GroundTruth:
    """Exact neighbours per query: ``ids`` and float64 ``dists``, both ``(nq, k)``."""

    ids: np.ndarray
    dists: np.ndarray

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]


def _exact_rows(metric: Metric, q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """float64 distances from each query to its own candidate rows ``x[i]``."""
    if metric is Metric.L2:
        diff = x - q[:, None, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    ab = np.einsum("ijk,ik->ij", x, q)
    aa = np.einsum("ik,ik->i", q, q)[:, None]
    bb = np.einsum("ijk,ijk->ij", x, x)
    return np.clip(1.0 - ab / np.sqrt(aa * bb), 0.0, 2.0)


def _topk(metric: Metric, data: np.ndarray, queries: np.ndarray, k: int,
          exclude_self: bool = False, threads: int | None = None):
    """Exact top-``k`` per query, ties by ascending id.

    Candidates are preselected with a float64 BLAS product and then every
    candidate distance is recomputed directly in float64 before the final
    ``(dist, id)`` sort.
    """
    n = data.shape[0]
    nq = queries.shape[0]
    extra = 1 if exclude_self else 0
    pool = min(n, k + extra + _RERANK_SLACK)
    data64 = data.astype(np.float64)
    sq = np.einsum("ij,ij->i", data64, data64)
    out_i = np.empty((nq, k), dtype=np.int32)
    out_d = np.empty((nq, k), dtype=np.float64)
    with threadpool_limits(limits=threads):
        for start in range(0, nq, _QUERY_BLOCK):
            q = queries[start:start + _QUERY_BLOCK].astype(np.float64)
            dots = q @ data64.T
            if metric is Metric.L2:
                approx = sq[None, :] - 2.0 * dots
            else:
                approx = -dots / np.sqrt(sq)[None, :]
            if exclude_self:
                rows = np.arange(q.shape[0])
                approx[rows, start + rows] = np.inf
            if pool < n:
                cand = np.argpartition(approx, pool - 1, axis=1)[:, :pool]
            else:
                cand = np.broadcast_to(np.arange(n), (q.shape[0], n)).copy()
            exact = _exact_rows(metric, q, data64[cand])
            if exclude_self:
                exact[cand == (start + np.arange(q.shape[0]))[:, None]] = np.inf
            order = np.lexsort((cand, exact), axis=1)[:, :k]
            out_i[start:start + q.shape[0]] = np.take_along_axis(cand, order, 1)
            out_d[start:start + q.shape[0]] = np.take_along_axis(exact, order, 1)
    return out_i, out_d


def brute_force_knn(dataset: VectorSet, queries: VectorSet | np.ndarray, k: int,
                    threads: int | None = None) -> GroundTruth:
    """Exact ``k`` nearest neighbours of every query under the dataset metric."""
    q = queries.data if isinstance(queries, VectorSet) else np.asarray(queries, np.float32)
    q = np.atleast_2d(q)
    if q.shape[1] != dataset.dim:
        raise ValueError(f"query dimension {q.shape[1]} != dataset dimension {dataset.dim}")
    if not 1 <= k <= dataset.count:
        raise ValueError(f"k={k} must be in [1, n={dataset.count}]")
    if dataset.metric is Metric.ANGULAR and not np.all(np.any(q != 0, axis=1)):
        raise ValueError("angular queries must be nonzero")
    ids, dists = _topk(dataset.metric, dataset.data, q, k, threads=threads)
    return GroundTruth(ids, dists)


def recall_at_k(result, truth, k: int) -> float:
    """``|O & G| / k`` with set semantics; ``-1`` padding in ``result`` is ignored."""
    found = {int(i) for i in np.asarray(result).ravel()[:k] if i >= 0}
    true = {int(i) for i in np.asarray(truth).ravel()[:k]}
    return len(found & true) / k


def mean_recall(results: np.ndarray, truth: np.ndarray, k: int) -> float:
    return float(np.mean([recall_at_k(r, g, k) for r, g in zip(results, truth)]))


def percentile(samples, p: float):
    """Nearest-rank percentile: ``sorted[ceil(p/100 * N)]`` (1-indexed), minimum at p=0."""
    s = np.sort(np.asarray(samples).ravel())
    if s.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    rank = max(1, math.ceil(p / 100.0 * s.size))
    return s[rank - 1].item()


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    """One benchmark dataset: base vectors, queries and optional ground truth.

    ``data`` and ``queries`` are file paths or in-memory :class:`VectorSet`s;
    ``gt`` is an ivecs path, a :class:`GroundTruth`, an id matrix, or None to
    compute it by brute force.
    """

    name: str
    data: object
    queries: object
    gt: object = None
    metric: Metric = Metric.L2

    def load(self):
        metric = Metric.parse(self.metric)
        data = self._load_set(self.data, metric)
        queries = self._load_set(self.queries, metric)
        gt = self.gt
        if isinstance(gt, (str, os.PathLike)):
            gt = load_vectors(gt, "ivecs")
        if isinstance(gt, GroundTruth):
            gt = gt.ids
        return data, queries, gt

    @staticmethod
    def _load_set(src, metric: Metric) -> VectorSet:
        if isinstance(src, VectorSet):
            return src.with_metric(metric) if src.metric is not metric else src
        if isinstance(src, (str, os.PathLike)):
            if not os.path.exists(src):
                raise FileNotFoundError(f"dataset file not found: {src}")
            return load_vectors(src, metric=metric)
        return VectorSet(np.asarray(src, dtype=np.float32), metric)


@dataclass
class SweepConfig:
    datasets: list
    ef_grid: tuple = (100, 200, 400)
    k: int = 100
    M: int = 32
    ef_construction: int = 100
    seed: int = 0
    index_types: tuple = ("hier", "flat")
    flat_source: str = "base_layer"  # or "direct" for an independent flat build
    repetitions: int = 1
    threads: int | None = None

    def echo(self) -> dict:
        d = asdict(self)
        d["datasets"] = [
            {"name": ds.name, "metric": Metric.parse(ds.metric).value,
             "data": ds.data if isinstance(ds.data, str) else "<in-memory>",
             "queries": ds.queries if isinstance(ds.queries, str) else "<in-memory>",
             "gt": ds.gt if isinstance(ds.gt, str) else
             ("brute-force" if ds.gt is None else "<in-memory>")}
            for ds in self.datasets
        ]
        d["ef_grid"] = list(self.ef_grid)
        d["index_types"] = list(self.index_types)
        return d


@dataclass
class SweepRow:
    dataset: str
    index_type: str
    ef_search: int
    k: int
    recall: float
    p50_us: float
    p99_us: float
    mean_dist_comps: float
    build_s: float
    per_query_comps: np.ndarray = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def timed_search(index, queries: np.ndarray, k: int, ef_search: int):
    """Run the queries one at a time, single-threaded, timing each call.

    Returns ``(ids, comps, latencies_ns)``.
    """
    index._check_search(k, ef_search)
    qs = np.ascontiguousarray(queries, dtype=np.float32)
    nq = qs.shape[0]
    ids = np.full((nq, k), -1, dtype=np.int32)
    comps = np.zeros(nq, dtype=np.int64)
    lat = np.zeros(nq, dtype=np.int64)
    marks, state = index._visited.get(len(index))
    entry, max_level = index._search_entry()
    g = index.graph.kernel_view()
    code, data, sqn = index.metric.code, index._data, index._sqn
    stats = np.zeros(2, dtype=np.int64)
    no_trace = np.empty(0, dtype=np.int32)
    search = _kernels.search_one
    clock = time.perf_counter_ns
    # warm the compiled path outside the timed region
    search(code, qs[0], data, sqn, g, entry, max_level, k, ef_search, marks, state,
           no_trace, stats)
    for t in range(nq):
        stats[0] = 0
        q = qs[t]
        t0 = clock()
        found, _ = search(code, q, data, sqn, g, entry, max_level, k, ef_search,
                          marks, state, no_trace, stats)
        lat[t] = clock() - t0
        ids[t, :found.shape[0]] = found
        comps[t] = stats[0]
    return ids, comps, lat


def _build_pair(data: VectorSet, cfg: SweepConfig):
    params = BuildParams(M=cfg.M, ef_construction=cfg.ef_construction, seed=cfg.seed,
                         metric=data.metric)
    built = {}
    need_hier = "hier" in cfg.index_types or (
        "flat" in cfg.index_types and cfg.flat_source == "base_layer")
    if need_hier:
        t0 = time.perf_counter()
        hier = HierIndex.build(data, params)
        built["hier"] = (hier, time.perf_counter() - t0)
    if "flat" in cfg.index_types:
        t0 = time.perf_counter()
        if cfg.flat_source == "base_layer":
            flat = from_base_layer(built["hier"][0])
            built["flat"] = (flat, built["hier"][1] + time.perf_counter() - t0)
        elif cfg.flat_source == "direct":
            built["flat"] = (build_flat(data, params), time.perf_counter() - t0)
        else:
            raise ValueError(f"unknown flat_source {cfg.flat_source!r}")
    return {t: built[t] for t in cfg.index_types}


def sweep_index(name: str, index_type: str, index, build_s: float, queries: np.ndarray,
                truth: np.ndarray, ef_grid, k: int, repetitions: int = 1) -> list[SweepRow]:
    """Timed sweep over ``ef_grid`` for an already-built index."""
    if truth.shape[1] < k:
        raise ValueError(f"ground truth has k={truth.shape[1]} < requested k={k}")
    rows = []
    for ef in ef_grid:
        lats = []
        for _ in range(max(1, repetitions)):
            ids, comps, lat = timed_search(index, queries, k, max(ef, k))
            lats.append(lat)
        lat_us = np.concatenate(lats) / 1000.0
        rows.append(SweepRow(
            dataset=name, index_type=index_type, ef_search=int(ef), k=k,
            recall=mean_recall(ids, truth[:, :k], k),
            p50_us=float(percentile(lat_us, 50)), p99_us=float(percentile(lat_us, 99)),
            mean_dist_comps=float(comps.mean()), build_s=float(build_s),
            per_query_comps=comps,
        ))
    return rows


def run_sweep(config: SweepConfig, csv_path=None, json_path=None, indexes=None) -> list[SweepRow]:
    """Build (or reuse) both index types per dataset and sweep ``ef_grid``.

    ``indexes`` optionally maps dataset name to ``{index_type: (index, build_s)}``
    to skip construction.
    """
    rows = []
    for ds in config.datasets:
        data, queries, gt = ds.load()
        if queries.dim != data.dim:
            raise ValueError(f"{ds.name}: query dimension {queries.dim} != {data.dim}")
        if gt is None:
            gt = brute_force_knn(data, queries, config.k, threads=config.threads).ids
        if gt.shape[1] < config.k:
            raise ValueError(
                f"{ds.name}: ground truth has k={gt.shape[1]} < requested k={config.k}")
        if gt.shape[0] != queries.count:
            raise ValueError(f"{ds.name}: ground truth rows {gt.shape[0]} != queries {queries.count}")
        if indexes is not None and ds.name in indexes:
            built = indexes[ds.name]
        else:
            with threadpool_limits(limits=config.threads):
                built = _build_pair(data, config)
        for index_type in config.index_types:
            index, build_s = built[index_type]
            rows.extend(sweep_index(ds.name, index_type, index, build_s, queries.data, gt,
                                    config.ef_grid, config.k, config.repetitions))
    if csv_path is not None:
        write_csv(rows, csv_path)
    if json_path is not None:
        write_json(rows, config.echo(), json_path)
    return rows


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())


def write_json(rows, config: dict, path) -> None:
    with open(path, "w") as f:
        json.dump({"config": config, "rows": [r.as_dict() for r in rows]}, f, indent=2)


def comps_at_recall(rows, target: float) -> float:
    """Mean distance computations needed to reach ``target`` recall.

    Linear interpolation between consecutive sweep points (sorted by
    ``ef_search``); ``inf`` if the curve never reaches the target.
    """
    pts = sorted(rows, key=lambda r: r.ef_search)
    prev = None
    for r in pts:
        if r.recall >= target:
            if prev is None or prev.recall >= target:
                return r.mean_dist_comps
            frac = (target - prev.recall) / (r.recall - prev.recall)
            return prev.mean_dist_comps + frac * (r.mean_dist_comps - prev.mean_dist_comps)
        prev = r
    return math.inf
