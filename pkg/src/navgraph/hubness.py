"""Hubness analysis of proximity-graph search.

* k-occurrence: how often each point appears in the exact k-NN lists of the
  other points, and the skewness of that distribution.
* Access counts: how often each node is evaluated by a fixed query workload.
* Hub labels from a nearest-rank percentile of the access counts, and tests of
  whether hubs link to more hubs than ordinary nodes do.
* Traversal bins: the share of hubs among the nodes a query evaluates, in
  consecutive windows of its visit order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from navgraph.bench import _topk, percentile
from navgraph.graph import LayeredGraph, SearchTrace
from navgraph.stats import TestResult, effect_size, mann_whitney_u, skewness, two_sample_t
from navgraph.vecstore import Metric, VectorSet


@dataclass
class KOccurrence:
    k: int
    counts: np.ndarray

    def skewness(self) -> float:
        return skewness(self.counts)


def k_occurrence(dataset: VectorSet, k: int, metric=None,
                 threads: int | None = None) -> KOccurrence:
    """Count, for every point, the other points whose exact k-NN list contains it."""
    n = dataset.count
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < n={n}")
    metric = dataset.metric if metric is None else Metric.parse(metric)
    ids, _ = _topk(metric, dataset.data, dataset.data, k, exclude_self=True, threads=threads)
    counts = np.bincount(ids.ravel(), minlength=n).astype(np.int64)
    return KOccurrence(k, counts)


@dataclass
class AccessCounts:
    """Per-node first-visit totals over a query workload."""

    counts: np.ndarray
    n_queries: int
    ef_search: int
    k: int
    traces: list = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def log_normalized(self) -> np.ndarray:
        return np.log1p(self.counts.astype(np.float64))

    def skewness(self, log: bool = True) -> float:
        return skewness(self.log_normalized() if log else self.counts)


def access_counts(index, queries, ef_search: int = 200, k: int = 100,
                  keep_traces: bool = True) -> AccessCounts:
    """Run traced searches and total the first visits of every node."""
    q = queries.data if isinstance(queries, VectorSet) else np.asarray(queries, np.float32)
    _, _, _, traces = index.search_batch_traced(q, k, ef_search)
    counts = np.zeros(len(index), dtype=np.int64)
    if traces:
        counts = np.bincount(np.concatenate([t.visit_order for t in traces]),
                             minlength=len(index)).astype(np.int64)
    return AccessCounts(counts, len(traces), ef_search, k, traces if keep_traces else [])


@dataclass
class HubLabeling:
    percentile: float
    threshold: float
    labels: np.ndarray

    @property
    def hubs(self) -> np.ndarray:
        return np.flatnonzero(self.labels)

    @property
    def n_hubs(self) -> int:
        return int(self.labels.sum())


def select_hubs(counts, pct: float) -> HubLabeling:
    """Label nodes whose count reaches the nearest-rank ``pct`` percentile."""
    c = counts.counts if isinstance(counts, AccessCounts) else np.asarray(counts)
    if not 0 < pct < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {pct}")
    thr = percentile(c, pct)
    return HubLabeling(float(pct), float(thr), c >= thr)


@dataclass
class HubSamples:
    """Hub-neighbour counts for sampled hub nodes (``a``) and comparison nodes (``b``)."""

    a: np.ndarray
    b: np.ndarray
    nodes_a: np.ndarray
    nodes_b: np.ndarray
    comparison_pool: str  # "non-hubs" normally, "all" when every node is a hub


def hub_neighbor_counts(graph: LayeredGraph, labels: np.ndarray) -> np.ndarray:
    """Number of base-layer out-neighbours labelled hub, for every node."""
    n = graph.n
    links = graph.links0[:n]
    valid = np.arange(graph.M0)[None, :] < graph.deg0[:n, None]
    return np.sum(valid & labels[links], axis=1)


def hub_adjacency_samples(graph, labeling: HubLabeling, sample_size: int = 1000,
                          seed: int = 0) -> HubSamples:
    """Sample hubs and non-hubs without replacement and count their hub neighbours.

    Populations smaller than ``sample_size`` are used whole.  When every node
    is a hub the comparison sample is drawn from all nodes instead.
    """
    g = getattr(graph, "graph", graph)
    labels = np.asarray(labeling.labels, dtype=bool)
    if labels.shape[0] != g.n:
        raise ValueError("labeling size does not match the graph")
    hubs = np.flatnonzero(labels)
    if hubs.size == 0:
        raise ValueError("no hub nodes are labelled")
    others = np.flatnonzero(~labels)
    pool = "non-hubs"
    if others.size == 0:
        others = np.arange(g.n)
        pool = "all"
    rng = np.random.default_rng(seed)
    na = rng.choice(hubs, size=min(sample_size, hubs.size), replace=False)
    nb = rng.choice(others, size=min(sample_size, others.size), replace=False)
    per_node = hub_neighbor_counts(g, labels)
    return HubSamples(per_node[na], per_node[nb], na, nb, pool)


@dataclass
class TraversalBins:
    bin_size: int
    fractions: np.ndarray  # mean hub share per bin across queries reaching it
    coverage: np.ndarray  # number of queries whose trace reaches each bin
    first_bin_mean: float  # mean hub share in bin 1
    final_full_bin_mean: float  # mean over queries of the share in their last complete bin

    def rows(self):
        return [(i + 1, float(f), int(c))
                for i, (f, c) in enumerate(zip(self.fractions, self.coverage))]


def traversal_bin_fractions(traces, labeling, bin_size: int = 30) -> TraversalBins:
    """Hub share per consecutive window of ``bin_size`` visits.

    A trailing partial window is averaged over its actual length.
    """
    if bin_size < 1:
        raise ValueError("bin_size must be positive")
    labels = np.asarray(getattr(labeling, "labels", labeling), dtype=np.float64)
    sums, cover = [], []
    first, final = [], []
    for tr in traces:
        order = tr.visit_order if isinstance(tr, SearchTrace) else np.asarray(tr)
        m = len(order)
        if m == 0:
            continue
        h = labels[np.asarray(order, dtype=np.int64)]
        nb = -(-m // bin_size)
        pad = np.zeros(nb * bin_size)
        pad[:m] = h
        lengths = np.full(nb, bin_size, dtype=np.float64)
        lengths[-1] = m - (nb - 1) * bin_size
        frac = pad.reshape(nb, bin_size).sum(axis=1) / lengths
        if len(sums) < nb:
            sums.extend([0.0] * (nb - len(sums)))
            cover.extend([0] * (nb - len(cover)))
        for i in range(nb):
            sums[i] += frac[i]
            cover[i] += 1
        full = m // bin_size
        if full:
            first.append(frac[0])
            final.append(frac[full - 1])
    cover_a = np.asarray(cover, dtype=np.int64)
    fractions = np.asarray(sums) / np.maximum(cover_a, 1)
    return TraversalBins(
        bin_size, fractions, cover_a,
        float(np.mean(first)) if first else float("nan"),
        float(np.mean(final)) if final else float("nan"),
    )


def connectivity_tests(samples: HubSamples) -> dict:
    """Both one-sided tests plus Cohen's d on a pair of hub samples."""
    mw: TestResult = mann_whitney_u(samples.a, samples.b)
    try:
        tt = two_sample_t(samples.a, samples.b).as_dict()
    except ValueError as exc:
        tt = {"error": str(exc)}
    try:
        es = effect_size(samples.a, samples.b)
    except ValueError:
        es = float("nan")
    return {"mann_whitney": mw.as_dict(), "t_test": tt, "effect_size": es}


def hubness_report(index, queries, ef_search: int = 200, k: int = 100, pct: float = 99.0,
                   bin_size: int = 30, sample_size: int = 1000, seed: int = 0) -> dict:
    """Access skewness, hub tests and the traversal-bin curve for one index."""
    acc = access_counts(index, queries, ef_search, k)
    lab = select_hubs(acc, pct)
    samples = hub_adjacency_samples(index, lab, sample_size, seed)
    bins = traversal_bin_fractions(acc.traces, lab, bin_size)
    return {
        "n": len(index),
        "queries": acc.n_queries,
        "ef_search": ef_search,
        "k": k,
        "access": {
            "total_visits": acc.total,
            "skewness_log": _safe_skew(acc.log_normalized()),
            "skewness_raw": _safe_skew(acc.counts),
        },
        "hubs": {"percentile": pct, "threshold": lab.threshold, "count": lab.n_hubs},
        "samples": {
            "comparison_pool": samples.comparison_pool,
            "hub": samples.a.tolist(),
            "comparison": samples.b.tolist(),
            "mean_hub": float(samples.a.mean()),
            "mean_comparison": float(samples.b.mean()),
        },
        "tests": connectivity_tests(samples),
        "bins": {
            "bin_size": bin_size,
            "mean_hub_fraction": bins.fractions.tolist(),
            "queries_covered": bins.coverage.tolist(),
            "first_bin_mean": bins.first_bin_mean,
            "final_full_bin_mean": bins.final_full_bin_mean,
        },
    }


def _safe_skew(x) -> float:
    try:
        return skewness(x)
    except ValueError:
        return float("nan")


def json_safe(obj):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_report(report: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(json_safe(report), f, indent=2, allow_nan=False)


def write_bins_csv(bins: TraversalBins, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_index", "mean_hub_fraction", "queries_covered"])
        w.writerows(bins.rows())
