import numpy as np
import pytest

from navgraph import BuildParams, HierIndex, LayeredGraph, SearchTrace, VectorSet, from_base_layer
from navgraph.hubness import (
    HubLabeling,
    access_counts,
    hub_adjacency_samples,
    hubness_report,
    k_occurrence,
    select_hubs,
    traversal_bin_fractions,
)
from navgraph.stats import mann_whitney_u, two_sample_t
from navgraph.synth import SynthSpec, generate


class TestKOccurrence:
    def test_three_points(self):
        ko = k_occurrence(VectorSet(np.array([[0.0], [1.0], [10.0]])), 1)
        assert ko.counts.tolist() == [1, 2, 0]

    def test_conservation(self):
        for k in (1, 5, 20):
            data = generate(SynthSpec(400, 7, "normal", k))
            assert k_occurrence(data, k).counts.sum() == 400 * k

    def test_against_pairwise_oracle(self):
        data = generate(SynthSpec(200, 5, "uniform", 3))
        x = data.data.astype(np.float64)
        d = ((x[:, None] - x[None]) ** 2).sum(-1)
        np.fill_diagonal(d, np.inf)
        counts = np.zeros(200, int)
        for i in range(200):
            for j in sorted(range(200), key=lambda j: (d[i, j], j))[:4]:
                counts[j] += 1
        np.testing.assert_array_equal(k_occurrence(data, 4).counts, counts)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            k_occurrence(VectorSet(np.ones((3, 2))), 3)

    @pytest.mark.slow
    def test_skew_grows_with_dimension(self):
        low = k_occurrence(generate(SynthSpec(20_000, 16, "normal", 1)), 10).skewness()
        high = k_occurrence(generate(SynthSpec(20_000, 64, "normal", 1)), 10).skewness()
        assert high > low


class TestSelectHubs:
    def test_nearest_rank_threshold(self):
        lab = select_hubs(np.arange(1, 101), 95)
        assert lab.threshold == 95 and lab.n_hubs == 6

    def test_all_equal(self):
        assert select_hubs(np.full(10, 3), 99).n_hubs == 10

    def test_nested(self, rng):
        c = rng.poisson(5, 1000)
        assert set(select_hubs(c, 99).hubs) <= set(select_hubs(c, 95).hubs)

    def test_range(self):
        with pytest.raises(ValueError):
            select_hubs([1, 2], 100)


def _clique_graph(n_hubs=5, n=20, M=8):
    g = LayeredGraph(M)
    g.add_nodes(np.zeros(n, dtype=np.int32))
    hubs = list(range(n_hubs))
    for h in hubs:
        g.set_neighbors(0, h, [x for x in hubs if x != h])
    for v in range(n_hubs, n):
        g.set_neighbors(0, v, [w for w in (v + 1, v - 1) if n_hubs <= w < n])
    g.entry_point, g.max_level = 0, 0
    labels = np.zeros(n, dtype=bool)
    labels[hubs] = True
    return g, HubLabeling(99.0, 1.0, labels)


class TestHubAdjacency:
    def test_clique_extreme(self):
        g, lab = _clique_graph()
        s = hub_adjacency_samples(g, lab, sample_size=1000, seed=1)
        assert np.all(s.a == 4) and np.all(s.b == 0)
        assert len(s.a) == 5 and len(s.b) == 15
        assert s.comparison_pool == "non-hubs"

    def test_everything_a_hub(self):
        g, _ = _clique_graph()
        lab = HubLabeling(50.0, 0.0, np.ones(20, dtype=bool))
        s = hub_adjacency_samples(g, lab, 10, seed=2)
        assert s.comparison_pool == "all"
        assert mann_whitney_u(s.a, s.b, "normal").p_value > 0.05

    def test_no_hubs(self):
        g, _ = _clique_graph()
        with pytest.raises(ValueError):
            hub_adjacency_samples(g, HubLabeling(99.0, 9.0, np.zeros(20, dtype=bool)))

    def test_seeded(self, small_hier):
        lab = select_hubs(np.arange(len(small_hier)), 90)
        a = hub_adjacency_samples(small_hier, lab, 50, seed=3)
        b = hub_adjacency_samples(small_hier, lab, 50, seed=3)
        np.testing.assert_array_equal(a.nodes_a, b.nodes_a)
        np.testing.assert_array_equal(a.nodes_b, b.nodes_b)
        assert not set(a.nodes_b) & set(lab.hubs)

    def test_null_rejection_rate(self, small_hier):
        """Random labels: both tests reject at alpha = 0.05 in at most 7% of trials."""
        g = small_hier.graph
        r = np.random.default_rng(99)
        rejections = {"mw": 0, "t": 0}
        trials = 200
        for t in range(trials):
            labels = np.zeros(g.n, dtype=bool)
            labels[r.choice(g.n, 100, replace=False)] = True
            s = hub_adjacency_samples(g, HubLabeling(95.0, 0.0, labels), 100, seed=t)
            rejections["mw"] += mann_whitney_u(s.a, s.b).p_value < 0.05
            rejections["t"] += two_sample_t(s.a, s.b).p_value < 0.05
        rates = {name: hits / trials for name, hits in rejections.items()}
        assert max(rates.values()) <= 0.07, rates


class TestAccessCounts:
    def test_entry_always_visited(self, small_normal, small_hier):
        _, queries = small_normal
        flat = from_base_layer(small_hier)
        acc = access_counts(flat, queries[:1], 20, 10)
        assert acc.counts[flat.entry_point] >= 1

    def test_conservation(self, small_normal, small_hier):
        _, queries = small_normal
        acc = access_counts(small_hier, queries, 40, 10)
        assert acc.total == sum(len(t.visit_order) for t in acc.traces)
        assert acc.n_queries == len(queries)

    def test_deterministic(self, small_normal, small_hier):
        _, queries = small_normal
        a = access_counts(small_hier, queries, 40, 10).counts
        b = access_counts(small_hier, queries, 40, 10).counts
        np.testing.assert_array_equal(a, b)

    def test_log_normalization(self):
        from navgraph.hubness import AccessCounts
        acc = AccessCounts(np.array([0, 1, 3]), 1, 10, 1)
        np.testing.assert_allclose(acc.log_normalized(), np.log([1, 2, 4]))


class TestTraversalBins:
    def test_constructed(self):
        labels = np.zeros(100, dtype=bool)
        labels[:30] = True
        bins = traversal_bin_fractions([SearchTrace(np.arange(60))], labels, 30)
        np.testing.assert_array_equal(bins.fractions, [1.0, 0.0])
        assert bins.first_bin_mean == 1.0 and bins.final_full_bin_mean == 0.0

    def test_all_zero(self):
        bins = traversal_bin_fractions([SearchTrace(np.arange(70))], np.zeros(100, bool), 30)
        np.testing.assert_array_equal(bins.fractions, [0, 0, 0])

    def test_partial_bin_and_coverage(self):
        labels = np.zeros(10, dtype=bool)
        labels[[4, 9]] = True
        traces = [SearchTrace(np.array([0, 1, 2, 3, 4])), SearchTrace(np.array([9, 8]))]
        bins = traversal_bin_fractions(traces, labels, 2)
        # query 0: [0,1] [2,3] [4]; query 1: [9,8]
        np.testing.assert_allclose(bins.fractions, [0.25, 0.0, 1.0])
        np.testing.assert_array_equal(bins.coverage, [2, 1, 1])
        assert bins.final_full_bin_mean == pytest.approx(0.25)

    def test_bad_bin_size(self):
        with pytest.raises(ValueError):
            traversal_bin_fractions([], np.zeros(1, bool), 0)


def test_report_shape(small_normal, small_hier):
    _, queries = small_normal
    rep = hubness_report(from_base_layer(small_hier), queries, 40, 10, 99, 30, 100, 0)
    assert {"access", "hubs", "tests", "bins", "samples"} <= set(rep)
    assert 0 <= rep["tests"]["mann_whitney"]["p_value"] <= 1
    assert "p_value" in rep["tests"]["t_test"]
