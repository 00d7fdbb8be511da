import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from conftest import brute_force_oracle
from navgraph import BuildParams, Candidate, GraphError, HierIndex, LayeredGraph, Metric, VectorSet
from navgraph.bench import brute_force_knn, mean_recall
from navgraph.hier_index import sample_level, sample_levels, select_neighbors
from navgraph.synth import SynthSpec, generate


class _FixedUniform:
    """Stands in for a Generator whose next ``random()`` draw is fixed."""

    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


def _manual_index(points, edges, entry=0, M=2):
    pts = np.asarray(points, dtype=np.float32).reshape(len(points), -1)
    g = LayeredGraph(M)
    g.add_nodes(np.zeros(len(pts), dtype=np.int32))
    for node, nbrs in edges.items():
        g.set_neighbors(0, node, nbrs)
    g.entry_point, g.max_level = entry, 0
    return HierIndex._from_parts(g, pts, Metric.L2)


class TestBuildParams:
    def test_defaults(self):
        p = BuildParams()
        assert (p.M, p.ef_construction, p.M0) == (32, 100, 64)

    @pytest.mark.parametrize("kw", [{"M": 1}, {"M": 16, "ef_construction": 8}, {"seed": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BuildParams(**kw)


class TestSampleLevel:
    def test_near_one_gives_zero(self):
        # U = 1 - random() = 0.999999
        assert sample_level(_FixedUniform(1e-6), 32) == 0

    def test_boundary(self):
        # U = 1/32 exactly gives -ln(U)/ln(32) = 1
        assert sample_level(_FixedUniform(1 - 1 / 32), 32) == 1

    def test_vectorised_matches_scalar(self):
        a, b = np.random.default_rng(5), np.random.default_rng(5)
        scalar = [sample_level(a, 32) for _ in range(5000)]
        np.testing.assert_array_equal(sample_levels(b, 32, 5000), scalar)

    @pytest.mark.parametrize("j,expected", [(1, 1 / 32), (2, 1 / 1024)])
    def test_level_law_monte_carlo(self, j, expected):
        n = 1_000_000
        levels = sample_levels(np.random.default_rng(77), 32, n)
        frac = np.mean(levels >= j)
        se = math.sqrt(expected * (1 - expected) / n)
        assert abs(frac - expected) <= 3 * se

    def test_rejects_small_M(self):
        with pytest.raises(ValueError):
            sample_level(np.random.default_rng(0), 1)


class TestSearchLayer:
    def test_single_node(self):
        idx = _manual_index([[1.0, 2.0]], {})
        res = idx.search_layer([0.0, 0.0], 0, [0], 5)
        assert res == [Candidate(5.0, 0)]

    def test_path_graph_hand_simulation(self):
        idx = _manual_index([0, 1, 2, 3], {0: [1], 1: [0, 2], 2: [1, 3], 3: [2]})
        from navgraph import SearchTrace
        tr = SearchTrace()
        res = idx.search_layer([3.1], 0, [0], 2, trace=tr)
        assert [c.node for c in res] == [3, 2]
        np.testing.assert_allclose([c.dist for c in res], [0.01, 1.21], rtol=1e-5)
        np.testing.assert_array_equal(tr.visit_order, [0, 1, 2, 3])
        assert tr.dist_computations == 4

    def test_ties_broken_by_id(self):
        idx = _manual_index([1, -1, 1, -1], {0: [1, 2, 3]})
        res = idx.search_layer([0.0], 0, [0], 4)
        assert [c.node for c in res] == [0, 1, 2, 3]

    def test_invalid_entry(self):
        idx = _manual_index([0, 1], {0: [1]})
        with pytest.raises(GraphError):
            idx.search_layer([0.0], 0, [5], 2)
        with pytest.raises(GraphError):
            idx.search_layer([0.0], 1, [0], 2)

    @pytest.mark.parametrize("seed", range(5))
    def test_ef_n_is_exact(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(20, 200))
        data = VectorSet(r.standard_normal((n, 8), dtype=np.float32))
        idx = HierIndex.build(data, BuildParams(M=4, ef_construction=16, seed=seed))
        assert idx.graph.reachable_fraction() == 1.0
        q = r.standard_normal(8, dtype=np.float32)
        res = idx.search_layer(q, 0, [idx.entry_point], n)
        truth = brute_force_oracle(data.data, q, n)[0]
        assert [c.node for c in res] == truth.tolist()


class TestSelectNeighbors:
    def _pts(self, xs):
        return VectorSet(np.asarray(xs, dtype=np.float32).reshape(-1, 1))

    def test_pruned_then_backfilled(self):
        pts = self._pts([0, 1, 2])
        cands = [Candidate(1.0, 1), Candidate(4.0, 2)]
        assert select_neighbors(pts, 0, cands, 2) == [1, 2]
        assert select_neighbors(pts, 0, cands, 1) == [1]

    def test_single_candidate(self):
        pts = self._pts([0, 5])
        assert select_neighbors(pts, 0, [Candidate(25.0, 1)], 3) == [1]

    def test_collinear_chain(self):
        pts = self._pts([0, 1, 2, 3])
        cands = [Candidate(1.0, 1), Candidate(4.0, 2), Candidate(9.0, 3)]
        assert select_neighbors(pts, 0, cands, 3) == [1, 2, 3]

    def test_diverse_directions_all_kept(self):
        pts = VectorSet(np.array([[0, 0], [1, 0], [-1, 0], [0, 1]], dtype=np.float32))
        cands = [Candidate(1.0, 1), Candidate(1.0, 2), Candidate(1.0, 3)]
        assert select_neighbors(pts, 0, cands, 2) == [1, 2]

    def test_matches_python_rule(self, rng):
        """Random instances against a direct transcription of the rule."""
        for _ in range(30):
            x = rng.standard_normal((40, 3)).astype(np.float64)
            d = ((x[1:] - x[0]) ** 2).sum(1)
            order = sorted(range(1, 40), key=lambda i: (d[i - 1], i))
            cap = int(rng.integers(1, 12))
            kept, rejected = [], []
            for c in order:
                if len(kept) == cap:
                    break
                if all(d[c - 1] < ((x[c] - x[s]) ** 2).sum() for s in kept):
                    kept.append(c)
                else:
                    rejected.append(c)
            expected = (kept + rejected)[:cap]
            cands = [(c, d[c - 1]) for c in order]
            got = select_neighbors(VectorSet(x.astype(np.float32)), 0, cands, cap)
            assert got == expected


class TestInsertAndSearch:
    def test_first_insert_is_entry(self):
        idx = HierIndex(4, BuildParams(M=4, ef_construction=8, seed=11))
        node = idx.insert(np.ones(4, dtype=np.float32))
        expected = sample_level(np.random.default_rng(11), 4)
        assert node == 0 and idx.entry_point == 0 and idx.max_level == expected

    def test_invariants_500(self):
        data = VectorSet(np.random.default_rng(1).standard_normal((500, 32), dtype=np.float32))
        idx = HierIndex.build(data, BuildParams(M=8, ef_construction=32, seed=1))
        idx.check_invariants()
        assert max(idx.graph.degrees(0)) <= 16

    def test_dimension_mismatch(self, small_hier):
        with pytest.raises(ValueError, match="dimension"):
            small_hier.insert(np.zeros(3))

    def test_batch_equals_incremental(self):
        data = np.random.default_rng(8).standard_normal((300, 6), dtype=np.float32)
        p = BuildParams(M=6, ef_construction=20, seed=4)
        a = HierIndex(6, p)
        a.add(data)
        b = HierIndex(6, p)
        b.add(data[:100])
        for row in data[100:]:
            b.insert(row)
        np.testing.assert_array_equal(a.graph.levels[:300], b.graph.levels[:300])
        for node in range(300):
            assert a.neighbors(node) == b.neighbors(node)

    def test_recall_uniform_16d(self):
        data = generate(SynthSpec(2000, 16, "uniform", 3))
        queries = generate(SynthSpec(200, 16, "uniform", 4))
        idx = HierIndex.build(data, BuildParams(seed=3))
        ids, _, _ = idx.search_batch(queries.data, 10, 200)
        truth = brute_force_knn(data, queries, 10).ids
        assert mean_recall(ids, truth, 10) >= 0.99

    @pytest.mark.slow
    def test_recall_normal_64d_default_params(self):
        data = generate(SynthSpec(10_000, 64, "normal", 5))
        queries = generate(SynthSpec(200, 64, "normal", 6))
        idx = HierIndex.build(data, BuildParams(seed=5))
        ids, _, _ = idx.search_batch(queries.data, 100, 200)
        truth = brute_force_knn(data, queries, 100).ids
        assert mean_recall(ids, truth, 100) >= 0.95

    def test_stored_vector_found(self, small_normal, small_hier):
        data, _ = small_normal
        for i in (0, 17, 1999):
            res = small_hier.search(data.data[i], 1, 50)
            assert res.ids[0] == i and res.dists[0] == 0.0

    def test_deterministic(self, small_normal):
        data, queries = small_normal
        p = BuildParams(M=16, ef_construction=100, seed=3)
        a = HierIndex.build(data, p).search_batch(queries, 10, 64)
        b = HierIndex.build(data, p).search_batch(queries, 10, 64)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_errors(self, small_hier):
        with pytest.raises(ValueError, match="empty"):
            HierIndex(4).search(np.zeros(4), 1, 10)
        with pytest.raises(ValueError, match="exceed"):
            small_hier.search(np.zeros(16), 20, 10)

    def test_recall_monotone_in_ef(self, small_normal, small_hier):
        data, queries = small_normal
        truth = brute_force_knn(data, queries, 10).ids
        recalls = [mean_recall(small_hier.search_batch(queries, 10, ef)[0], truth, 10)
                   for ef in (10, 20, 40, 80, 160)]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))

    def test_trace_starts_at_base_entry(self, small_normal, small_hier):
        _, queries = small_normal
        idx = small_hier
        for q in queries[:20]:
            res = idx.search(q, 10, 50, trace=True)
            order = res.trace.visit_order
            assert len(set(order.tolist())) == len(order)
            # the base-layer entry is where the greedy upper-layer descent ends
            ep = idx.entry_point
            for layer in range(idx.max_level, 0, -1):
                ep = idx.search_layer(q, layer, [ep], 1)[0].node
            assert order[0] == ep
            assert res.dist_computations >= len(order)

    def test_concurrent_search_matches_serial(self, small_normal, small_hier):
        _, queries = small_normal
        serial = [small_hier.search(q, 10, 50).ids for q in queries]
        with ThreadPoolExecutor(4) as pool:
            parallel = list(pool.map(lambda q: small_hier.search(q, 10, 50).ids, queries))
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a, b)

    def test_external_edit_then_insert(self):
        data = np.random.default_rng(2).standard_normal((200, 5), dtype=np.float32)
        idx = HierIndex(5, BuildParams(M=4, ef_construction=16))
        idx.add(data[:150])
        idx.graph.set_neighbors(0, 3, [])
        idx.add(data[150:])
        idx.check_invariants()

    def test_angular(self):
        data = generate(SynthSpec(1000, 12, "normal", 9), "angular")
        q = generate(SynthSpec(50, 12, "normal", 10), "angular")
        idx = HierIndex.build(data, BuildParams(M=8, ef_construction=64, metric="angular"))
        truth = brute_force_knn(data, q, 5).ids
        assert mean_recall(idx.search_batch(q.data, 5, 100)[0], truth, 5) >= 0.98
