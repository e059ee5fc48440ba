"""Tests for graph storage, generators, partitioning and the container format."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from g2lformer import graphstore as gs
from g2lformer.graphstore import (BadMagic, GraphValidationError, TruncatedSection, VersionMismatch,
                                  build_csr, generate_er, normalize_adjacency, partition_bfs, plant_task)


def path_graph(n):
    return build_csr([(i, i + 1) for i in range(n - 1)], n)


@st.composite
def graphs(draw, max_n=12, labelled=False):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(0, 3 * n))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), min_size=m, max_size=m))
    d = draw(st.integers(0, 3))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    g = build_csr(edges, n, features=rng.standard_normal((n, d)))
    if labelled:
        train, val, test = gs.split_masks(n, rng)
        g = g.with_task(rng.integers(-1, 3, size=n), train, val, test, 3)
    return g


class TestBuildCsr:
    def test_single_edge(self):
        g = build_csr([(0, 1)], 2)
        assert g.row_offsets.tolist() == [0, 1, 2]
        assert g.col_indices.tolist() == [1, 0]

    def test_duplicates_stored_once(self):
        g = build_csr([(0, 1), (0, 1)], 2)
        assert g.num_edges == 2

    def test_endpoint_out_of_range(self):
        with pytest.raises(GraphValidationError):
            build_csr([(0, 5)], 3)

    def test_self_loops_dropped(self):
        assert build_csr([(1, 1), (0, 1)], 2).num_edges == 2

    @given(graphs())
    def test_rows_sorted_and_symmetric(self, g):
        for v in range(g.n):
            nb = g.neighbors(v)
            assert np.all(np.diff(nb) > 0)
            for u in nb:
                assert v in g.neighbors(u)

    def test_arrays_are_read_only(self):
        g = path_graph(3)
        with pytest.raises(ValueError):
            g.col_indices[0] = 2

    def test_overlapping_masks_rejected(self):
        g = path_graph(3)
        m = np.array([True, False, False])
        with pytest.raises(GraphValidationError):
            g.with_task(np.zeros(3, int), m, m, None, 2)

    def test_edge_list_import(self, tmp_path):
        p = tmp_path / "edges.csv"
        p.write_text("src,dst\n0,1\n1,2\n\n2,0\n")
        g = gs.read_edge_list(p)
        assert g.n == 3 and g.num_edges == 6


class TestNormalizeAdjacency:
    def test_single_node(self):
        g = build_csr([], 1, features=np.zeros((1, 1)))
        assert normalize_adjacency(g).to_dense().tolist() == [[1.0]]

    def test_two_nodes(self):
        assert np.allclose(normalize_adjacency(build_csr([(0, 1)], 2)).to_dense(), 0.5, atol=1e-15)

    def test_isolated_node_gets_unit_self_entry(self):
        dense = normalize_adjacency(build_csr([(0, 1)], 3)).to_dense()
        assert dense[2].tolist() == [0.0, 0.0, 1.0]

    def test_matches_dense_formula(self):
        g = generate_er(20, 4, 1, seed=3)
        a = np.zeros((20, 20))
        dst, src = g.edge_index()
        a[dst, src] = 1.0
        a += np.eye(20)
        dinv = 1.0 / np.sqrt(a.sum(1))
        assert np.allclose(normalize_adjacency(g).to_dense(), dinv[:, None] * a * dinv[None, :], atol=1e-15)

    @given(graphs())
    def test_symmetric_with_bounded_rows(self, g):
        dense = normalize_adjacency(g).to_dense()
        assert np.max(np.abs(dense - dense.T), initial=0.0) <= 1e-12
        assert np.all(np.diag(dense) > 0)


class TestGenerateEr:
    def test_mean_degree_at_scale(self):
        g = generate_er(10000, 10, 128, seed=7)
        assert 9.5 <= g.num_edges / g.n <= 10.5
        assert g.features.shape == (10000, 128)

    def test_forced_edge(self):
        g = generate_er(2, 1, 3, seed=0)
        assert g.num_edges == 2

    def test_degree_too_large(self):
        with pytest.raises(GraphValidationError):
            generate_er(5, 5, 2, seed=0)

    def test_too_few_nodes(self):
        with pytest.raises(GraphValidationError):
            generate_er(1, 0.5, 2, seed=0)

    def test_same_seed_same_bytes(self):
        a = gs.container_bytes(generate_er(300, 6, 4, seed=11))
        b = gs.container_bytes(generate_er(300, 6, 4, seed=11))
        assert a == b
        assert a != gs.container_bytes(generate_er(300, 6, 4, seed=12))


class TestPlantTask:
    def test_local_only_constant_on_communities(self):
        g = generate_er(400, 4, 2, seed=1)
        t = plant_task(g, 4, 1.0, 0.0, seed=2)
        for c in np.unique(t.community):
            assert np.unique(t.labels[t.community == c]).size == 1

    def test_global_only_ignores_communities(self):
        g = generate_er(400, 4, 2, seed=1)
        t = plant_task(g, 4, 0.0, 1.0, seed=2)
        assert np.array_equal(t.labels, t.global_class)
        # a label is a function of the anchor distances alone, never of the community id
        for c in np.unique(t.global_class):
            assert np.unique(t.labels[t.global_class == c]).size == 1
        assert np.unique(t.local_class[t.labels == t.labels[0]]).size > 1

    def test_mixed_histogram_not_dominated(self):
        g = generate_er(2000, 4, 8, seed=7)
        t = plant_task(g, 4, 0.5, 0.5, seed=7)
        assert t.histogram.max() / 2000 < 0.7
        assert t.histogram.sum() == 2000

    def test_split_fractions(self):
        g = generate_er(200, 4, 2, seed=0)
        t = plant_task(g, 3, 0.5, 0.5, seed=0)
        assert (t.train_mask.sum(), t.val_mask.sum(), t.test_mask.sum()) == (100, 50, 50)
        assert not np.any(t.train_mask & t.test_mask)

    def test_feature_signal_leaves_labels_alone(self):
        g = generate_er(300, 4, 5, seed=0)
        a = plant_task(g, 4, 0.5, 0.5, seed=3)
        b = plant_task(g, 4, 0.5, 0.5, seed=3, feature_signal=2.0)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.train_mask, b.train_mask)
        assert a.features is None and b.features.shape == (300, 5)

    def test_disconnected_graph_gets_anchor_per_component(self):
        g = build_csr([(0, 1), (2, 3)], 4, features=np.zeros((4, 1)))
        t = plant_task(g, 2, 0.0, 1.0, seed=0)
        assert set(t.labels.tolist()) <= {0, 1}

    @pytest.mark.parametrize("classes", [1, 17])
    def test_class_count_bounds(self, classes):
        with pytest.raises(GraphValidationError):
            plant_task(path_graph(4), classes, 0.5, 0.5, seed=0)


class TestPartition:
    def test_single_cluster(self):
        assert np.all(partition_bfs(path_graph(5), 1).cluster_id == 0)

    def test_path_graph_by_hand(self):
        p = partition_bfs(path_graph(4), 2, seeds=[0, 3])
        assert p.cluster_id.tolist() == [0, 0, 1, 1]

    def test_every_node_its_own_cluster(self):
        p = partition_bfs(path_graph(6), 6, seed=1)
        assert sorted(p.cluster_id.tolist()) == list(range(6))

    def test_k_too_large(self):
        with pytest.raises(GraphValidationError):
            partition_bfs(path_graph(3), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 80), st.integers(1, 10), st.integers(0, 1000))
    def test_cover_and_balance(self, n, k, seed):
        k = min(k, n)
        g = generate_er(n, min(3.0, n - 1), 1, seed)
        p = partition_bfs(g, k, seed=seed)
        sizes = p.sizes()
        assert sizes.sum() == n and sizes.min() >= 1
        assert sizes.max() / sizes.min() <= 2

    def test_deterministic(self):
        g = generate_er(100, 4, 1, seed=0)
        assert np.array_equal(partition_bfs(g, 5, seed=9).cluster_id, partition_bfs(g, 5, seed=9).cluster_id)


class TestInducedSubgraph:
    def test_drops_leaving_edges(self):
        sub, nodes = gs.induced_subgraph(path_graph(4), [1, 2])
        assert nodes.tolist() == [1, 2] and sub.num_edges == 2

    def test_random_batches_cover_nodes(self):
        batches = gs.random_node_batches(10, 3, np.random.default_rng(0))
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))


class TestContainer:
    @settings(max_examples=50, deadline=None)
    @given(graphs(labelled=True))
    def test_round_trip_is_byte_exact(self, g):
        buf = gs.container_bytes(g)
        back = gs.parse_container(buf)
        assert back.equals(g)
        assert gs.container_bytes(back) == buf

    def test_edge_features_round_trip(self, tmp_path):
        ef = np.arange(6.0).reshape(3, 2)
        g = build_csr([(0, 1), (1, 2), (2, 0)], 3, undirected=False, features=np.ones((3, 1)), edge_features=ef)
        gs.write_container(g, tmp_path / "g.bin")
        back = gs.read_container(tmp_path / "g.bin")
        assert back.equals(g) and back.edge_dim == 2

    def test_bad_magic(self):
        buf = bytearray(gs.container_bytes(path_graph(3)))
        buf[:4] = b"NOPE"
        with pytest.raises(BadMagic, match="bad magic"):
            gs.parse_container(bytes(buf))

    def test_version_mismatch(self):
        buf = bytearray(gs.container_bytes(path_graph(3)))
        buf[4:8] = (2).to_bytes(4, "little")
        with pytest.raises(VersionMismatch):
            gs.parse_container(bytes(buf))

    def test_truncated_features(self):
        g = generate_er(10, 2, 4, seed=0)
        buf = gs.container_bytes(g)
        features_start = 48 + 8 * (g.n + 1) + 8 * g.num_edges
        with pytest.raises(TruncatedSection, match="truncated section: features"):
            gs.parse_container(buf[:features_start + 8])
