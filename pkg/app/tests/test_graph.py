"""
Tests for the graph service.
"""

import os
import sys
import unittest

import numpy as np

# Add the repository root to the path so we can import the app package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from app.services.geometry import pairwise_sigma
from app.services.graph import (
    UNREACHABLE,
    KnnGraph,
    attention_mask,
    bucket_hops,
    build_knn_graph,
    build_spatial_bundle,
    hop_distances,
)
from app.tests.helpers import point_document, random_document
from app.utils.config import ModelConfig
from app.utils.errors import InvalidInputError


def floyd_warshall(adjacency):
    """Independent all-pairs shortest path oracle."""
    n = adjacency.shape[0]
    dist = np.where(adjacency, 1.0, np.inf)
    np.fill_diagonal(dist, 0.0)
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return np.where(np.isinf(dist), UNREACHABLE, dist).astype(np.int64)


def graph_from_edges(n, edges):
    adjacency = np.eye(n, dtype=bool)
    for i, j in edges:
        adjacency[i, j] = adjacency[j, i] = True
    return KnnGraph(n=n, adjacency=adjacency, k=1)


def dist_of(points):
    return pairwise_sigma(point_document(points)).dist


class TestKnnGraph(unittest.TestCase):
    """Test cases for KNN graph construction."""

    def test_collinear(self):
        """A(0,0), B(1,0), C(3,0) with k=1 gives edges A-B and B-C."""
        graph = build_knn_graph(dist_of([(0.0, 0.0), (0.1, 0.0), (0.3, 0.0)]), 1)
        expected = np.array([
            [True, True, False],
            [True, True, True],
            [False, True, True],
        ])
        np.testing.assert_array_equal(graph.adjacency, expected)

    def test_two_nodes(self):
        """Two entities are always linked."""
        for k in (1, 2, 5):
            graph = build_knn_graph(dist_of([(0.0, 0.0), (0.5, 0.5)]), k)
            self.assertTrue(graph.adjacency.all())

    def test_square_ties(self):
        """Unit square corners with k=2 link adjacent corners only."""
        # corners in order around the square: 0-1-2-3
        graph = build_knn_graph(dist_of([(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5)]), 2)
        expected = np.array([
            [True, True, False, True],
            [True, True, True, False],
            [False, True, True, True],
            [True, False, True, True],
        ])
        np.testing.assert_array_equal(graph.adjacency, expected)

    def test_tie_breaking_by_index(self):
        """Equidistant neighbours go to the lower index."""
        # 1 and 2 are both at distance 1 from 0; 2 and 3 pick each other
        dist = np.array([
            [0.0, 1.0, 1.0, 5.0],
            [1.0, 0.0, 2.0, 5.0],
            [1.0, 2.0, 0.0, 0.5],
            [5.0, 5.0, 0.5, 0.0],
        ])
        graph = build_knn_graph(dist, 1)
        self.assertTrue(graph.adjacency[0, 1])
        self.assertFalse(graph.adjacency[0, 2])

    def test_saturated(self):
        """k >= n returns the all-pairs graph with a warning."""
        with self.assertLogs('app.services.graph', level='WARNING'):
            graph = build_knn_graph(dist_of([(0.0, 0.0), (0.1, 0.0), (0.3, 0.0)]), 3)
        self.assertTrue(graph.saturated)
        self.assertTrue(graph.adjacency.all())

    def test_invariants(self):
        """Self-loops, symmetry and at least min(k, n-1) neighbours per row."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(2, 30))
            k = int(rng.integers(1, 6))
            graph = build_knn_graph(pairwise_sigma(random_document(rng, n)).dist, k)
            self.assertTrue(np.diag(graph.adjacency).all())
            np.testing.assert_array_equal(graph.adjacency, graph.adjacency.T)
            off = graph.adjacency.sum(axis=1) - 1
            self.assertTrue((off >= min(k, n - 1)).all())

    def test_bad_k(self):
        """k must be positive."""
        with self.assertRaises(InvalidInputError):
            build_knn_graph(np.zeros((2, 2)), 0)


class TestHopDistances(unittest.TestCase):
    """Test cases for hop distances, masks and buckets."""

    def test_path(self):
        """Path A-B-C has phi(A, C) = 2."""
        hops = hop_distances(graph_from_edges(3, [(0, 1), (1, 2)]))
        self.assertEqual(hops.phi[0, 2], 2)
        self.assertEqual(hops.phi[0, 0], 0)

    def test_disconnected(self):
        """Pairs in different components are unreachable."""
        hops = hop_distances(graph_from_edges(4, [(0, 1), (2, 3)]))
        self.assertEqual(hops.phi[0, 3], UNREACHABLE)
        self.assertFalse(hops.reachable[1, 2])

    def test_floyd_warshall_oracle(self):
        """BFS hop counts equal Floyd-Warshall on random KNN graphs."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 51))
            k = int(rng.integers(1, 6))
            graph = build_knn_graph(pairwise_sigma(random_document(rng, n)).dist, k)
            hops = hop_distances(graph)
            np.testing.assert_array_equal(hops.phi, floyd_warshall(graph.adjacency))

    def test_random_edge_sets(self):
        """BFS matches the oracle on graphs with several components."""
        rng = np.random.default_rng(11)
        for _ in range(30):
            n = int(rng.integers(2, 20))
            edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.1]
            graph = graph_from_edges(n, edges)
            np.testing.assert_array_equal(hop_distances(graph).phi, floyd_warshall(graph.adjacency))

    def test_phi_properties(self):
        """phi is symmetric and equals 1 exactly on off-diagonal edges."""
        rng = np.random.default_rng(5)
        graph = build_knn_graph(pairwise_sigma(random_document(rng, 25)).dist, 2)
        phi = hop_distances(graph).phi
        np.testing.assert_array_equal(phi, phi.T)
        off = ~np.eye(25, dtype=bool)
        np.testing.assert_array_equal((phi == 1)[off], graph.adjacency[off])

    def test_mask(self):
        """Threshold 1 on a path masks A-C but keeps neighbours and self pairs."""
        hops = hop_distances(graph_from_edges(3, [(0, 1), (1, 2)]))
        mask = attention_mask(hops, 1)
        self.assertFalse(mask[0, 2])
        self.assertTrue(mask[0, 1] and mask[1, 2] and mask[1, 0])
        self.assertTrue(np.diag(mask).all())

    def test_mask_large_threshold(self):
        """A threshold beyond the diameter allows every reachable pair, never unreachable ones."""
        hops = hop_distances(graph_from_edges(5, [(0, 1), (1, 2), (3, 4)]))
        for threshold in (10, None):
            mask = attention_mask(hops, threshold)
            np.testing.assert_array_equal(mask, hops.reachable)

    def test_mask_bad_threshold(self):
        """Threshold must be at least 1."""
        hops = hop_distances(graph_from_edges(2, [(0, 1)]))
        with self.assertRaises(InvalidInputError):
            attention_mask(hops, 0)

    def test_buckets(self):
        """Finite hops are clipped; unreachable pairs get max_bucket + 1."""
        phi = np.array([[0, 9], [UNREACHABLE, 3]])
        np.testing.assert_array_equal(bucket_hops(phi, 4), [[0, 4], [5, 3]])

    def test_deterministic(self):
        """Identical inputs give identical matrices."""
        doc = random_document(np.random.default_rng(2), 20)
        a = hop_distances(build_knn_graph(pairwise_sigma(doc).dist, 4)).phi
        b = hop_distances(build_knn_graph(pairwise_sigma(doc).dist, 4)).phi
        np.testing.assert_array_equal(a, b)


class TestSpatialBundle(unittest.TestCase):
    """Test cases for the per-document bundle."""

    def test_bundle(self):
        """Bundle shapes follow the document and config."""
        doc = random_document(np.random.default_rng(1), 9)
        bundle = build_spatial_bundle(doc, ModelConfig(k=2, hop_threshold=1))
        self.assertEqual(bundle.n, 9)
        self.assertEqual(bundle.sigma.shape, (9, 9, 2))
        np.testing.assert_array_equal(bundle.mask, attention_mask(bundle.hops, 1))
        self.assertTrue(bundle.buckets.max() <= 5)

    def test_mask_disabled(self):
        """Without local attention every pair is allowed."""
        doc = random_document(np.random.default_rng(1), 9)
        bundle = build_spatial_bundle(doc, ModelConfig(k=1, use_local_mask=False))
        self.assertTrue(bundle.mask.all())

    def test_permuted(self):
        """Permuting a bundle permutes every pairwise matrix."""
        doc = random_document(np.random.default_rng(4), 7)
        bundle = build_spatial_bundle(doc, ModelConfig(k=2))
        order = np.random.default_rng(0).permutation(7)
        moved = bundle.permuted(order)
        np.testing.assert_array_equal(moved.hops.phi, bundle.hops.phi[np.ix_(order, order)])
        np.testing.assert_array_equal(moved.centers, bundle.centers[order])


if __name__ == '__main__':
    unittest.main()
