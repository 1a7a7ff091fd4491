"""
Graph service for the entity classification package.
Builds the K-nearest-neighbor graph over entity centroids, the hop-distance
matrix and the local-attention mask, and bundles them per document.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.services.geometry import box_centers, normalize_document, pairwise_sigma, sigma_tensor
from app.utils.errors import InvalidInputError

logger = logging.getLogger(__name__)

UNREACHABLE = -1


@dataclass(frozen=True)
class KnnGraph:
    """Symmetric KNN adjacency with self-loops. `saturated` is set when k >= n."""

    n: int
    adjacency: np.ndarray
    k: int
    saturated: bool = False


@dataclass(frozen=True)
class HopMatrix:
    """Pairwise hop counts; UNREACHABLE (-1) marks disconnected pairs."""

    phi: np.ndarray

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def reachable(self):
        return self.phi != UNREACHABLE


@dataclass(frozen=True)
class SpatialBundle:
    """Per-document spatial precomputation consumed by the model."""

    dist: np.ndarray
    angle: np.ndarray
    sigma: np.ndarray
    graph: KnnGraph
    hops: HopMatrix
    buckets: np.ndarray
    mask: np.ndarray
    centers: np.ndarray

    @property
    def n(self):
        return self.dist.shape[0]

    def permuted(self, order):
        """Reorder entities; every pairwise matrix is permuted on both axes."""
        order = np.asarray(order)
        pair = np.ix_(order, order)
        graph = KnnGraph(
            n=self.graph.n,
            adjacency=self.graph.adjacency[pair],
            k=self.graph.k,
            saturated=self.graph.saturated,
        )
        return SpatialBundle(
            dist=self.dist[pair],
            angle=self.angle[pair],
            sigma=self.sigma[pair],
            graph=graph,
            hops=HopMatrix(self.hops.phi[pair]),
            buckets=self.buckets[pair],
            mask=self.mask[pair],
            centers=self.centers[order],
        )


def build_knn_graph(dist, k):
    """
    Connect each entity to its k nearest neighbors, symmetrize, add self-loops.

    Ties in distance go to the lower entity index. When k >= n every pair is
    connected and the graph is flagged as saturated (a warning, not an error).

    Args:
        dist (np.ndarray): Symmetric N x N distance matrix with zero diagonal
        k (int): Neighbor count

    Returns:
        KnnGraph: The undirected graph

    Raises:
        InvalidInputError: If k < 1 or dist is not square
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise InvalidInputError(f"Distance matrix must be square, got shape {dist.shape}")
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")

    n = dist.shape[0]
    if k >= n:
        if n > 1:
            logger.warning(f"k={k} >= n={n}: returning the all-pairs graph")
        return KnnGraph(n=n, adjacency=np.ones((n, n), dtype=bool), k=k, saturated=True)

    adjacency = np.zeros((n, n), dtype=bool)
    masked = dist.copy()
    np.fill_diagonal(masked, np.inf)
    # stable sort keeps the lower index first among equal distances
    order = np.argsort(masked, axis=1, kind='stable')[:, :k]
    rows = np.repeat(np.arange(n), k)
    adjacency[rows, order.ravel()] = True

    adjacency |= adjacency.T
    np.fill_diagonal(adjacency, True)
    return KnnGraph(n=n, adjacency=adjacency, k=k)


def hop_distances(graph):
    """
    All-pairs shortest path lengths by level-synchronous breadth-first search.

    Every source advances one level per iteration; self-loops never shorten a
    path. Pairs in different components get UNREACHABLE.

    Args:
        graph (KnnGraph): The graph

    Returns:
        HopMatrix: Integer hop counts
    """
    n = graph.n
    adjacency = graph.adjacency.astype(np.int64)
    phi = np.full((n, n), UNREACHABLE, dtype=np.int64)
    np.fill_diagonal(phi, 0)

    reached = np.eye(n, dtype=bool)
    frontier = reached.copy()
    level = 0
    while frontier.any():
        level += 1
        frontier = ((frontier.astype(np.int64) @ adjacency) > 0) & ~reached
        phi[frontier] = level
        reached |= frontier

    return HopMatrix(phi)


def _phi(hops):
    return hops.phi if isinstance(hops, HopMatrix) else np.asarray(hops)


def attention_mask(hops, threshold):
    """
    Allowed attention pairs: reachable with hop distance <= threshold.

    Args:
        hops (HopMatrix): Hop distances
        threshold (int or None): Hop radius; None allows every reachable pair

    Returns:
        np.ndarray: Boolean N x N mask, diagonal always allowed

    Raises:
        InvalidInputError: If threshold < 1
    """
    phi = _phi(hops)
    reachable = phi != UNREACHABLE
    if threshold is None:
        mask = reachable.copy()
    else:
        if threshold < 1:
            raise InvalidInputError(f"Hop threshold must be >= 1, got {threshold}")
        mask = reachable & (phi <= threshold)
    np.fill_diagonal(mask, True)
    return mask


def bucket_hops(hops, max_bucket):
    """
    Clip hop counts into H-table indices; UNREACHABLE gets index max_bucket + 1.

    Raises:
        InvalidInputError: If max_bucket < 1
    """
    if max_bucket < 1:
        raise InvalidInputError(f"max_bucket must be >= 1, got {max_bucket}")
    phi = _phi(hops)
    return np.where(phi == UNREACHABLE, max_bucket + 1, np.minimum(phi, max_bucket)).astype(np.int64)


def build_spatial_bundle(doc, config):
    """
    Precompute everything spatial the model needs for one document.

    Args:
        doc (Document): Document, normalized or carrying its page size
        config (ModelConfig): Supplies k, thresholds and sigma encoding

    Returns:
        SpatialBundle: Distances, angles, sigma tensor, graph, hops, buckets and mask
    """
    if not doc.normalized:
        doc = normalize_document(doc, doc.page_w, doc.page_h)

    features = pairwise_sigma(doc)
    graph = build_knn_graph(features.dist, config.k)
    hops = hop_distances(graph)
    buckets = bucket_hops(hops, config.max_hop_bucket)
    if config.use_local_mask:
        mask = attention_mask(hops, config.hop_threshold)
    else:
        mask = np.ones((graph.n, graph.n), dtype=bool)

    return SpatialBundle(
        dist=features.dist,
        angle=features.angle,
        sigma=sigma_tensor(features, config.sigma_encoding, config.angle_bins),
        graph=graph,
        hops=hops,
        buckets=buckets,
        mask=mask,
        centers=box_centers(doc),
    )
