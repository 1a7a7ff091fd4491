"""
Geometry service for the entity classification package.
Normalizes bounding boxes and computes the pairwise distance/angle features
that bias attention.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from app.utils.errors import InvalidInputError, MalformedBoxError

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; page pixels before normalization, page fractions after."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        values = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in values):
            raise MalformedBoxError(f"Box has non-finite coordinates: {values}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise MalformedBoxError(f"Box corners out of order: {values}")

    def as_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class SigmaFeatures:
    """Pairwise centroid distance (page-diagonal units) and angle (radians, y down)."""

    dist: np.ndarray
    angle: np.ndarray

    @property
    def n(self):
        return self.dist.shape[0]


def _clamp(value, upper):
    return min(max(value, 0.0), upper)


def normalize_document(doc, page_w, page_h):
    """
    Divide every box coordinate by the page dimensions.

    Boxes reaching outside the page are clamped to it first. A document already
    flagged as normalized is returned unchanged.

    Args:
        doc (Document): Document in page pixel units
        page_w (float): Page width in pixels
        page_h (float): Page height in pixels

    Returns:
        Document: A copy with coordinates in [0, 1] and `normalized` set

    Raises:
        InvalidInputError: If a page dimension is not positive
    """
    if not (page_w > 0 and page_h > 0):
        raise InvalidInputError(f"Page dimensions must be positive, got {page_w}x{page_h}")
    if doc.normalized:
        return doc

    entities = []
    clamped = 0
    for entity in doc.entities:
        b = entity.bbox
        x0, x1 = _clamp(b.x0, page_w), _clamp(b.x1, page_w)
        y0, y1 = _clamp(b.y0, page_h), _clamp(b.y1, page_h)
        if (x0, y0, x1, y1) != (b.x0, b.y0, b.x1, b.y1):
            clamped += 1
        box = BBox(x0 / page_w, y0 / page_h, x1 / page_w, y1 / page_h)
        entities.append(replace(entity, bbox=box))

    if clamped:
        logger.debug(f"Clamped {clamped} boxes to the page in document {doc.id}")

    return replace(doc, entities=tuple(entities), page_w=page_w, page_h=page_h, normalized=True)


def centroid(b):
    """Midpoint of each axis."""
    return ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0)


def size_features(b):
    """Box width and height."""
    return (b.x1 - b.x0, b.y1 - b.y0)


def box_centers(doc):
    return np.array([centroid(e.bbox) for e in doc.entities], dtype=np.float64).reshape(-1, 2)


def box_sizes(doc):
    return np.array([size_features(e.bbox) for e in doc.entities], dtype=np.float64).reshape(-1, 2)


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


def pairwise_sigma(doc):
    """
    Compute pairwise centroid distance and angle for a normalized document.

    dist(i, j) is the Euclidean centroid distance divided by sqrt(2), so it lies
    in [0, 1] on a unit page. angle(i, j) = atan2(cy_j - cy_i, cx_j - cx_i) in
    image coordinates. Self pairs and coincident centroids get angle 0.

    Args:
        doc (Document): A normalized document with at least one entity

    Returns:
        SigmaFeatures: N x N distance and angle matrices

    Raises:
        InvalidInputError: If the document has no entities
    """
    if not doc.entities:
        raise InvalidInputError(f"Document {doc.id} has no entities")

    centers = box_centers(doc)
    dx = centers[None, :, 0] - centers[:, None, 0]
    dy = centers[None, :, 1] - centers[:, None, 1]

    dist = np.hypot(dx, dy) / SQRT2
    coincident = (dx == 0.0) & (dy == 0.0)
    angle = np.where(coincident, 0.0, wrap_angle(np.arctan2(dy, dx)))
    np.fill_diagonal(dist, 0.0)
    np.fill_diagonal(angle, 0.0)

    return SigmaFeatures(dist=dist, angle=angle)


def quantize_angle(angle, bins):
    """Snap angles to the centre of one of `bins` equal sectors of (-pi, pi]."""
    width = 2.0 * np.pi / bins
    index = np.floor((np.asarray(angle) + np.pi) / width)
    index = np.clip(index, 0, bins - 1)
    return -np.pi + (index + 0.5) * width


def sigma_tensor(features, encoding='raw', angle_bins=0):
    """
    Stack sigma features into the N x N x F input of the R maps.

    Args:
        features (SigmaFeatures): Pairwise distance and angle
        encoding (str): 'raw' -> [dist, angle]; 'sincos' -> [dist, sin, cos]
        angle_bins (int): When positive, quantize angles first

    Returns:
        np.ndarray: Feature tensor with F = 2 or 3
    """
    angle = features.angle
    if angle_bins:
        angle = quantize_angle(angle, angle_bins)
        diagonal = np.eye(features.n, dtype=bool)
        angle = np.where(diagonal, 0.0, angle)

    if encoding == 'raw':
        return np.stack([features.dist, angle], axis=-1)
    if encoding == 'sincos':
        return np.stack([features.dist, np.sin(angle), np.cos(angle)], axis=-1)
    raise InvalidInputError(f"Unknown sigma encoding: {encoding}")
