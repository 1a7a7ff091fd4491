"""
Shared fixtures for the test suite.
"""

import numpy as np

from app.services.dataset import Document, Entity
from app.services.geometry import BBox
from app.services.numerics import backward, no_grad


def make_document(boxes, texts=None, categories=None, page=(1.0, 1.0), normalized=False, doc_id='doc', tag=None):
    """Build a Document from [x0, y0, x1, y1] lists."""
    texts = texts or [f"t{i}" for i in range(len(boxes))]
    categories = categories or [None] * len(boxes)
    entities = tuple(
        Entity(bbox=BBox(*box), text=text, category=category)
        for box, text, category in zip(boxes, texts, categories)
    )
    return Document(id=doc_id, entities=entities, tag=tag, page_w=page[0], page_h=page[1], normalized=normalized)


def point_document(points, normalized=True, doc_id='doc'):
    """Document of zero-size boxes at the given centroids."""
    return make_document([[x, y, x, y] for x, y in points], normalized=normalized, doc_id=doc_id)


def random_document(rng, n, doc_id='doc'):
    """Normalized document with n random small boxes."""
    corners = rng.uniform(0.0, 0.9, (n, 2))
    sizes = rng.uniform(0.01, 0.1, (n, 2))
    boxes = np.concatenate([corners, corners + sizes], axis=1).tolist()
    return make_document(boxes, normalized=True, doc_id=doc_id)


def gradient_error(build_loss, tensors, rng=None, max_entries=None, eps=1e-6):
    """
    Relative error between reverse-mode and central-difference gradients.

    `build_loss` must rebuild the scalar loss from the current tensor values.
    With `max_entries`, each tensor is checked at that many random positions.
    """
    grads = backward(build_loss())
    analytic, numeric = [], []
    for tensor in tensors:
        grad = grads.get(tensor)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        positions = list(np.ndindex(tensor.shape))
        if max_entries and len(positions) > max_entries:
            picks = sorted(rng.choice(len(positions), max_entries, replace=False))
            positions = [positions[i] for i in picks]
        for pos in positions:
            original = tensor.data[pos]
            tensor.data[pos] = original + eps
            with no_grad():
                plus = build_loss().item()
            tensor.data[pos] = original - eps
            with no_grad():
                minus = build_loss().item()
            tensor.data[pos] = original
            numeric.append((plus - minus) / (2.0 * eps))
            analytic.append(grad[pos])

    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
