"""
Matching service for the entity classification package.
Minimum-cost one-to-one assignment between entities and field categories:
the Hungarian solver, padded gold-label costs, the set loss and the
one-to-one decoder used at inference.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.services.numerics import cross_entropy, embedding_lookup, softmax_array
from app.utils.errors import InfeasibleDocumentError, InvalidGoldDataError, InvalidInputError

logger = logging.getLogger(__name__)

LOSS_MODES = ('per_entity_ce', 'matched_ce')
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Assignment:
    """Row -> column bijection and its total cost."""

    permutation: np.ndarray
    total_cost: float


def _validate_cost(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidInputError(f"Cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("Cost matrix has non-finite entries")
    return cost


def _solve_potentials(cost):
    """
    Shortest augmenting path Hungarian method with row/column potentials.

    Returns the assignment and duals u, v with u_i + v_j <= c_ij everywhere
    and equality on assigned cells.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # p[j] = row (1-based) holding column j; column 0 is the virtual start
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0

            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]

            used_cols = np.flatnonzero(used)
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[1:][free] -= delta

            j0 = j1
            if p[j0] == 0:
                break

        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    assignment = np.empty(n, dtype=np.int64)
    assignment[p[1:] - 1] = np.arange(n)
    return assignment, u[1:], v[1:]


def _reroute(start_row, target_col, banned_col, locked, tight, assignment, row_of):
    """
    Find an alternating path of tight edges that gives `start_row` a new
    column and ends at `target_col`, avoiding locked columns and `banned_col`.
    Applies the path and returns True when one exists.
    """
    parent = {}
    queue = [start_row]
    head = 0
    while head < len(queue):
        row = queue[head]
        head += 1
        for col in np.flatnonzero(tight[row]):
            if locked[col] or col == banned_col or col in parent:
                continue
            parent[col] = row
            if col == target_col:
                while True:
                    taker = parent[col]
                    previous = assignment[taker]
                    assignment[taker] = col
                    row_of[col] = taker
                    if taker == start_row:
                        return True
                    col = previous
            queue.append(row_of[col])
    return False


def _lexicographic(cost, assignment, u, v):
    """
    Smallest optimal assignment in lexicographic order.

    An assignment is optimal iff it only uses tight cells (c_ij == u_i + v_j)
    for optimal duals, so rows are fixed in order to the lowest tight column
    that still admits a perfect tight matching.
    """
    n = cost.shape[0]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    tight[np.arange(n), assignment] = True

    row_of = np.empty(n, dtype=np.int64)
    row_of[assignment] = np.arange(n)
    locked = np.zeros(n, dtype=bool)

    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if locked[j]:
                continue
            if assignment[i] == j:
                break
            old = assignment[i]
            if _reroute(row_of[j], old, j, locked, tight, assignment, row_of):
                assignment[i] = j
                row_of[j] = i
                break
        locked[assignment[i]] = True
    return assignment


def hungarian(cost):
    """
    Solve the square linear assignment problem.

    Ties between optimal assignments go to the lexicographically smallest
    permutation, so results are reproducible.

    Args:
        cost (np.ndarray): N x N finite cost matrix

    Returns:
        Assignment: Optimal permutation (row -> column) and its total cost

    Raises:
        InvalidInputError: If the matrix is not square or has non-finite entries
    """
    cost = _validate_cost(cost)
    n = cost.shape[0]
    if n == 0:
        return Assignment(permutation=np.zeros(0, dtype=np.int64), total_cost=0.0)

    assignment, u, v = _solve_potentials(cost)
    assignment = _lexicographic(cost, assignment, u, v)
    total = float(cost[np.arange(n), assignment].sum())
    return Assignment(permutation=assignment, total_cost=total)


def _match_cost(probs, kind):
    if kind == 'prob':
        return -probs
    if kind == 'log_prob':
        return -np.log(np.maximum(probs, PROB_FLOOR))
    raise InvalidInputError(f"Unknown matching cost {kind!r}")


def _check_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise InvalidInputError(f"Probabilities must be N x C, got shape {probs.shape}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise InvalidInputError("Probability rows must sum to 1")
    return probs


def label_indices(labels, schema):
    """Convert category names (or indices, or None) to class indices; None and -1 mean unlabeled (-1)."""
    indices = []
    for label in labels:
        if label is None or (isinstance(label, (int, np.integer)) and label == -1):
            indices.append(-1)
        elif isinstance(label, (int, np.integer)):
            if not 0 <= label < schema.num_classes:
                raise InvalidInputError(f"Class index {label} out of range")
            indices.append(int(label))
        else:
            indices.append(schema.index_of(label))
    return np.asarray(indices, dtype=np.int64)


def build_padded_cost(probs, labels, schema, cost_kind='prob'):
    """
    Cost matrix between N predictions and the N padded gold labels.

    Each gold label occurrence gets one column (unique categories once,
    others with their multiplicity); missing columns are padded with the
    schema's pad category ('others').

    Args:
        probs (np.ndarray): N x C class probabilities
        labels (list): Gold category per entity (name, index or None)
        schema (LabelSchema): Categories and uniqueness flags
        cost_kind (str): 'prob' (negated probability) or 'log_prob'

    Returns:
        tuple: (N x N cost matrix, length-N array of column classes)

    Raises:
        InvalidGoldDataError: If a unique category occurs more than once
    """
    probs = _check_probs(probs)
    n = probs.shape[0]
    gold = label_indices(labels, schema)
    if gold.shape != (n,):
        raise InvalidInputError(f"Got {gold.size} labels for {n} predictions")

    for idx in schema.unique_indices:
        count = int((gold == idx).sum())
        if count > 1:
            raise InvalidGoldDataError(f"Unique category {schema.names[idx]!r} appears {count} times")

    columns = gold[gold >= 0]
    padding = np.full(n - columns.size, schema.pad_index, dtype=np.int64)
    columns = np.concatenate([columns, padding])

    cost = _match_cost(probs, cost_kind)[:, columns]
    return cost, columns


def set_loss(logits, labels, schema, mode='per_entity_ce', cost_kind='prob'):
    """
    Training loss for one document.

    per_entity_ce: mean cross-entropy of each labeled entity against its own label.
    matched_ce: match the labeled entities to their gold labels first (no
    gradient through the matching), then mean cross-entropy against the
    matched classes.

    Unlabeled entities (None) are left out of both losses.

    Args:
        logits (Tensor): N x C logits
        labels (list): Gold categories per entity (None for unlabeled)
        schema (LabelSchema): Categories
        mode (str): 'per_entity_ce' or 'matched_ce'
        cost_kind (str): Matching cost for matched_ce

    Returns:
        Tensor: Scalar loss
    """
    if mode not in LOSS_MODES:
        raise InvalidInputError(f"Unknown loss mode {mode!r}")
    gold = label_indices(labels, schema)
    if gold.shape != (logits.shape[0],):
        raise InvalidInputError(f"Got {gold.size} labels for {logits.shape[0]} entities")

    labeled = np.flatnonzero(gold >= 0)
    if labeled.size == 0:
        raise InvalidGoldDataError("Document has no labeled entities")
    if labeled.size < gold.size:
        logits, gold = embedding_lookup(logits, labeled), gold[labeled]

    if mode == 'per_entity_ce':
        return cross_entropy(logits, gold)

    probs = softmax_array(logits.data)
    cost, columns = build_padded_cost(probs, gold, schema, cost_kind)
    assignment = hungarian(cost)
    return cross_entropy(logits, columns[assignment.permutation])


def decode_argmax(probs):
    """Per-entity argmax decoding (matching ablated)."""
    return np.argmax(np.asarray(probs), axis=1).astype(np.int64)


def decode_one_to_one(probs, schema, cost_kind='prob'):
    """
    Decode so that every unique category goes to exactly one entity.

    Columns are one per unique category plus N - U free columns whose cost is
    the best non-unique class probability; entities matched to a free column
    take their best non-unique class.

    Args:
        probs (np.ndarray): N x C class probabilities
        schema (LabelSchema): Categories and uniqueness flags
        cost_kind (str): 'prob' or 'log_prob'

    Returns:
        np.ndarray: Predicted class index per entity

    Raises:
        InfeasibleDocumentError: If N is smaller than the number of unique categories
    """
    probs = _check_probs(probs)
    n = probs.shape[0]
    unique = np.asarray(schema.unique_indices, dtype=np.int64)
    free = np.asarray(schema.non_unique_indices, dtype=np.int64)
    u = unique.size

    if n < u:
        raise InfeasibleDocumentError(
            f"Document has {n} entities but the schema has {u} unique categories"
        )
    if n > u and free.size == 0:
        raise InfeasibleDocumentError(
            f"Document has {n} entities but the schema has only {u} categories, all unique"
        )

    cost = np.empty((n, n))
    base = _match_cost(probs, cost_kind)
    cost[:, :u] = base[:, unique]
    if n > u:
        cost[:, u:] = base[:, free].min(axis=1)[:, None]

    assignment = hungarian(cost)
    predictions = np.empty(n, dtype=np.int64)
    for i, col in enumerate(assignment.permutation):
        if col < u:
            predictions[i] = unique[col]
        else:
            predictions[i] = free[np.argmax(probs[i, free])]
    return predictions


def count_unique_violations(predictions, schema):
    """
    Count (document, unique category) pairs not predicted exactly once.

    Args:
        predictions (list of np.ndarray): Class indices per document
        schema (LabelSchema): Categories

    Returns:
        int: Number of violations
    """
    violations = 0
    for doc_predictions in predictions:
        doc_predictions = np.asarray(doc_predictions)
        for idx in schema.unique_indices:
            if int((doc_predictions == idx).sum()) != 1:
                violations += 1
    return violations
