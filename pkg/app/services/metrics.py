"""
Metrics service for the entity classification package.
Entity-level precision/recall/F1 per category and the macro average over
the unique field categories.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from app.services.matching import label_indices
from app.utils.errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CategoryScore:
    name: str
    tp: int
    fp: int
    fn: int

    @property
    def support(self):
        return self.tp + self.fn

    @property
    def precision(self):
        predicted = self.tp + self.fp
        return self.tp / predicted if predicted else 0.0

    @property
    def recall(self):
        return self.tp / self.support if self.support else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2.0 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self):
        return {
            'precision': self.precision,
            'recall': self.recall,
            'f1': self.f1,
            'support': self.support,
            'tp': self.tp,
            'fp': self.fp,
            'fn': self.fn,
        }


@dataclass(frozen=True)
class F1Report:
    """Per-category scores plus the macro F1 over supported unique categories."""

    scores: dict
    macro_f1: float
    macro_categories: tuple

    def to_dict(self):
        return {
            'per_category': {name: score.to_dict() for name, score in self.scores.items()},
            'macro_f1': self.macro_f1,
            'macro_categories': list(self.macro_categories),
        }

    def write_report(self, path, extra=None):
        """Write the report as JSON; `extra` keys are added at the top level."""
        payload = self.to_dict()
        payload.update(extra or {})
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"Wrote metrics to {path}")


def count_matrix(predictions, gold, schema):
    """
    TP/FP/FN counts per class.

    Args:
        predictions (list): Per-document predicted classes (indices or names)
        gold (list): Per-document gold classes; None entries are skipped
        schema (LabelSchema): Categories

    Returns:
        np.ndarray: num_classes x 3 integer array of (tp, fp, fn)

    Raises:
        InvalidInputError: If documents or entities are not aligned
    """
    if len(predictions) != len(gold):
        raise InvalidInputError(f"Got predictions for {len(predictions)} documents, gold for {len(gold)}")

    counts = np.zeros((schema.num_classes, 3), dtype=np.int64)
    for doc_index, (pred, true) in enumerate(zip(predictions, gold)):
        pred = label_indices(pred, schema)
        true = label_indices(true, schema)
        if pred.shape != true.shape:
            raise InvalidInputError(
                f"Document {doc_index}: {pred.size} predictions for {true.size} gold labels"
            )
        labeled = true >= 0
        pred, true = pred[labeled], true[labeled]
        hit = pred == true
        np.add.at(counts[:, 0], true[hit], 1)
        np.add.at(counts[:, 1], pred[~hit], 1)
        np.add.at(counts[:, 2], true[~hit], 1)
    return counts


def merge_counts(*counts):
    """Sum count matrices from disjoint document sets."""
    if not counts:
        raise InvalidInputError("merge_counts needs at least one count matrix")
    return np.sum(np.stack(counts), axis=0)


def report_from_counts(counts, schema):
    scores = {
        name: CategoryScore(name, int(tp), int(fp), int(fn))
        for name, (tp, fp, fn) in zip(schema.names, counts)
    }
    macro = tuple(
        name for name in schema.unique_names
        if scores[name].support > 0
    )
    macro_f1 = float(np.mean([scores[name].f1 for name in macro])) if macro else 0.0
    return F1Report(scores=scores, macro_f1=macro_f1, macro_categories=macro)


def entity_f1(predictions, gold, schema):
    """
    Entity-level F1 report.

    Args:
        predictions (list): Per-document predicted classes
        gold (list): Per-document gold classes
        schema (LabelSchema): Categories

    Returns:
        F1Report: Per-category scores and macro F1
    """
    return report_from_counts(count_matrix(predictions, gold, schema), schema)
