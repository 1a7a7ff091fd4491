"""
Dataset service for the entity classification package.
Reads and writes annotation files, summarizes corpora and splits them into
train/test partitions (random or by held-out template tag).
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from app.services.geometry import BBox
from app.utils.errors import (
    DuplicateKeyError,
    DuplicateUniqueFieldError,
    EmptyDatasetError,
    InvalidInputError,
    MalformedBoxError,
    SplitError,
    UnknownCategoryError,
)
from app.utils.schema import default_schema

logger = logging.getLogger(__name__)

ANNOTATION_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Entity:
    """One OCR box: coordinates, recognized text and optional gold category."""

    bbox: BBox
    text: str
    category: str = None


@dataclass(frozen=True)
class Document:
    """A page of entities. Coordinates are pixels until `normalized` is set."""

    id: str
    entities: tuple
    tag: str = None
    page_w: float = 1.0
    page_h: float = 1.0
    normalized: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def labels(self):
        return [e.category for e in self.entities]

    @property
    def is_labeled(self):
        return any(e.category is not None for e in self.entities)


@dataclass(frozen=True)
class RandomSplit:
    seed: int = 0
    ratio: float = 0.8


@dataclass(frozen=True)
class TagSplit:
    held_out_tags: tuple = ()


def _number(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidInputError(f"{what} must be a number, got {value!r}")
    return float(value)


def _parse_entity(raw, doc_id, idx, schema):
    where = f"Document {doc_id}, entity {idx}"
    if not isinstance(raw, dict):
        raise InvalidInputError(f"{where}: entity must be an object")

    coords = raw.get('bbox')
    if not isinstance(coords, list) or len(coords) != 4:
        raise MalformedBoxError(f"{where}: bbox must be [x0, y0, x1, y1], got {coords!r}")
    try:
        box = BBox(*(_number(c, 'bbox coordinate') for c in coords))
    except (MalformedBoxError, InvalidInputError) as e:
        raise MalformedBoxError(f"{where}: {e}") from None

    category = raw.get('category')
    if category is not None:
        try:
            category = schema.names[schema.index_of(category)]
        except UnknownCategoryError:
            raise UnknownCategoryError(f"{where}: unknown category {category!r}") from None

    text = raw.get('text', '')
    if not isinstance(text, str):
        raise InvalidInputError(f"{where}: text must be a string")
    return Entity(bbox=box, text=text, category=category)


def _check_unique_fields(doc, schema):
    seen = {}
    for idx, entity in enumerate(doc.entities):
        if entity.category is None or not schema.is_unique(entity.category):
            continue
        if entity.category in seen:
            raise DuplicateUniqueFieldError(
                f"Document {doc.id}, entity {idx}: category {entity.category!r} "
                f"already assigned to entity {seen[entity.category]}"
            )
        seen[entity.category] = idx


def parse_document(record, schema, position=0):
    """
    Validate one annotation record and build its Document.

    Args:
        record (dict): {"id", "tag", "page": {"w", "h"}, "entities": [...]}
        schema (LabelSchema): Allowed categories
        position (int): Record position, used when the id is missing

    Returns:
        Document: The parsed document (pixel coordinates)
    """
    if not isinstance(record, dict):
        raise InvalidInputError(f"Record {position} must be an object")
    if 'id' not in record:
        raise InvalidInputError(f"Record {position} has no id")
    doc_id = str(record['id'])

    version = record.get('format_version', ANNOTATION_FORMAT_VERSION)
    if not isinstance(version, int) or version > ANNOTATION_FORMAT_VERSION:
        raise InvalidInputError(f"Document {doc_id}: unsupported format_version {version!r}")

    page = record.get('page') or {}
    page_w = _number(page.get('w'), f"Document {doc_id}: page width")
    page_h = _number(page.get('h'), f"Document {doc_id}: page height")
    if page_w <= 0 or page_h <= 0:
        raise InvalidInputError(f"Document {doc_id}: page dimensions must be positive")

    raw_entities = record.get('entities')
    if not isinstance(raw_entities, list) or not raw_entities:
        raise InvalidInputError(f"Document {doc_id}: needs at least one entity")

    entities = tuple(_parse_entity(raw, doc_id, idx, schema) for idx, raw in enumerate(raw_entities))
    tag = record.get('tag')
    doc = Document(
        id=doc_id,
        entities=entities,
        tag=None if tag is None else str(tag),
        page_w=page_w,
        page_h=page_h,
        meta=dict(record.get('meta') or {}),
    )
    _check_unique_fields(doc, schema)
    return doc


def parse_annotations(path, schema=None):
    """
    Load an annotation file.

    Args:
        path (str): JSON file holding a top-level array of document records
        schema (LabelSchema, optional): Categories, defaults to the ID-document schema

    Returns:
        list of Document: The corpus, in file order

    Raises:
        FileNotFoundError: If the file does not exist
        UnknownCategoryError, MalformedBoxError, DuplicateUniqueFieldError:
            On invalid records (the message names document and entity)
    """
    schema = schema or default_schema()
    with open(path, 'r', encoding='utf-8') as f:
        records = json.load(f)

    if not isinstance(records, list):
        raise InvalidInputError(f"{path}: annotation file must hold a JSON array")

    corpus = []
    seen = set()
    for position, record in enumerate(records):
        doc = parse_document(record, schema, position)
        if doc.id in seen:
            raise DuplicateKeyError(f"{path}: duplicate document id {doc.id}")
        seen.add(doc.id)
        corpus.append(doc)

    logger.info(f"Parsed {len(corpus)} documents from {path}")
    return corpus


def _pixel_box(doc, box):
    if not doc.normalized:
        return box.as_list()
    return [box.x0 * doc.page_w, box.y0 * doc.page_h, box.x1 * doc.page_w, box.y1 * doc.page_h]


def document_record(doc):
    """Annotation-file record for one document."""
    record = {
        'id': doc.id,
        'tag': doc.tag,
        'page': {'w': doc.page_w, 'h': doc.page_h},
        'entities': [
            {'bbox': _pixel_box(doc, e.bbox), 'text': e.text, 'category': e.category}
            for e in doc.entities
        ],
        'format_version': ANNOTATION_FORMAT_VERSION,
    }
    if doc.meta:
        record['meta'] = doc.meta
    return record


def serialize_corpus(corpus, path):
    """Write a corpus in the annotation format (pixel coordinates)."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump([document_record(doc) for doc in corpus], f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')
    logger.info(f"Wrote {len(corpus)} documents to {path}")


def corpus_statistics(corpus):
    """
    Summary counts of a corpus.

    Returns:
        dict: documents, entities, avg_entities_per_doc, categories, tags
    """
    categories = Counter()
    tags = Counter()
    entities = 0
    for doc in corpus:
        entities += len(doc.entities)
        tags[doc.tag or ''] += 1
        categories.update(e.category for e in doc.entities if e.category is not None)

    return {
        'documents': len(corpus),
        'entities': entities,
        'avg_entities_per_doc': entities / len(corpus) if corpus else 0.0,
        'categories': dict(sorted(categories.items())),
        'tags': dict(sorted(tags.items())),
    }


def split(corpus, strategy):
    """
    Partition a corpus into train and test documents.

    Both sides keep the corpus order.

    Args:
        corpus (list of Document): Nonempty corpus
        strategy (RandomSplit or TagSplit): How to partition

    Returns:
        tuple: (train documents, test documents)

    Raises:
        EmptyDatasetError: If the corpus is empty
        SplitError: If either side would be empty, a held-out tag is unknown
            or a document has no tag in a by-tag split
    """
    if not corpus:
        raise EmptyDatasetError("Cannot split an empty corpus")

    if isinstance(strategy, RandomSplit):
        if not 0.0 < strategy.ratio <= 1.0:
            raise SplitError(f"Split ratio must be in (0, 1], got {strategy.ratio}")
        n_train = int(math.floor(strategy.ratio * len(corpus) + 0.5))
        order = np.random.default_rng(strategy.seed).permutation(len(corpus))
        in_train = np.zeros(len(corpus), dtype=bool)
        in_train[order[:n_train]] = True
    elif isinstance(strategy, TagSplit):
        untagged = [doc.id for doc in corpus if doc.tag is None]
        if untagged:
            raise SplitError(f"By-tag split needs tagged documents; untagged: {untagged[:5]}")
        known = {doc.tag for doc in corpus}
        unknown = sorted(set(strategy.held_out_tags) - known)
        if unknown:
            raise SplitError(f"Unknown held-out tags: {unknown}")
        held_out = set(strategy.held_out_tags)
        in_train = np.array([doc.tag not in held_out for doc in corpus])
    else:
        raise SplitError(f"Unknown split strategy: {strategy!r}")

    train = [doc for doc, keep in zip(corpus, in_train) if keep]
    test = [doc for doc, keep in zip(corpus, in_train) if not keep]
    if not train or not test:
        raise SplitError(f"Split leaves an empty side ({len(train)} train / {len(test)} test)")

    logger.info(f"Split {len(corpus)} documents into {len(train)} train / {len(test)} test")
    return train, test
