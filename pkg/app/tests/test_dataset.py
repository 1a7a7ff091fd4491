"""
Tests for the dataset service.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest

# Add the repository root to the path so we can import the app package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from app.services.dataset import (
    RandomSplit,
    TagSplit,
    corpus_statistics,
    parse_annotations,
    parse_document,
    serialize_corpus,
    split,
)
from app.services.geometry import normalize_document
from app.tests.helpers import make_document
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


def record(doc_id='d1', entities=None, tag='T00'):
    return {
        'id': doc_id,
        'tag': tag,
        'page': {'w': 200, 'h': 100},
        'entities': entities if entities is not None else [
            {'bbox': [10, 10, 50, 20], 'text': 'Surname', 'category': 'key'},
            {'bbox': [60, 10, 120, 20], 'text': 'DOE', 'category': 'last_name'},
            {'bbox': [10, 40, 50, 50], 'text': 'misc'},
        ],
    }


class TestParse(unittest.TestCase):
    """Test cases for annotation parsing."""

    def setUp(self):
        """Set up test fixtures."""
        self.schema = default_schema()
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Tear down test fixtures."""
        shutil.rmtree(self.test_dir)

    def write(self, records, name='corpus.json'):
        path = os.path.join(self.test_dir, name)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(records, f)
        return path

    def test_parse_document(self):
        """Entities keep their order, text and normalized category names."""
        doc = parse_document(record(), self.schema)
        self.assertEqual(doc.id, 'd1')
        self.assertEqual(doc.tag, 'T00')
        self.assertEqual((doc.page_w, doc.page_h), (200.0, 100.0))
        self.assertEqual(doc.labels, ['key', 'last_name', None])
        self.assertEqual(doc.entities[1].text, 'DOE')
        self.assertFalse(doc.normalized)
        self.assertTrue(doc.is_labeled)

    def test_category_alias(self):
        """Aliases resolve to schema names."""
        entities = [{'bbox': [0, 0, 1, 1], 'text': 'x', 'category': 'Surname'}]
        doc = parse_document(record(entities=entities), self.schema)
        self.assertEqual(doc.labels, ['last_name'])

    def test_unknown_category(self):
        """The error names the document and the entity."""
        entities = [
            {'bbox': [0, 0, 1, 1], 'text': 'x'},
            {'bbox': [0, 0, 1, 1], 'text': 'y', 'category': 'nickname'},
        ]
        with self.assertRaises(UnknownCategoryError) as ctx:
            parse_document(record(entities=entities), self.schema)
        self.assertIn('Document d1, entity 1', str(ctx.exception))

    def test_malformed_box(self):
        for bbox in ([10, 0, 5, 5], [0, 0, 1], [0, 0, 'a', 1], None):
            with self.subTest(bbox=bbox):
                with self.assertRaises(MalformedBoxError):
                    parse_document(record(entities=[{'bbox': bbox, 'text': 'x'}]), self.schema)

    def test_duplicate_unique_field(self):
        entities = [
            {'bbox': [0, 0, 1, 1], 'text': 'A', 'category': 'first_name'},
            {'bbox': [2, 0, 3, 1], 'text': 'B', 'category': 'first_name'},
        ]
        with self.assertRaises(DuplicateUniqueFieldError):
            parse_document(record(entities=entities), self.schema)

    def test_repeated_non_unique_field(self):
        """Non-unique categories may repeat."""
        entities = [
            {'bbox': [0, 0, 1, 1], 'text': 'A', 'category': 'key'},
            {'bbox': [2, 0, 3, 1], 'text': 'B', 'category': 'key'},
        ]
        self.assertEqual(parse_document(record(entities=entities), self.schema).labels, ['key', 'key'])

    def test_bad_records(self):
        """Missing id, bad page or empty entity list are invalid input."""
        with self.assertRaises(InvalidInputError):
            parse_document({'entities': []}, self.schema)
        bad_page = record()
        bad_page['page'] = {'w': 0, 'h': 100}
        with self.assertRaises(InvalidInputError):
            parse_document(bad_page, self.schema)
        with self.assertRaises(InvalidInputError):
            parse_document(record(entities=[]), self.schema)
        newer = record()
        newer['format_version'] = 99
        with self.assertRaises(InvalidInputError):
            parse_document(newer, self.schema)

    def test_parse_file(self):
        path = self.write([record('a'), record('b')])
        corpus = parse_annotations(path, self.schema)
        self.assertEqual([doc.id for doc in corpus], ['a', 'b'])

    def test_duplicate_ids(self):
        path = self.write([record('a'), record('a')])
        with self.assertRaises(DuplicateKeyError):
            parse_annotations(path, self.schema)

    def test_not_an_array(self):
        path = self.write({'id': 'a'})
        with self.assertRaises(InvalidInputError):
            parse_annotations(path, self.schema)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            parse_annotations(os.path.join(self.test_dir, 'nope.json'), self.schema)

    def test_serialize_round_trip(self):
        """Writing and re-reading keeps the corpus and is byte-stable."""
        meta_record = record('b')
        meta_record['meta'] = {'hop_sensitive': True}
        corpus = parse_annotations(self.write([record('a'), meta_record]), self.schema)

        first = os.path.join(self.test_dir, 'first.json')
        second = os.path.join(self.test_dir, 'second.json')
        serialize_corpus(corpus, first)
        again = parse_annotations(first, self.schema)
        serialize_corpus(again, second)

        self.assertEqual(again, corpus)
        self.assertEqual(again[1].meta, {'hop_sensitive': True})
        with open(first, 'rb') as f1, open(second, 'rb') as f2:
            self.assertEqual(f1.read(), f2.read())

    def test_serialize_normalized(self):
        """Normalized documents are written back in pixels."""
        doc = normalize_document(make_document([[50, 25, 150, 75]], page=(200, 100)), 200, 100)
        path = os.path.join(self.test_dir, 'norm.json')
        serialize_corpus([doc], path)
        with open(path, 'r', encoding='utf-8') as f:
            written = json.load(f)
        self.assertEqual(written[0]['entities'][0]['bbox'], [50.0, 25.0, 150.0, 75.0])

    def test_statistics(self):
        corpus = [parse_document(record('a'), self.schema), parse_document(record('b', tag='T01'), self.schema)]
        stats = corpus_statistics(corpus)
        self.assertEqual(stats['documents'], 2)
        self.assertEqual(stats['entities'], 6)
        self.assertEqual(stats['avg_entities_per_doc'], 3.0)
        self.assertEqual(stats['categories'], {'key': 2, 'last_name': 2})
        self.assertEqual(stats['tags'], {'T00': 1, 'T01': 1})


class TestSplit(unittest.TestCase):
    """Test cases for train/test splitting."""

    def corpus(self, n, tags=None):
        tags = tags or [None] * n
        return [make_document([[0, 0, 1, 1]], doc_id=f"d{i}", tag=tags[i]) for i in range(n)]

    def test_random_sizes(self):
        """Ten documents at 0.8 give eight train and two test."""
        corpus = self.corpus(10)
        train, test = split(corpus, RandomSplit(seed=0, ratio=0.8))
        self.assertEqual((len(train), len(test)), (8, 2))
        self.assertEqual(sorted(d.id for d in train + test), sorted(d.id for d in corpus))

    def test_random_keeps_order(self):
        """Both sides follow corpus order."""
        corpus = self.corpus(12)
        position = {doc.id: i for i, doc in enumerate(corpus)}
        for side in split(corpus, RandomSplit(seed=3)):
            indices = [position[d.id] for d in side]
            self.assertEqual(indices, sorted(indices))

    def test_random_deterministic(self):
        corpus = self.corpus(15)
        a = split(corpus, RandomSplit(seed=5))
        b = split(corpus, RandomSplit(seed=5))
        self.assertEqual([d.id for d in a[1]], [d.id for d in b[1]])

    def test_full_ratio(self):
        """A ratio of 1.0 leaves no test documents."""
        with self.assertRaises(SplitError):
            split(self.corpus(10), RandomSplit(ratio=1.0))

    def test_bad_ratio(self):
        with self.assertRaises(SplitError):
            split(self.corpus(10), RandomSplit(ratio=0.0))

    def test_by_tag(self):
        """Held-out tags go to the test side only."""
        corpus = self.corpus(6, tags=['A', 'B', 'C', 'A', 'B', 'C'])
        train, test = split(corpus, TagSplit(('C',)))
        self.assertEqual([d.id for d in test], ['d2', 'd5'])
        self.assertTrue(all(d.tag != 'C' for d in train))

    def test_by_tag_errors(self):
        """Unknown tags, untagged documents and empty sides are split errors."""
        tagged = self.corpus(4, tags=['A', 'A', 'B', 'B'])
        with self.assertRaises(SplitError):
            split(tagged, TagSplit(('Z',)))
        with self.assertRaises(SplitError):
            split(tagged, TagSplit(('A', 'B')))
        with self.assertRaises(SplitError):
            split(self.corpus(3), TagSplit(('A',)))

    def test_empty_corpus(self):
        with self.assertRaises(EmptyDatasetError):
            split([], RandomSplit())


if __name__ == '__main__':
    unittest.main()
