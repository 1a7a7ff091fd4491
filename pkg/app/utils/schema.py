"""
Label schema utility for the entity classification package.
Defines the field categories, their uniqueness flags and the schema file format.
"""

import json
import logging
from dataclasses import dataclass

from app.utils.errors import ConfigError, UnknownCategoryError

logger = logging.getLogger(__name__)

SCHEMA_FORMAT_VERSION = 1

# Default ID-document categories; the first six appear exactly once per document
POI_CATEGORIES = [
    ('last_name', True),
    ('first_name', True),
    ('date_of_birth', True),
    ('date_of_issue', True),
    ('date_of_expiry', True),
    ('id_number', True),
    ('key', False),
    ('others', False),
]

# Category name aliases (for annotation files written by hand)
CATEGORY_ALIASES = {
    'last name': 'last_name',
    'surname': 'last_name',
    'first name': 'first_name',
    'given name': 'first_name',
    'date of birth': 'date_of_birth',
    'dob': 'date_of_birth',
    'date of issue': 'date_of_issue',
    'doi': 'date_of_issue',
    'date of expiry': 'date_of_expiry',
    'doe': 'date_of_expiry',
    'id number': 'id_number',
    'id no.': 'id_number',
    'other': 'others',
}

PAD_CATEGORY = 'others'


def get_normalized_category(name):
    """
    Get the canonical category name from a raw label.

    Args:
        name (str): The category name or an alias

    Returns:
        str: The normalized name (lower case, aliases resolved)
    """
    key = name.strip().lower()
    return CATEGORY_ALIASES.get(key, key.replace(' ', '_'))


@dataclass(frozen=True)
class LabelSchema:
    """Ordered field categories with per-category uniqueness flags."""

    names: tuple
    unique: tuple

    def __post_init__(self):
        if len(self.names) != len(self.unique):
            raise ConfigError("Schema names and uniqueness flags differ in length")
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"Schema category names must be unique: {list(self.names)}")
        if len(self.names) < 2:
            raise ConfigError("Schema needs at least two categories")

    @property
    def num_classes(self):
        return len(self.names)

    @property
    def unique_indices(self):
        return [i for i, flag in enumerate(self.unique) if flag]

    @property
    def non_unique_indices(self):
        return [i for i, flag in enumerate(self.unique) if not flag]

    @property
    def unique_names(self):
        return [self.names[i] for i in self.unique_indices]

    @property
    def pad_index(self):
        """Index used for padded label columns; 'others' when present, else the first non-unique category."""
        if PAD_CATEGORY in self.names:
            return self.names.index(PAD_CATEGORY)
        if self.non_unique_indices:
            return self.non_unique_indices[0]
        raise ConfigError("Schema has no non-unique category to pad with")

    def index_of(self, name):
        """
        Get the class index of a category.

        Args:
            name (str): Category name or alias

        Returns:
            int: Index into `names`

        Raises:
            UnknownCategoryError: If the category is not part of the schema
        """
        normalized = get_normalized_category(name)
        try:
            return self.names.index(normalized)
        except ValueError:
            raise UnknownCategoryError(f"Unknown category: {name!r}") from None

    def is_unique(self, name):
        return self.unique[self.index_of(name)]

    def to_list(self):
        return [
            {'name': n, 'unique': u, 'format_version': SCHEMA_FORMAT_VERSION}
            for n, u in zip(self.names, self.unique)
        ]


def default_schema():
    """Get the default eight-category ID-document schema."""
    return LabelSchema(
        names=tuple(n for n, _ in POI_CATEGORIES),
        unique=tuple(u for _, u in POI_CATEGORIES),
    )


def load_schema(path):
    """
    Load a schema file: a JSON array of {"name": str, "unique": bool}.

    Args:
        path (str): Path to the schema file

    Returns:
        LabelSchema: The parsed schema

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: If the file is malformed
    """
    with open(path, 'r', encoding='utf-8') as f:
        records = json.load(f)

    if not isinstance(records, list):
        raise ConfigError(f"Schema file {path} must hold a JSON array")

    names, unique = [], []
    for record in records:
        version = record.get('format_version', SCHEMA_FORMAT_VERSION)
        if version > SCHEMA_FORMAT_VERSION:
            raise ConfigError(f"Unsupported schema format_version {version} in {path}")
        if 'name' not in record or not isinstance(record.get('unique'), bool):
            raise ConfigError(f"Schema entry needs 'name' and boolean 'unique': {record}")
        names.append(get_normalized_category(record['name']))
        unique.append(record['unique'])

    schema = LabelSchema(names=tuple(names), unique=tuple(unique))
    logger.info(f"Loaded schema with {schema.num_classes} categories from {path}")
    return schema


def save_schema(schema, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(schema.to_list(), f, indent=2)
