"""
Error types for the entity classification package.
All errors derive from ValueError so callers can keep catching ValueError.
"""


class KnnFormerError(ValueError):
    """Base error. `code` is the machine-parsable reason printed by the CLI."""

    code = 'error'


class InvalidInputError(KnnFormerError):
    code = 'invalid_input'


class InvalidShapeError(KnnFormerError):
    code = 'invalid_shape'


class InvalidMaskError(KnnFormerError):
    code = 'invalid_mask'


class NonFiniteGradientError(KnnFormerError):
    code = 'non_finite_gradient'


class DuplicateKeyError(KnnFormerError):
    code = 'duplicate_key'


class MissingEmbeddingError(KnnFormerError):
    code = 'missing_embedding'

    def __init__(self, missing_keys):
        self.missing_keys = list(missing_keys)
        shown = ', '.join(f"{doc}#{idx}" for doc, idx in self.missing_keys[:20])
        more = '' if len(self.missing_keys) <= 20 else f" (+{len(self.missing_keys) - 20} more)"
        super().__init__(f"Missing embeddings for {len(self.missing_keys)} entities: {shown}{more}")


class UnknownCategoryError(KnnFormerError):
    code = 'unknown_category'


class MalformedBoxError(KnnFormerError):
    code = 'malformed_box'


class DuplicateUniqueFieldError(KnnFormerError):
    code = 'duplicate_unique_field'


class InvalidGoldDataError(KnnFormerError):
    code = 'invalid_gold_data'


class InfeasibleDocumentError(KnnFormerError):
    code = 'infeasible_document'


class CheckpointIncompatibleError(KnnFormerError):
    code = 'checkpoint_incompatible'


class ConfigError(KnnFormerError):
    code = 'config_error'


class SplitError(KnnFormerError):
    code = 'split_error'


class EmptyDatasetError(KnnFormerError):
    code = 'empty_dataset'
