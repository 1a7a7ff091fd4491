"""
Embedder service for the entity classification package.
Loads external text embeddings (or hashes character n-grams as a fallback)
and combines them with bounding-box size embeddings into model inputs.
"""

import hashlib
import json
import logging

import numpy as np

from app.services.numerics import add, as_tensor, concat, matmul, parameter
from app.utils.errors import (
    DuplicateKeyError,
    InvalidInputError,
    InvalidShapeError,
    MissingEmbeddingError,
)

logger = logging.getLogger(__name__)

DEFAULT_TEXT_DIM = 384


def _check_coverage(mapping, corpus):
    missing = [
        (doc.id, idx)
        for doc in corpus
        for idx in range(len(doc.entities))
        if (doc.id, idx) not in mapping
    ]
    if missing:
        raise MissingEmbeddingError(missing)


def load_embeddings(path, corpus=None):
    """
    Load a JSON-lines embeddings file.

    The first line is a header {"dim": D}; every following line is
    {"doc": str, "idx": int, "vec": [float] * D}.

    Args:
        path (str): Embeddings file
        corpus (list of Document, optional): When given, every entity must be covered

    Returns:
        dict: (doc id, entity index) -> np.ndarray of length D

    Raises:
        FileNotFoundError: If the file does not exist
        DuplicateKeyError: If a (doc, idx) key repeats
        InvalidShapeError: If a vector length differs from the header dim
        MissingEmbeddingError: If a corpus entity has no vector
    """
    mapping = {}
    dim = None
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if dim is None:
                if not isinstance(record, dict) or 'dim' not in record or not isinstance(record['dim'], int) or record['dim'] < 1:
                    raise InvalidInputError(f"{path}:{line_no}: first line must be a {{\"dim\": int}} header")
                dim = record['dim']
                continue

            if not isinstance(record, dict) or not {'doc', 'idx', 'vec'} <= record.keys():
                raise InvalidInputError(f"{path}:{line_no}: record needs 'doc', 'idx' and 'vec'")
            if not isinstance(record['idx'], int) or isinstance(record['idx'], bool) or not isinstance(record['vec'], list):
                raise InvalidInputError(f"{path}:{line_no}: 'idx' must be an integer and 'vec' a list")

            key = (str(record['doc']), record['idx'])
            if key in mapping:
                raise DuplicateKeyError(f"{path}:{line_no}: duplicate embedding for {key[0]}#{key[1]}")
            try:
                vec = np.asarray(record['vec'], dtype=np.float64)
            except (TypeError, ValueError):
                raise InvalidInputError(f"{path}:{line_no}: 'vec' for {key[0]}#{key[1]} is not a list of numbers") from None
            if vec.shape != (dim,):
                raise InvalidShapeError(
                    f"{path}:{line_no}: vector for {key[0]}#{key[1]} has length {vec.size}, expected {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise InvalidInputError(f"{path}:{line_no}: non-finite values for {key[0]}#{key[1]}")
            mapping[key] = vec

    if dim is None:
        raise InvalidInputError(f"{path}: empty embeddings file")
    if corpus is not None:
        _check_coverage(mapping, corpus)

    logger.info(f"Loaded {len(mapping)} embeddings of dim {dim} from {path}")
    return mapping


def write_embeddings(path, mapping, dim):
    """Write a mapping in the JSON-lines embeddings format."""
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps({'dim': dim}) + '\n')
        for (doc_id, idx) in sorted(mapping):
            vec = np.asarray(mapping[(doc_id, idx)], dtype=np.float64)
            if vec.shape != (dim,):
                raise InvalidShapeError(f"Vector for {doc_id}#{idx} has length {vec.size}, expected {dim}")
            f.write(json.dumps({'doc': doc_id, 'idx': idx, 'vec': vec.tolist()}) + '\n')


def _char_ngrams(text, max_n=3):
    for n in range(1, max_n + 1):
        for start in range(len(text) - n + 1):
            yield text[start:start + n]


def hash_ngram_embed(text, dim=DEFAULT_TEXT_DIM, seed=0):
    """
    Deterministic text embedding from hashed character 1-3-grams.

    Each n-gram adds +1 or -1 (sign hashing) to one of `dim` buckets; the
    result is L2-normalized. Empty text gives the zero vector.

    Args:
        text (str): Entity text
        dim (int): Output dimension, at least 8
        seed (int): Hash key

    Returns:
        np.ndarray: Vector of length dim

    Raises:
        InvalidInputError: If dim < 8
    """
    if dim < 8:
        raise InvalidInputError(f"Embedding dim must be >= 8, got {dim}")

    vec = np.zeros(dim, dtype=np.float64)
    key = int(seed).to_bytes(8, 'little', signed=True)
    for gram in _char_ngrams(text):
        digest = hashlib.blake2b(gram.encode('utf-8'), digest_size=8, key=key).digest()
        h = int.from_bytes(digest, 'little')
        sign = 1.0 if (h >> 63) & 1 else -1.0
        vec[h % dim] += sign

    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def embed_corpus(corpus, dim=DEFAULT_TEXT_DIM, seed=0):
    """Hash-embed every entity of a corpus; keys match load_embeddings."""
    cache = {}
    mapping = {}
    for doc in corpus:
        for idx, entity in enumerate(doc.entities):
            if entity.text not in cache:
                cache[entity.text] = hash_ngram_embed(entity.text, dim, seed)
            mapping[(doc.id, idx)] = cache[entity.text]
    return mapping


def document_text_matrix(doc, mapping):
    """Stack a document's text embeddings into an N x D array."""
    try:
        rows = [mapping[(doc.id, idx)] for idx in range(len(doc.entities))]
    except KeyError:
        _check_coverage(mapping, [doc])
        raise
    return np.vstack(rows)


def init_embedder_params(text_dim, size_dim, hidden, rng, dtype=np.float64, std=0.02):
    """Size affine map (2 -> size_dim) and input projection (text_dim + size_dim -> hidden)."""
    return {
        'embed.size.w': parameter(rng.normal(0.0, std, (2, size_dim)), 'embed.size.w', dtype),
        'embed.size.b': parameter(np.zeros(size_dim), 'embed.size.b', dtype),
        'embed.proj.w': parameter(rng.normal(0.0, std, (text_dim + size_dim, hidden)), 'embed.proj.w', dtype),
        'embed.proj.b': parameter(np.zeros(hidden), 'embed.proj.b', dtype),
    }


def input_embedding(text_emb, size, params):
    """
    Combine text embeddings with bounding-box size embeddings.

    The (w, h) size pair goes through an affine map to the size embedding,
    is concatenated after the text embedding, and the result is projected
    to the hidden width.

    Args:
        text_emb (Tensor or np.ndarray): N x D text embeddings (frozen)
        size (Tensor or np.ndarray): N x 2 box sizes
        params (dict): Embedder parameters (see init_embedder_params)

    Returns:
        Tensor: N x hidden input embeddings

    Raises:
        InvalidShapeError: If dimensions do not match the parameters
    """
    text_emb = as_tensor(text_emb, like=params['embed.proj.w'])
    size = as_tensor(size, like=params['embed.proj.w'])
    size_dim = params['embed.size.w'].shape[1]
    text_dim = params['embed.proj.w'].shape[0] - size_dim

    if text_emb.ndim != 2 or text_emb.shape[1] != text_dim:
        raise InvalidShapeError(f"Text embeddings have shape {text_emb.shape}, expected (N, {text_dim})")
    if size.shape != (text_emb.shape[0], 2):
        raise InvalidShapeError(f"Size features have shape {size.shape}, expected ({text_emb.shape[0]}, 2)")

    size_emb = add(matmul(size, params['embed.size.w']), params['embed.size.b'])
    joined = concat([text_emb, size_emb], axis=-1)
    return add(matmul(joined, params['embed.proj.w']), params['embed.proj.b'])
