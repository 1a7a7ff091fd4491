"""
Trainer service for the entity classification package.
Prepares documents for the model, runs training with gradient accumulation
and Adam, evaluates with one-to-one or argmax decoding, writes predictions
and runs the hyperparameter grid.
"""

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.dataset import RandomSplit, TagSplit, parse_annotations, split
from app.services.embedder import document_text_matrix, embed_corpus, load_embeddings
from app.services.geometry import box_sizes, normalize_document
from app.services.graph import build_spatial_bundle
from app.services.matching import (
    count_unique_violations,
    decode_argmax,
    decode_one_to_one,
    label_indices,
    set_loss,
)
from app.services.metrics import count_matrix, merge_counts, report_from_counts
from app.services.model import KnnFormer, ModelInputs
from app.services.numerics import backward
from app.services.optimizer import Adam
from app.utils.config import apply_overrides
from app.utils.errors import (
    CheckpointIncompatibleError,
    ConfigError,
    DuplicateKeyError,
    EmptyDatasetError,
    InfeasibleDocumentError,
    InvalidShapeError,
)

logger = logging.getLogger(__name__)

PREDICTIONS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PreparedDocument:
    """A document with its model inputs, spatial bundle and gold class indices (-1 = unlabeled)."""

    doc: object
    inputs: ModelInputs
    bundle: object
    labels: np.ndarray


@dataclass
class TrainResult:
    model: KnnFormer
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = None
    report: object = None


def _graph_key(config):
    return (
        config.k,
        config.hop_threshold,
        config.max_hop_bucket,
        config.use_local_mask,
        config.sigma_encoding,
        config.angle_bins,
    )


def bind_schema(config, schema):
    """Run config whose classifier head has one output per schema category."""
    if config.model.num_classes == schema.num_classes:
        return config
    logger.info(f"Setting num_classes to {schema.num_classes} from the schema (was {config.model.num_classes})")
    model = replace(config.model, num_classes=schema.num_classes).validate()
    return replace(config, model=model)


def check_schema(model_config, schema):
    if model_config.num_classes != schema.num_classes:
        raise ConfigError(
            f"Model has {model_config.num_classes} output classes but the schema has {schema.num_classes} categories"
        )


def load_text_embeddings(config, corpus):
    """Embeddings from the configured file, or hashed character n-grams when none is set."""
    if config.embeddings:
        mapping = load_embeddings(config.embeddings, corpus)
    else:
        logger.info(f"No embeddings file given; hashing character n-grams (dim {config.model.text_dim})")
        mapping = embed_corpus(corpus, config.model.text_dim, config.embed_seed)

    dim = next(iter(mapping.values())).shape[0] if mapping else config.model.text_dim
    if dim != config.model.text_dim:
        raise InvalidShapeError(f"Embeddings have dim {dim}, model expects text_dim {config.model.text_dim}")
    return mapping


def prepare_documents(corpus, model_config, schema, embeddings, cache=None):
    """
    Build model inputs and spatial bundles for every document.

    Args:
        corpus (list of Document): Documents in pixel or normalized coordinates
        model_config (ModelConfig): Graph and encoding settings
        schema (LabelSchema): Categories for the gold labels
        embeddings (dict): (doc id, entity index) -> text vector
        cache (dict, optional): Bundles shared across calls, keyed by document and graph settings

    Returns:
        list of PreparedDocument: One per document, same order
    """
    cache = {} if cache is None else cache
    key = _graph_key(model_config)
    prepared = []
    for doc in corpus:
        normalized = doc if doc.normalized else normalize_document(doc, doc.page_w, doc.page_h)
        bundle = cache.get((doc.id, key))
        if bundle is None:
            bundle = cache[(doc.id, key)] = build_spatial_bundle(normalized, model_config)
        inputs = ModelInputs(text=document_text_matrix(doc, embeddings), sizes=box_sizes(normalized))
        prepared.append(PreparedDocument(
            doc=doc,
            inputs=inputs,
            bundle=bundle,
            labels=label_indices(doc.labels, schema),
        ))
    return prepared


def resolve_corpora(config, schema):
    """
    Train and test corpora for a run: an explicit test corpus, or a split of the corpus.

    Returns:
        tuple: (train documents, test documents)
    """
    corpus = parse_annotations(config.corpus, schema)
    if config.test_corpus:
        test_corpus = parse_annotations(config.test_corpus, schema)
        # bundles and text vectors are keyed by document id
        shared = sorted({doc.id for doc in corpus} & {doc.id for doc in test_corpus})
        if shared:
            raise DuplicateKeyError(
                f"{config.corpus} and {config.test_corpus} share document ids: {shared[:5]}"
            )
        return corpus, test_corpus
    if config.split == 'by_tag':
        return split(corpus, TagSplit(tuple(config.held_out_tags)))
    return split(corpus, RandomSplit(config.seed, config.split_ratio))


def effective_loss_mode(config):
    # matched loss needs the matching arm
    return config.loss_mode if config.model.use_matching else 'per_entity_ce'


def collect_probabilities(model, documents, workers=1):
    """Class probabilities per document; documents are spread over `workers` threads."""
    if workers <= 1 or len(documents) <= 1:
        return [model.predict_proba(item.inputs, item.bundle) for item in documents]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda item: model.predict_proba(item.inputs, item.bundle), documents))


def decode(probs, schema, use_matching=True, cost_kind='prob', doc_id=None):
    """Class indices for one document."""
    if not use_matching:
        return decode_argmax(probs)
    try:
        return decode_one_to_one(probs, schema, cost_kind)
    except InfeasibleDocumentError as e:
        raise InfeasibleDocumentError(f"Document {doc_id}: {e}") from None


def score(probabilities, documents, schema, use_matching=True, cost_kind='prob', workers=1):
    """
    Decode and score precomputed probabilities.

    Each document is decoded and counted on its own; the per-document
    TP/FP/FN matrices are merged into one report.

    Returns:
        tuple: (F1Report, list of per-document predictions, unique-field violation count)

    Raises:
        EmptyDatasetError: If there are no documents
    """
    if not documents:
        raise EmptyDatasetError("Nothing to score")

    def score_one(pair):
        probs, item = pair
        classes = decode(probs, schema, use_matching, cost_kind, item.doc.id)
        return classes, count_matrix([classes], [item.labels], schema)

    pairs = list(zip(probabilities, documents))
    if workers <= 1 or len(pairs) <= 1:
        scored = [score_one(pair) for pair in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score_one, pairs))

    predictions = [classes for classes, _ in scored]
    report = report_from_counts(merge_counts(*(counts for _, counts in scored)), schema)
    return report, predictions, count_unique_violations(predictions, schema)


def evaluate(model, documents, schema, use_matching=True, cost_kind='prob', workers=1):
    """
    Entity F1 of a model on labeled documents.

    Raises:
        EmptyDatasetError: If there is nothing to evaluate
    """
    if not documents:
        raise EmptyDatasetError("Evaluation set is empty")
    check_schema(model.config, schema)
    probabilities = collect_probabilities(model, documents, workers)
    report, _, violations = score(probabilities, documents, schema, use_matching, cost_kind, workers)
    if use_matching and violations:
        logger.warning(f"{violations} unique-field violations after one-to-one decoding")
    return report


def _run_epoch(model, optimizer, documents, schema, config, rng):
    order = rng.permutation(len(documents))
    mode = effective_loss_mode(config)
    total = 0.0
    steps = 0
    for start in range(0, len(order), config.batch_size):
        batch = order[start:start + config.batch_size]
        optimizer.zero_grad()
        for index in batch:
            item = documents[index]
            logits = model.forward(item.inputs, item.bundle)
            loss = set_loss(logits, item.labels, schema, mode, config.matching_cost)
            backward(loss)
            total += loss.item()
        if optimizer.step(grad_scale=1.0 / len(batch)):
            steps += 1
    return total / len(documents), steps


def checkpoint_meta(config, schema, epoch, score_value):
    return {
        'epoch': epoch,
        'macro_f1': score_value,
        'seed': config.seed,
        'schema': schema.to_list(),
    }


def train(config, train_docs, schema, eval_docs=None, checkpoint_path=None):
    """
    Train a model on prepared documents.

    Each Adam step averages gradients over `batch_size` documents. With an
    evaluation set the best epoch by macro F1 is kept (and `patience` stops
    early when set); without one the lowest training loss wins.

    Args:
        config (RunConfig): Run settings
        train_docs (list of PreparedDocument): Training documents
        schema (LabelSchema): Categories
        eval_docs (list of PreparedDocument, optional): Evaluation documents
        checkpoint_path (str, optional): Where to write the best parameters

    Returns:
        TrainResult: The model (best parameters loaded), history and final report
    """
    if not train_docs:
        raise EmptyDatasetError("Training set is empty")
    check_schema(config.model, schema)

    model = KnnFormer(config.model, seed=config.seed)
    optimizer = Adam(model.parameters(), lr=config.lr, on_nonfinite=config.on_nonfinite)
    rng = np.random.default_rng(config.seed)
    logger.info(f"Training {model.num_parameters()} parameters on {len(train_docs)} documents for {config.epochs} epochs")

    result = TrainResult(model=model)
    best_state = model.state_dict()
    stale = 0
    for epoch in range(1, config.epochs + 1):
        loss, steps = _run_epoch(model, optimizer, train_docs, schema, config, rng)
        entry = {'epoch': epoch, 'loss': loss, 'steps': steps}

        if eval_docs:
            report = evaluate(model, eval_docs, schema, config.model.use_matching, config.matching_cost, config.workers)
            entry['macro_f1'] = report.macro_f1
            current = report.macro_f1
            improved = result.best_score is None or current > result.best_score
            logger.info(f"epoch {epoch}: loss {loss:.6f} macro_f1 {current:.4f}")
        else:
            current = -loss
            improved = result.best_score is None or current > result.best_score
            logger.info(f"epoch {epoch}: loss {loss:.6f}")

        result.history.append(entry)
        if improved:
            result.best_score = current
            result.best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                logger.info(f"Stopping early at epoch {epoch}; best epoch {result.best_epoch}")
                break

    model.load_state_dict(best_state)
    if eval_docs:
        result.report = evaluate(model, eval_docs, schema, config.model.use_matching, config.matching_cost, config.workers)
        logger.info(f"final: epoch {result.best_epoch} macro_f1 {result.report.macro_f1:.4f}")

    if checkpoint_path:
        final_f1 = result.report.macro_f1 if result.report else None
        save_checkpoint(
            checkpoint_path,
            model.parameters(),
            config=asdict(config.model),
            meta=checkpoint_meta(config, schema, result.best_epoch, final_f1),
        )
    return result


def load_model(config, path, schema=None):
    """
    Model for a run config with parameters from a checkpoint.

    Args:
        config (RunConfig): Run settings; the model is built from `config.model`
        path (str): Checkpoint file
        schema (LabelSchema, optional): Categories the model will be used with

    Raises:
        CheckpointIncompatibleError: If tensors do not match the config's shapes,
            or the checkpoint was trained on a different schema
    """
    arrays, stored_config, meta = load_checkpoint(path)
    stored_schema = meta.get('schema')
    if schema is not None and stored_schema is not None and stored_schema != schema.to_list():
        stored_names = [entry.get('name') for entry in stored_schema]
        raise CheckpointIncompatibleError(
            f"{path} was trained on categories {stored_names}, not {list(schema.names)}"
        )
    current = asdict(config.model)
    differing = sorted(k for k, v in stored_config.items() if current.get(k, v) != v)
    if differing:
        logger.warning(f"Checkpoint was trained with different settings for: {differing}")
    model = KnnFormer(config.model, seed=config.seed)
    model.load_state_dict(arrays)
    return model


def predict(model, documents, schema, use_matching=True, cost_kind='prob', workers=1):
    """
    Per-document category predictions with confidences.

    Returns:
        list of dict: {"id", "predictions": [{"idx", "category", "confidence"}]}
    """
    if not documents:
        raise EmptyDatasetError("Nothing to predict")
    check_schema(model.config, schema)
    probabilities = collect_probabilities(model, documents, workers)
    records = []
    for probs, item in zip(probabilities, documents):
        classes = decode(probs, schema, use_matching, cost_kind, item.doc.id)
        records.append({
            'id': item.doc.id,
            'predictions': [
                {'idx': i, 'category': schema.names[c], 'confidence': float(probs[i, c])}
                for i, c in enumerate(classes)
            ],
        })
    return records


def write_predictions(path, records):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'format_version': PREDICTIONS_FORMAT_VERSION, 'documents': records}, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote predictions for {len(records)} documents to {path}")


def grid_points(grid):
    """Expand {name: [values]} into override dicts, names in sorted order."""
    names = sorted(grid)
    for values in itertools.product(*(grid[name] for name in names)):
        yield dict(zip(names, values))


def grid_search(config, train_corpus, eval_corpus, schema, embeddings):
    """
    Train once per grid point and rank by evaluation macro F1.

    Args:
        config (RunConfig): Base run settings; `grid` lists the values to try
        train_corpus (list of Document): Training documents
        eval_corpus (list of Document): Selection documents
        schema (LabelSchema): Categories
        embeddings (dict): Text vectors for both corpora

    Returns:
        dict: {"results": [{"params", "macro_f1", "best_epoch"}], "best": {...}}
    """
    config = bind_schema(config, schema)
    cache = {}
    results = []
    for point in grid_points(config.grid):
        try:
            run = apply_overrides(config, point).validate()
        except ConfigError as e:
            logger.warning(f"Skipping grid point {point}: {e}")
            continue
        train_docs = prepare_documents(train_corpus, run.model, schema, embeddings, cache)
        eval_docs = prepare_documents(eval_corpus, run.model, schema, embeddings, cache)
        outcome = train(run, train_docs, schema, eval_docs)
        results.append({
            'params': point,
            'macro_f1': outcome.report.macro_f1,
            'best_epoch': outcome.best_epoch,
        })
        logger.info(f"grid {point}: macro_f1 {outcome.report.macro_f1:.4f}")

    if not results:
        raise ConfigError("No valid grid point")
    best = max(results, key=lambda r: r['macro_f1'])
    return {'results': results, 'best': best}

