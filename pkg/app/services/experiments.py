"""
Experiments service for the entity classification package.
Ablation sweeps: the full model and each ablation arm trained over several
seeds on a random split and a held-out-template split, optionally with a
neighbor-count (K) sensitivity study.
"""

import json
import logging
from dataclasses import replace

import numpy as np

from app.services.dataset import RandomSplit, TagSplit, split
from app.services.trainer import bind_schema, collect_probabilities, prepare_documents, score, train
from app.utils.config import ablation_names, apply_ablations
from app.utils.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_ARMS = ('hop', 'matching')


def default_held_out_tags(corpus, fraction=0.2):
    """The last `fraction` of the sorted template tags (at least one)."""
    tags = sorted({doc.tag for doc in corpus if doc.tag is not None})
    if len(tags) < 2:
        raise ConfigError("A by-tag split needs at least two template tags")
    count = max(1, int(round(fraction * len(tags))))
    return tuple(tags[-count:])


def _split_corpus(corpus, strategy_name, config):
    if strategy_name == 'random':
        return split(corpus, RandomSplit(config.seed, config.split_ratio))
    tags = tuple(config.held_out_tags) or default_held_out_tags(corpus)
    return split(corpus, TagSplit(tags))


def run_arm(config, train_corpus, test_corpus, schema, embeddings, cache):
    """
    Train one configuration and score it with both decoders.

    Returns:
        dict: macro F1 with one-to-one and argmax decoding plus violation counts
    """
    train_docs = prepare_documents(train_corpus, config.model, schema, embeddings, cache)
    test_docs = prepare_documents(test_corpus, config.model, schema, embeddings, cache)
    outcome = train(config, train_docs, schema)
    probabilities = collect_probabilities(outcome.model, test_docs, config.workers)
    matched, _, matched_violations = score(probabilities, test_docs, schema, True, config.matching_cost)
    argmax, _, argmax_violations = score(probabilities, test_docs, schema, False)
    decoded = matched if config.model.use_matching else argmax
    return {
        'macro_f1': decoded.macro_f1,
        'matching_f1': matched.macro_f1,
        'argmax_f1': argmax.macro_f1,
        'matching_violations': matched_violations,
        'argmax_violations': argmax_violations,
        'final_loss': outcome.history[-1]['loss'] if outcome.history else None,
    }


def _run_seeds(base, seeds, label, train_corpus, test_corpus, schema, embeddings, cache):
    runs = {}
    for seed in seeds:
        outcome = run_arm(replace(base, seed=seed), train_corpus, test_corpus, schema, embeddings, cache)
        runs[str(seed)] = outcome
        logger.info(f"sweep {label} seed {seed}: macro_f1 {outcome['macro_f1']:.4f}")
    return {
        'runs': runs,
        'mean_macro_f1': float(np.mean([r['macro_f1'] for r in runs.values()])),
    }


def run_sweep(config, corpus, schema, embeddings, arms=DEFAULT_ARMS, seeds=DEFAULT_SEEDS,
              strategies=('random', 'by_tag'), k_values=()):
    """
    Train the full model and each ablation arm for every seed and split.

    An arm removes one component (see ABLATIONS) or several joined with '+'
    ('local+hop'); its mean macro F1 is reported with the difference to the
    full model. The full model also records one-to-one against argmax
    decoding per seed. With `k_values` the full model is retrained for each
    neighbor count.

    Args:
        config (RunConfig): Base run settings (the full model)
        corpus (list of Document): Labeled corpus to split
        schema (LabelSchema): Categories
        embeddings (dict): Text vectors for the corpus
        arms (iterable of str): Ablation names or '+'-joined combinations
        seeds (iterable of int): Training seeds
        strategies (iterable of str): 'random' and/or 'by_tag'
        k_values (iterable of int): Neighbor counts for the K sensitivity study

    Returns:
        dict: {"seeds", "arms", "splits": {strategy: {"train_docs", "test_docs",
        "held_out_tags", "arms": {...}, "matching_vs_argmax": [...],
        "k_sensitivity": {k: {...}}}}}
    """
    ablated = {arm: ablation_names(arm) for arm in arms}
    for k in k_values:
        if not isinstance(k, int) or k < 1:
            raise ConfigError(f"k values must be positive integers, got {k!r}")
    config = bind_schema(config, schema)

    cache = {}
    table = {'seeds': list(seeds), 'arms': ['full', *arms], 'splits': {}}
    if k_values:
        table['k_values'] = list(k_values)
    for strategy in strategies:
        train_corpus, test_corpus = _split_corpus(corpus, strategy, config)
        section = {
            'train_docs': len(train_corpus),
            'test_docs': len(test_corpus),
            'held_out_tags': sorted({d.tag for d in test_corpus}) if strategy == 'by_tag' else [],
            'arms': {},
            'matching_vs_argmax': [],
        }
        run = (train_corpus, test_corpus, schema, embeddings, cache)

        full = section['arms']['full'] = _run_seeds(config, seeds, f"{strategy}/full", *run)
        for seed in seeds:
            outcome = full['runs'][str(seed)]
            section['matching_vs_argmax'].append({
                'seed': seed,
                'matching': outcome['matching_f1'],
                'argmax': outcome['argmax_f1'],
                'matching_violations': outcome['matching_violations'],
                'argmax_violations': outcome['argmax_violations'],
            })

        for arm, names in ablated.items():
            entry = _run_seeds(apply_ablations(config, names), seeds, f"{strategy}/{arm}", *run)
            entry['delta'] = entry['mean_macro_f1'] - full['mean_macro_f1']
            section['arms'][arm] = entry

        if k_values:
            section['k_sensitivity'] = {}
            for k in k_values:
                base = replace(config, model=replace(config.model, k=k))
                section['k_sensitivity'][str(k)] = _run_seeds(base, seeds, f"{strategy}/k={k}", *run)
        table['splits'][strategy] = section

    if 'random' in table['splits'] and 'by_tag' in table['splits']:
        table['generalization_gap'] = (
            table['splits']['random']['arms']['full']['mean_macro_f1']
            - table['splits']['by_tag']['arms']['full']['mean_macro_f1']
        )
    return table


def write_table(path, table):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(table, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote sweep table to {path}")
