import functools
import json
import logging
import os
import sys

import click
from dotenv import load_dotenv

from app.services.dataset import corpus_statistics, parse_annotations, serialize_corpus
from app.services.experiments import run_sweep, write_table
from app.services.model import param_count
from app.services.synthetic import generate_synthetic
from app.services.trainer import (
    bind_schema,
    evaluate,
    grid_search,
    load_model,
    load_text_embeddings,
    predict,
    prepare_documents,
    resolve_corpora,
    train,
    write_predictions,
)
from app.utils.config import ablation_names, apply_ablations, load_run_config, load_synth_config
from app.utils.errors import ConfigError, KnnFormerError
from app.utils.schema import default_schema, load_schema, save_schema

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def fail(code, reason):
    """Print the one-line JSON error and exit with status 1."""
    reason = ' '.join(str(reason).split())
    click.echo(json.dumps({'error': code, 'reason': reason}), err=True)
    sys.exit(1)


def handle_errors(command):
    """Turn package, I/O and JSON errors into the machine-parsable error line."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except KnnFormerError as e:
            logger.error(f"{command.__name__} failed: {e}")
            fail(e.code, e)
        except json.JSONDecodeError as e:
            logger.error(f"{command.__name__} failed: {e}")
            fail('invalid_json', e)
        except FileNotFoundError as e:
            logger.error(f"{command.__name__} failed: {e}")
            fail('not_found', e)
        except OSError as e:
            logger.error(f"{command.__name__} failed: {e}")
            fail('io_error', e)
    return wrapper


def emit(payload, out=None):
    """Write a JSON payload to `out`, or to stdout when no path is given."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        with open(out, 'w', encoding='utf-8') as f:
            f.write(text + '\n')
    else:
        click.echo(text)


def run_options(command):
    """Flags shared by every command that trains or runs a model."""
    options = [
        click.option('--config', 'config_path', type=click.Path(), help='JSON run config file.'),
        click.option('--seed', type=int, help='Random seed.'),
        click.option('--corpus', help='Annotation file.'),
        click.option('--test-corpus', help='Separate evaluation annotation file.'),
        click.option('--embeddings', help='Text embeddings file (JSON lines).'),
        click.option('--schema', help='Schema file; defaults to the ID-document categories.'),
        click.option('--checkpoint', help='Checkpoint path.'),
        click.option('--out', help='Output file.'),
        click.option('--epochs', type=int, help='Training epochs.'),
        click.option('--lr', type=float, help='Adam learning rate.'),
        click.option('--workers', type=int, help='Threads for evaluation and prediction.'),
        click.option('--split', type=click.Choice(['random', 'by_tag']), help='Split strategy when no test corpus is given.'),
        click.option('--held-out-tags', help='Comma-separated template tags held out by a by_tag split.'),
        click.option('--no-matching', is_flag=True, help='Decode with per-entity argmax.'),
        click.option('--ablate', multiple=True,
                     type=click.Choice(['hop', 'local', 'sigma', 'matching', 'abspos']),
                     help='Remove a component; repeatable.'),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def build_config(config_path=None, no_matching=False, ablate=(), **flags):
    """Run config from defaults, file, KNNF_* variables and flags, ablations applied last."""
    config = load_run_config(config_path, overrides=flags)
    ablations = list(ablate) + (['matching'] if no_matching else [])
    if ablations:
        config = apply_ablations(config, ablations).validate()
    return config


def resolve_schema(config):
    """The run's schema, and the config with its classifier head sized to it."""
    schema = load_schema(config.schema) if config.schema else default_schema()
    return bind_schema(config, schema), schema


def parse_int_list(text, option):
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ConfigError(f"Bad {option} value: {text!r}") from None


@click.group()
@click.option('--log-level', default=None, help='Logging level (default INFO, or KNNF_LOG_LEVEL).')
def cli(log_level):
    """Entity classification on document layouts with hop-aware attention."""
    load_dotenv()
    level = (log_level or os.environ.get('KNNF_LOG_LEVEL') or 'INFO').upper()
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))


@cli.command('train')
@run_options
@handle_errors
def train_command(**flags):
    """Train a model and write its best checkpoint."""
    config = build_config(**flags)
    config.validate_paths('corpus', *[p for p in ('embeddings', 'schema', 'test_corpus') if getattr(config, p)])
    config, schema = resolve_schema(config)

    train_corpus, test_corpus = resolve_corpora(config, schema)
    embeddings = load_text_embeddings(config, train_corpus + test_corpus)
    cache = {}
    train_docs = prepare_documents(train_corpus, config.model, schema, embeddings, cache)
    test_docs = prepare_documents(test_corpus, config.model, schema, embeddings, cache)

    result = train(config, train_docs, schema, test_docs, checkpoint_path=config.checkpoint)
    summary = {
        'parameters': param_count(config.model),
        'epochs_run': len(result.history),
        'best_epoch': result.best_epoch,
        'checkpoint': config.checkpoint,
        'history': result.history,
        'metrics': result.report.to_dict(),
    }
    emit(summary, config.out)


@cli.command('eval')
@run_options
@handle_errors
def eval_command(**flags):
    """Score a checkpoint on the evaluation documents."""
    config = build_config(**flags)
    config.validate_paths('corpus', 'checkpoint', *[p for p in ('embeddings', 'schema', 'test_corpus') if getattr(config, p)])
    config, schema = resolve_schema(config)

    train_corpus, test_corpus = resolve_corpora(config, schema)
    embeddings = load_text_embeddings(config, train_corpus + test_corpus)
    test_docs = prepare_documents(test_corpus, config.model, schema, embeddings)

    model = load_model(config, config.checkpoint, schema)
    report = evaluate(model, test_docs, schema, config.model.use_matching, config.matching_cost, config.workers)
    if config.out:
        report.write_report(config.out)
    else:
        emit(report.to_dict())


@cli.command('predict')
@run_options
@handle_errors
def predict_command(**flags):
    """Predict categories for every document of a corpus (labels optional)."""
    config = build_config(**flags)
    config.validate_paths('corpus', 'checkpoint', *[p for p in ('embeddings', 'schema') if getattr(config, p)])
    config, schema = resolve_schema(config)

    corpus = parse_annotations(config.corpus, schema)
    embeddings = load_text_embeddings(config, corpus)
    documents = prepare_documents(corpus, config.model, schema, embeddings)

    model = load_model(config, config.checkpoint, schema)
    records = predict(model, documents, schema, config.model.use_matching, config.matching_cost, config.workers)
    if config.out:
        write_predictions(config.out, records)
    else:
        emit({'format_version': 1, 'documents': records})


@cli.command('grid')
@run_options
@handle_errors
def grid_command(**flags):
    """Train every grid point and report macro F1 per point."""
    config = build_config(**flags)
    config.validate_paths('corpus', *[p for p in ('embeddings', 'schema', 'test_corpus') if getattr(config, p)])
    config, schema = resolve_schema(config)

    train_corpus, test_corpus = resolve_corpora(config, schema)
    embeddings = load_text_embeddings(config, train_corpus + test_corpus)
    emit(grid_search(config, train_corpus, test_corpus, schema, embeddings), config.out)


@cli.command('synth')
@click.option('--synth-config', type=click.Path(), help='JSON generator config file.')
@click.option('--seed', type=int, default=0, show_default=True, help='Random seed.')
@click.option('--out', required=True, help='Annotation file to write.')
@click.option('--schema', help='Schema file; defaults to the ID-document categories.')
@click.option('--schema-out', help='Also write the schema used to this path.')
@click.option('--templates', type=int, help='Number of layout templates.')
@click.option('--docs-per-template', type=int, help='Documents per template.')
@click.option('--entities-per-doc', type=int, help='Entities per document.')
@click.option('--hop-sensitive-fraction', type=float, help='Share of hop-sensitive documents.')
@handle_errors
def synth_command(synth_config, seed, out, schema, schema_out, **overrides):
    """Generate a synthetic corpus and print its statistics."""
    gen_config = load_synth_config(synth_config, overrides)
    schema = load_schema(schema) if schema else default_schema()
    corpus = generate_synthetic(gen_config, seed, schema)
    serialize_corpus(corpus, out)
    if schema_out:
        save_schema(schema, schema_out)

    stats = corpus_statistics(corpus)
    stats['hop_sensitive'] = sum(1 for doc in corpus if doc.meta.get('hop_sensitive'))
    stats['out'] = out
    emit(stats)


@cli.command('sweep')
@run_options
@click.option('--arm', 'arms', multiple=True,
              help="Ablation arm to compare with the full model, e.g. 'hop' or 'local+hop'; "
                   "repeatable (default: hop, matching).")
@click.option('--k-values', help='Comma-separated neighbor counts for a K sensitivity study.')
@click.option('--seeds', default='0,1,2', show_default=True, help='Comma-separated training seeds.')
@click.option('--synth-config', type=click.Path(), help='Generator config used when no corpus is given.')
@handle_errors
def sweep_command(arms, seeds, k_values, synth_config, **flags):
    """Compare ablation arms over seeds on random and held-out-template splits."""
    seed_list = parse_int_list(seeds, '--seeds')
    if not seed_list:
        raise ConfigError("--seeds needs at least one seed")
    k_list = parse_int_list(k_values, '--k-values') if k_values else []
    for arm in arms:
        ablation_names(arm)

    config = build_config(**flags)
    for name in ('corpus', 'embeddings', 'schema'):
        if getattr(config, name):
            config.validate_paths(name)
    config, schema = resolve_schema(config)

    if config.corpus:
        corpus = parse_annotations(config.corpus, schema)
    else:
        corpus = generate_synthetic(load_synth_config(synth_config), config.seed, schema, config.model.k)
    embeddings = load_text_embeddings(config, corpus)
    table = run_sweep(config, corpus, schema, embeddings, arms=arms or ('hop', 'matching'), seeds=seed_list,
                      k_values=k_list)
    if config.out:
        write_table(config.out, table)
    else:
        emit(table)


if __name__ == '__main__':
    cli()
