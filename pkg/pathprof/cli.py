"""
Command-line interface for pathprof

This module defines every pathprof subcommand. Each one resolves a
RunConfig (JSON file or replayed run manifest, then flag overrides),
opens a catalog Run, calls the matching pipeline step and records the
files it wrote.
"""

import json
import os
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
from flask import current_app
from flask.cli import FlaskGroup

from pathprof import create_app, db, pipeline
from pathprof.config import RunConfig
from pathprof.errors import PathProfError
from pathprof.models import (
    STATUS_FAILED, STATUS_SUCCEEDED, Artifact, Run
)
from pathprof.utils.storage import sha256_file, write_run_manifest


cli = FlaskGroup(
    name='pathprof',
    help='Effective path profiler and adversarial input detector.',
    create_app=create_app,
    add_default_commands=False,
    add_version_option=False,
    load_dotenv=False,
)


def _split_list(cast: Callable[[str], Any]):
    def callback(ctx, param, value):
        if value is None:
            return None
        try:
            return [cast(v) for v in value.split(',') if v.strip()]
        except ValueError as e:
            raise click.BadParameter(str(e), ctx=ctx, param=param) from e
    return callback


def common_options(fn):
    """Options shared by every pipeline subcommand."""
    options = [
        click.option('--config', 'config_path', type=click.Path(),
                     help='RunConfig JSON or a run manifest to replay.'),
        click.option('--output-dir', help='Directory for every output.'),
        click.option('--jobs', type=click.IntRange(min=1),
                     help='Worker processes (default: CPU count).'),
        click.option('--seed', type=int, help='Run seed.'),
        click.option('--train-images', help='IDX training images.'),
        click.option('--train-labels', help='IDX training labels.'),
        click.option('--test-images', help='IDX test images.'),
        click.option('--test-labels', help='IDX test labels.'),
        click.option('--train-limit', type=click.IntRange(min=1),
                     help='Use only the first N training images.'),
        click.option('--test-limit', type=click.IntRange(min=1),
                     help='Use only the first N test images.'),
        click.option('--model', 'model_path', help='Model manifest path.'),
        click.option('--profiles', 'profiles_path',
                     help='Directory of class profiles.'),
        click.option('--theta', type=float,
                     help='Contribution ratio in (0, 1].'),
        click.option('--depth', type=click.IntRange(min=1),
                     help='Extract only the last N path layers.'),
        click.option('--weight-based/--synapse-based', default=None,
                     help='Similarity over weight or synapse sets.'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _load_config(config_path: Optional[str]) -> Tuple[RunConfig,
                                                      Dict[str, Any]]:
    """RunConfig plus the subcommand arguments recorded in a manifest."""
    if not config_path:
        return RunConfig(), {}
    return RunConfig.load(config_path)


def _resolve(options: Dict[str, Any]) -> Tuple[RunConfig, Dict[str, Any]]:
    cfg, recorded = _load_config(options.pop('config_path', None))
    jobs = options.pop('jobs', None)
    if jobs is None and cfg.jobs is None:
        jobs = current_app.config['DEFAULT_JOBS']
    cfg = cfg.with_overrides(**{
        'output_dir': options.pop('output_dir', None),
        'jobs': jobs,
        'seed': options.pop('seed', None),
        'dataset.train_images': options.pop('train_images', None),
        'dataset.train_labels': options.pop('train_labels', None),
        'dataset.test_images': options.pop('test_images', None),
        'dataset.test_labels': options.pop('test_labels', None),
        'train_limit': options.pop('train_limit', None),
        'test_limit': options.pop('test_limit', None),
        'model_path': options.pop('model_path', None),
        'profiles_path': options.pop('profiles_path', None),
        'extraction.theta': options.pop('theta', None),
        'extraction.depth': options.pop('depth', None),
        'extraction.weight_based': options.pop('weight_based', None),
    })
    arguments = {k: v for k, v in recorded.items()}
    arguments.update({k: v for k, v in options.items() if v is not None})
    return cfg.validate(), arguments


def _register(run: Run, kind: str, path: str) -> None:
    run.artifacts.append(Artifact(
        kind=kind, path=path, sha256=sha256_file(path),
        size_bytes=os.path.getsize(path)
    ))


def execute(command: str, options: Dict[str, Any],
            action: Callable[[RunConfig, Dict[str, Any]], List]) -> None:
    """
    Run one pipeline step inside a catalogued Run.

    Domain and format errors print ``Error: <message>`` and exit 1.
    """
    db.create_all()
    run = None
    try:
        cfg, arguments = _resolve(dict(options))
        run = Run(command=command,
                  config_json=json.dumps(cfg.to_dict(), sort_keys=True),
                  seed=cfg.seed)
        db.session.add(run)
        db.session.commit()
        current_app.logger.info(f'{command}: run {run.id} started')

        outputs = action(cfg, arguments)
        manifest = write_run_manifest(
            os.path.join(cfg.output_dir, f'{command}.manifest.json'),
            command, cfg.to_dict(), arguments,
            [path for _, path in outputs]
        )
        for kind, path in outputs:
            _register(run, kind, path)
        _register(run, 'manifest', manifest)
        run.manifest_path = manifest
        run.finish(STATUS_SUCCEEDED)
        db.session.commit()
        current_app.logger.info(
            f'{command}: run {run.id} wrote {len(outputs)} files'
        )
        click.echo(f'{command}: wrote {len(outputs)} files, manifest '
                   f'{manifest}')
    except click.ClickException:
        db.session.rollback()
        if run is not None and run.id is not None:
            run.finish(STATUS_FAILED, 'usage error')
            db.session.commit()
        raise
    except PathProfError as e:
        _fail(run, command, e, traceback=False)
        raise click.exceptions.Exit(e.exit_code)
    except Exception as e:
        _fail(run, command, e, traceback=True)
        raise click.exceptions.Exit(1)


def _fail(run: Optional[Run], command: str, error: Exception,
          traceback: bool) -> None:
    db.session.rollback()
    if traceback:
        current_app.logger.exception(f'{command} failed unexpectedly')
    else:
        current_app.logger.error(f'{command} failed: {error}')
    if run is not None and run.id is not None:
        run.finish(STATUS_FAILED, str(error))
        db.session.commit()
    click.echo(f'Error: {error}', err=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

@cli.command('train')
@common_options
@click.option('--architecture', help='lenet or mlp.')
@click.option('--epochs', type=click.IntRange(min=1))
@click.option('--learning-rate', type=float)
@click.option('--batch-size', type=click.IntRange(min=1))
def train_command(architecture, epochs, learning_rate, batch_size,
                  **options):
    """Train a network on the training split and save it."""
    options.update(architecture=architecture, epochs=epochs,
                   learning_rate=learning_rate, batch_size=batch_size)

    def action(cfg: RunConfig, args):
        cfg = cfg.with_overrides(**{
            'architecture': args.get('architecture'),
            'train.epochs': args.get('epochs'),
            'train.learning_rate': args.get('learning_rate'),
            'train.batch_size': args.get('batch_size'),
        }).validate()
        return pipeline.run_train(cfg)
    execute('train', options, action)


@cli.command('extract')
@common_options
@click.option('--ids', callback=_split_list(int),
              help='Comma-separated test image indices.')
@click.option('--rank', type=click.IntRange(min=1),
              help='Start from the rank-k class (default 1).')
def extract_command(ids, rank, **options):
    """Extract and save the effective paths of selected test images."""
    options.update(ids=ids, rank=rank)
    execute('extract', options, lambda cfg, args: pipeline.run_extract(
        cfg, args.get('ids') or [0], args.get('rank') or 1))


@cli.command('aggregate')
@common_options
def aggregate_command(**options):
    """Build class and overall profiles and their density reports."""
    execute('aggregate', options,
            lambda cfg, args: pipeline.run_aggregate(cfg))


@cli.command('similarity')
@common_options
def similarity_command(**options):
    """Write the class-wise path similarity matrix."""
    execute('similarity', options,
            lambda cfg, args: pipeline.run_similarity(cfg))


@cli.command('attack')
@common_options
@click.option('--attacks', callback=_split_list(str),
              help='Comma-separated attack names (default: all).')
def attack_command(attacks, **options):
    """Generate the configured adversarial sets from the test split."""
    options.update(attacks=attacks)
    execute('attack', options, lambda cfg, args: pipeline.run_attack(
        cfg, args.get('attacks')))


@cli.command('featurize')
@common_options
def featurize_command(**options):
    """Write rank-1/rank-2 similarity features of normal and attack images."""
    execute('featurize', options,
            lambda cfg, args: pipeline.run_featurize(cfg))


@cli.command('detect-train')
@common_options
@click.option('--attacks', callback=_split_list(str),
              help='Attack sets in the training pool.')
@click.option('--epochs', type=click.IntRange(min=1))
def detect_train_command(attacks, epochs, **options):
    """Fit the linear joint-similarity detector."""
    options.update(attacks=attacks, epochs=epochs)

    def action(cfg: RunConfig, args):
        cfg = cfg.with_overrides(**{'detector.epochs': args.get('epochs')})
        return pipeline.run_detect_train(cfg.validate(), args.get('attacks'))
    execute('detect-train', options, action)


@cli.command('detect-eval')
@common_options
@click.option('--attacks', callback=_split_list(str),
              help='Attack sets in the evaluation pool.')
@click.option('--fpr', type=click.FloatRange(0.0, 1.0, max_open=True),
              help='False-positive rate fixing the random-image threshold.')
def detect_eval_command(attacks, fpr, **options):
    """Evaluate the detector: ROC points and AUC per attack."""
    options.update(attacks=attacks, fpr=fpr)
    execute('detect-eval', options, lambda cfg, args:
            pipeline.run_detect_eval(cfg, args.get('attacks'),
                                     args.get('fpr', 0.05)))


@cli.command('ablate')
@common_options
@click.option('--fractions', callback=_split_list(float),
              help='Comma-separated path-weight drop fractions.')
def ablate_command(fractions, **options):
    """Flip rates when path weights (or as many off-path ones) are zeroed."""
    options.update(fractions=fractions)
    execute('ablate', options, lambda cfg, args: pipeline.run_ablate(
        cfg, args.get('fractions') or [0.1, 0.25, 0.5, 0.75, 1.0]))


@cli.command('sweep-theta')
@common_options
@click.option('--values', callback=_split_list(float),
              help='Comma-separated theta values.')
@click.option('--attacks', callback=_split_list(str),
              help='Attack sets in the detector pool.')
def sweep_theta_command(values, attacks, **options):
    """Density, path size and AUC for each theta."""
    options.update(values=values, attacks=attacks)
    execute('sweep-theta', options, lambda cfg, args:
            pipeline.run_sweep_theta(cfg, _required(args, 'values'),
                                     args.get('attacks')))


@cli.command('sweep-depth')
@common_options
@click.option('--values', callback=_split_list(int),
              help='Comma-separated extraction depths.')
@click.option('--attacks', callback=_split_list(str),
              help='Attack sets in the detector pool.')
def sweep_depth_command(values, attacks, **options):
    """Detector AUC for each extraction depth."""
    options.update(values=values, attacks=attacks)
    execute('sweep-depth', options, lambda cfg, args:
            pipeline.run_sweep_depth(cfg, _required(args, 'values'),
                                     args.get('attacks')))


def _required(arguments: Dict[str, Any], name: str) -> Sequence:
    if not arguments.get(name):
        raise click.UsageError(f'--{name} is required')
    return arguments[name]


@cli.command('runs')
@click.option('--limit', type=click.IntRange(min=1), default=10,
              show_default=True)
@click.option('--command', 'command_name',
              help='Only runs of this subcommand.')
def runs_command(limit, command_name):
    """List recent runs from the catalog."""
    db.create_all()
    if command_name:
        runs = Run.for_command(command_name)[:limit]
    else:
        runs = Run.get_recent(limit=limit)
    for run in runs:
        data = run.to_dict()
        click.echo(
            f"{data['id']:>5}  {data['command']:<13} {data['status']:<10} "
            f"{data['created_at']}  artifacts={data['artifacts_count']}"
            + (f"  {data['message']}" if data['message'] else '')
        )


def main() -> None:
    cli(prog_name='pathprof')
