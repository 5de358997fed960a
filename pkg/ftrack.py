#!/usr/bin/env python3
"""ftrack: coarse-to-fine single-object tracking.

Commands:
    track         Track a sequence (or every sequence in a dataset directory)
    eval          Score result documents against ground truth
    train-scorer  Fit the proposal scorer head on annotated sequences
    synth         Render a synthetic OTB-style sequence from a motion spec
    config        Print the default (or effective) configuration
"""

from pathlib import Path

import click

from finetrack.core import FinetrackError


def _fail(e: Exception):
    click.echo(str(e), err=True)
    raise SystemExit(1)


def _effective_config(config_path, **flags):
    from finetrack.config import RunConfig, load_config, with_overrides

    base = load_config(Path(config_path)) if config_path else RunConfig()
    return with_overrides(base, **flags)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Per-frame progress lines while tracking")
@click.pass_context
def cli(ctx, verbose):
    """Coarse-to-fine correlation-filter tracker."""
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config")
@click.option("--seq", "seq_dir", type=click.Path(), default=None, help="Sequence or dataset directory")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory for result documents")
@click.option("--seed", type=int, default=None, help="Override the config seed")
@click.option("--head", type=click.Path(), default=None, help="Offline scorer head (train-scorer output)")
@click.option("--workers", type=int, default=None, help="Sequences tracked in parallel")
@click.pass_context
def track(ctx, config_path, seq_dir, out_dir, seed, head, workers):
    """Track sequences and write <out>/<name>.json result documents.

    The effective merged config is written to <out>/config.json.
    """
    from finetrack.runner import run_track

    try:
        config = _effective_config(config_path, seed=seed, head=head, workers=workers, data=seq_dir, out=out_dir)
        if config.data is None or config.out is None:
            raise click.UsageError("--seq and --out are required (or set data/out in the config)")
        run_track(config, Path(config.data), Path(config.out), verbose=ctx.obj["verbose"])
    except FinetrackError as e:
        _fail(e)


@cli.command(name="eval")
@click.option("--results", "results_dir", type=click.Path(), required=True, help="Directory of result documents")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Dataset (or sequence) directory")
@click.option("--threshold", type=float, default=20.0, help="Precision threshold in pixels (default: 20)")
def evaluate(results_dir, data_dir, threshold):
    """Compute AUC / precision / FPS per sequence and on average.

    Writes report.json and curves.csv into the results directory.
    """
    from finetrack.runner import run_eval

    try:
        run_eval(Path(results_dir), Path(data_dir), threshold)
    except FinetrackError as e:
        _fail(e)


@cli.command(name="train-scorer")
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config")
@click.option("--data", "data_dir", type=click.Path(), default=None, help="Dataset (or sequence) directory")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Head file to write")
@click.option("--seed", type=int, default=None, help="Override the config seed")
def train_scorer(config_path, data_dir, out_path, seed):
    """Sample GIoU-labelled proposal pairs and fit the scorer head.

    The effective merged config is written beside the head as <stem>.config.json.
    """
    from finetrack.runner import run_train_scorer

    try:
        config = _effective_config(config_path, seed=seed, data=data_dir, out=out_path)
        if config.data is None or config.out is None:
            raise click.UsageError("--data and --out are required (or set data/out in the config)")
        run_train_scorer(config, Path(config.data), Path(config.out))
    except FinetrackError as e:
        _fail(e)


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(), required=True, help="JSON motion spec")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Sequence directory to create")
@click.option("--seed", type=int, default=0, help="Texture/noise seed (default: 0)")
def synth(spec_path, out_dir, seed):
    """Render a synthetic sequence (static, linear, jump or scale motion)."""
    from finetrack.runner import run_synth

    try:
        run_synth(Path(spec_path), Path(out_dir), seed)
    except FinetrackError as e:
        _fail(e)


@cli.command(name="config")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Show this file merged over defaults")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Also write the JSON here")
def show_config(config_path, out_path):
    """Print the configuration reference (every key with its default)."""
    from finetrack.config import dump_config

    try:
        config = _effective_config(config_path)
        click.echo(dump_config(config, Path(out_path) if out_path else None), nl=False)
    except FinetrackError as e:
        _fail(e)


if __name__ == "__main__":
    cli()
