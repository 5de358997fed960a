"""Command orchestration for the ftrack CLI: tracking, evaluation, scorer training, synthesis.

Each run_* function does the work of one subcommand and reports progress
through click.echo. Library modules stay silent.
"""

import csv
import json
import multiprocessing
from pathlib import Path
from typing import Optional

import click
import numpy as np

from finetrack.bench import (
    PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, MeasurementError, MissingFileError, MotionSpec,
    Sequence, SynthSpecError, TrackResult, find_sequences, fps, load_sequence,
    precision_curve, read_result, result_path, success_curve, summarize, synth_sequence, write_result,
    write_sequence,
)
from finetrack.config import RunConfig, dump_config
from finetrack.localizer import (
    FrameFeatureSource, LocalizerError, feature_config_hash, fit_head, load_head, sample_training_pairs,
    save_head,
)
from finetrack.pipeline import TrackerConfig, TrackerState, track_sequence


METRIC_COLUMNS = ("auc", "precision", "normalized_precision", "ao", "sr50", "sr75")


def _frames(seq: Sequence):
    for position in range(len(seq)):
        yield seq.frame_at(position)


def _load_scorer(config: RunConfig):
    if config.head is None:
        return None
    tracker = config.tracker
    return load_head(Path(config.head), feature_config_hash(tracker.features, tracker.channel_attention))


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def track_one(seq_dir: Path, config: RunConfig, verbose: bool = False) -> tuple[str, TrackResult, dict]:
    """Track one sequence directory; returns (name, result, metric summary)."""
    seq = load_sequence(seq_dir)
    head = _load_scorer(config)

    def report(position: int, state: TrackerState) -> None:
        box = state.last_state.box
        flag = "  LOW" if state.low_confidence else ""
        click.echo(f"    [{position + 1:4d}] x={box.x:7.1f} y={box.y:7.1f} w={box.w:6.1f} h={box.h:6.1f}"
                   f"  peak={state.coarse_peak:.3f}{flag}")

    result = track_sequence(_frames(seq), seq.ground_truth[0], config.tracker, head=head,
                            on_frame=report if verbose else None)
    return seq.name, result, summarize(result, seq, config.precision_threshold)


def _track_worker(args):
    seq_dir, config = args
    return track_one(seq_dir, config)


def run_track(config: RunConfig, seq_dir: Path, out_dir: Path, verbose: bool = False) -> list[dict]:
    """Track a sequence or every sequence of a dataset; write result documents and config.json."""
    seq_dirs = find_sequences(seq_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config.json")

    click.echo(f"=== Tracking {len(seq_dirs)} sequence(s) ===")
    if config.workers > 1 and len(seq_dirs) > 1:
        click.echo(f"  Workers: {config.workers}")
        with multiprocessing.Pool(min(config.workers, len(seq_dirs))) as pool:
            outcomes = pool.map(_track_worker, [(d, config) for d in seq_dirs])
    else:
        outcomes = []
        for d in seq_dirs:
            if verbose:
                click.echo(f"  {d.name}:")
            outcomes.append(track_one(d, config, verbose=verbose))

    rows = []
    for name, result, metrics in sorted(outcomes, key=lambda o: o[0]):
        write_result(out_dir, name, result, metrics)
        try:
            rate = f"{fps(result):6.1f}"
        except MeasurementError:
            rate = "   n/a"
        flagged = sum(result.low_confidence)
        click.echo(f"  {name:20s} frames={len(result):5d}  AUC={metrics['auc']:.3f}"
                   f"  Pr={metrics['precision']:.3f}  FPS={rate}  low-conf={flagged}")
        rows.append({"name": name, **metrics})

    click.echo(f"\nResults written to {out_dir}")
    return rows


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _mean(values: list) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _fmt(value: Optional[float], width: int = 7) -> str:
    return f"{value:{width}.3f}" if value is not None else f"{'n/a':>{width}s}"


def run_eval(results_dir: Path, data_dir: Path, precision_threshold: float = 20.0) -> dict:
    """Score result documents against a dataset; writes report.json and curves.csv into results_dir."""
    results_dir = Path(results_dir)
    sequences = [load_sequence(d) for d in find_sequences(data_dir)]

    missing = [s.name for s in sequences if not result_path(results_dir, s.name).is_file()]
    if missing:
        click.echo("Missing results for:", err=True)
        for name in missing:
            click.echo(f"  - {name}", err=True)
        raise MissingFileError(results_dir, f"results for {len(missing)} sequence(s) in")

    per_sequence = {}
    curve_rows = []
    for seq in sequences:
        result = read_result(results_dir, seq.name)
        metrics = summarize(result, seq, precision_threshold)
        try:
            metrics["fps"] = fps(result)
        except MeasurementError:
            metrics["fps"] = None
        per_sequence[seq.name] = metrics

        for t, v in zip(SUCCESS_THRESHOLDS, success_curve(result, seq)):
            curve_rows.append((seq.name, "success", f"{t:.2f}", f"{v:.6f}"))
        for t, v in zip(PRECISION_THRESHOLDS, precision_curve(result, seq)):
            curve_rows.append((seq.name, "precision", f"{t:.0f}", f"{v:.6f}"))

    columns = METRIC_COLUMNS + ("fps",)
    mean = {c: _mean([m[c] for m in per_sequence.values()]) for c in columns}
    report = {"precision_threshold": precision_threshold, "sequences": per_sequence, "mean": mean}

    (results_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(results_dir / "curves.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("sequence", "curve", "threshold", "value"))
        writer.writerows(curve_rows)

    click.echo(f"=== Evaluation: {len(sequences)} sequence(s) ===")
    click.echo(f"  {'sequence':20s} {'AUC':>7s} {'Pr':>7s} {'NPr':>7s} {'AO':>7s} {'SR50':>7s} {'SR75':>7s} {'FPS':>7s}")
    for name, m in per_sequence.items():
        click.echo(f"  {name:20s} " + " ".join(_fmt(m[c]) for c in columns))
    click.echo(f"  {'mean':20s} " + " ".join(_fmt(mean[c]) for c in columns))
    click.echo(f"\nReport: {results_dir / 'report.json'}")
    return report


# ---------------------------------------------------------------------------
# train-scorer
# ---------------------------------------------------------------------------

def head_config_path(head_path: Path) -> Path:
    return Path(head_path).with_suffix(".config.json")


def run_train_scorer(config: RunConfig, data_dir: Path, out_path: Path) -> float:
    """Sample training pairs from every sequence, fit a head, save it. Returns the final loss.

    The effective config is written next to the head as <stem>.config.json.
    """
    tracker: TrackerConfig = config.tracker
    training = tracker.scorer
    seq_dirs = find_sequences(data_dir)

    click.echo(f"=== Training scorer on {len(seq_dirs)} sequence(s) ===")
    pairs = []
    for index, d in enumerate(seq_dirs):
        seq = load_sequence(d)
        if len(seq) < 2:
            click.echo(f"  {seq.name}: skipped (needs >= 2 frames)")
            continue
        source = FrameFeatureSource(seq.frame_at, tracker.features)
        seq_pairs = sample_training_pairs(list(seq.ground_truth), source, training,
                                          seed=config.seed + index, attention=tracker.channel_attention)
        click.echo(f"  {seq.name}: {len(seq_pairs)} pairs")
        pairs.extend(seq_pairs)
    if not pairs:
        raise LocalizerError(f"no training pairs could be sampled from {data_dir}")

    fit = fit_head(pairs, training.steps, training.step_size)
    save_head(fit.head, out_path, feature_config_hash(tracker.features, tracker.channel_attention))
    config_path = head_config_path(out_path)
    dump_config(config, config_path)

    click.echo(f"  Initial loss: {fit.initial_loss:.6f}")
    click.echo(f"  Final loss:   {fit.best_loss:.6f}  (step {fit.best_step})")
    click.echo(f"\nHead written to {out_path}")
    click.echo(f"Config written to {config_path}")
    return fit.best_loss


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def load_motion_spec(path: Path) -> MotionSpec:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "synth spec")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SynthSpecError("<file>", f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    return MotionSpec.from_dict(data)


def run_synth(spec_path: Path, out_dir: Path, seed: int = 0) -> Sequence:
    """Render a motion spec into an OTB sequence directory."""
    spec = load_motion_spec(spec_path)
    seq, frames = synth_sequence(spec, seed)
    written = write_sequence(seq, frames, out_dir)
    click.echo(f"=== Synthesized '{spec.name}' ({spec.motion}) ===")
    click.echo(f"  Frames: {len(written)}  size: {spec.width}x{spec.height}")
    click.echo(f"  Written to {out_dir}")
    return written
