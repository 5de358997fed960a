"""Benchmark plumbing: OTB-style sequences, overlap/precision metrics, result documents, synthetic sequences.

Sequence directory layout:
    <name>/img/0001.jpg ...          frames, paired with GT lines in sorted name order
    <name>/groundtruth_rect.txt      one "x,y,w,h" line per frame, 1-indexed pixels

Ground truth is shifted to 0-indexed pixels on load and back on write.
"""

import json
import math
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from finetrack.core import BoundingBox, FinetrackError, InvalidBoxError, center_error, iou
from finetrack.features import Frame, load_frame, save_frame


GT_FILENAME = "groundtruth_rect.txt"
IMAGE_DIRNAME = "img"
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}

SUCCESS_THRESHOLDS = np.arange(21) / 20.0
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
DEFAULT_PRECISION_PX = 20.0
NORMALIZED_PRECISION = 0.2


class SequenceError(FinetrackError):
    """Base for dataset, result-document and measurement errors."""
    pass


class MissingFileError(SequenceError):
    def __init__(self, path: Path, what: str = "file"):
        super().__init__(f"missing {what}: {path}")
        self.path = Path(path)


class CountMismatchError(SequenceError):
    pass


class GroundTruthParseError(SequenceError):
    def __init__(self, path: Path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = Path(path)
        self.line = line


class MeasurementError(SequenceError):
    pass


class SynthSpecError(SequenceError):
    def __init__(self, field: str, message: str):
        super().__init__(f"synth spec field '{field}': {message}")
        self.field = field


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sequence:
    """An annotated frame sequence: one ground-truth box per frame path."""
    name: str
    frame_paths: tuple
    ground_truth: tuple
    attributes: tuple = ()

    def __post_init__(self):
        if len(self.frame_paths) != len(self.ground_truth):
            raise CountMismatchError(
                f"sequence '{self.name}': {len(self.frame_paths)} frames but {len(self.ground_truth)} boxes")

    def __len__(self) -> int:
        return len(self.frame_paths)

    def frame_at(self, position: int) -> Frame:
        """Load frame by 0-based position."""
        return load_frame(self.frame_paths[position], frame_index=position + 1)


@dataclass(frozen=True)
class TrackResult:
    """Tracker output for one sequence. times[0] is the initialization time."""
    predicted: tuple
    times: tuple
    low_confidence: tuple

    def __post_init__(self):
        if not (len(self.predicted) == len(self.times) == len(self.low_confidence)):
            raise CountMismatchError(
                f"result lengths differ: {len(self.predicted)} boxes, {len(self.times)} times, "
                f"{len(self.low_confidence)} flags")

    def __len__(self) -> int:
        return len(self.predicted)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_GT_SPLIT = re.compile(r"[,\s]+")


def parse_ground_truth(path: Path) -> list[BoundingBox]:
    """Read an OTB ground-truth file, converting to 0-indexed pixels. Blank lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "ground-truth file")
    boxes = []
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = [p for p in _GT_SPLIT.split(line) if p]
        if len(parts) != 4:
            raise GroundTruthParseError(path, number, f"expected 4 values, got {len(parts)}: {line!r}")
        try:
            x, y, w, h = (float(p) for p in parts)
            boxes.append(BoundingBox(x - 1.0, y - 1.0, w, h))
        except ValueError:
            raise GroundTruthParseError(path, number, f"non-numeric value in {line!r}")
        except InvalidBoxError as e:
            raise GroundTruthParseError(path, number, str(e))
    return boxes


def _format_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_ground_truth(boxes: list[BoundingBox], path: Path) -> None:
    """Write boxes in the OTB text format (1-indexed)."""
    lines = [",".join(_format_value(v) for v in (b.x + 1.0, b.y + 1.0, b.w, b.h)) for b in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def is_sequence_dir(path: Path) -> bool:
    path = Path(path)
    return (path / GT_FILENAME).is_file() and (path / IMAGE_DIRNAME).is_dir()


def load_sequence(directory: Path) -> Sequence:
    """Load an OTB-style sequence directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFileError(directory, "sequence directory")
    img_dir = directory / IMAGE_DIRNAME
    if not img_dir.is_dir():
        raise MissingFileError(img_dir, "image folder")

    boxes = parse_ground_truth(directory / GT_FILENAME)
    frames = sorted((p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.name)
    if not frames:
        raise MissingFileError(img_dir, "frame images in")
    if len(frames) != len(boxes):
        raise CountMismatchError(
            f"{directory}: {len(frames)} frame images but {len(boxes)} ground-truth lines")
    return Sequence(name=directory.name, frame_paths=tuple(frames), ground_truth=tuple(boxes))


def find_sequences(directory: Path) -> list[Path]:
    """The directory itself if it is a sequence, else its sequence subdirectories by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFileError(directory, "dataset directory")
    if is_sequence_dir(directory):
        return [directory]
    found = sorted((p for p in directory.iterdir() if p.is_dir() and is_sequence_dir(p)), key=lambda p: p.name)
    if not found:
        raise MissingFileError(directory / GT_FILENAME, "sequence (no ground-truth file found)")
    return found


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_lengths(result: TrackResult, seq: Sequence) -> None:
    if len(result) != len(seq.ground_truth):
        raise CountMismatchError(
            f"sequence '{seq.name}': {len(result)} predictions for {len(seq.ground_truth)} frames")
    if len(result) == 0:
        raise MeasurementError(f"sequence '{seq.name}': no frames to evaluate")


def overlaps(result: TrackResult, seq: Sequence) -> np.ndarray:
    _check_lengths(result, seq)
    return np.array([iou(p, g) for p, g in zip(result.predicted, seq.ground_truth)])


def center_errors(result: TrackResult, seq: Sequence) -> np.ndarray:
    _check_lengths(result, seq)
    return np.array([center_error(p, g) for p, g in zip(result.predicted, seq.ground_truth)])


def success_curve(result: TrackResult, seq: Sequence) -> np.ndarray:
    """Fraction of frames with IoU strictly above each of the 21 thresholds 0.00..1.00."""
    ious = overlaps(result, seq)
    return np.array([np.mean(ious > t) for t in SUCCESS_THRESHOLDS])


def success_auc(result: TrackResult, seq: Sequence) -> float:
    return float(np.mean(success_curve(result, seq)))


def precision_curve(result: TrackResult, seq: Sequence) -> np.ndarray:
    """Fraction of frames with center error <= t for t = 0..50 px."""
    errors = center_errors(result, seq)
    return np.array([np.mean(errors <= t) for t in PRECISION_THRESHOLDS])


def precision_at(result: TrackResult, seq: Sequence, threshold: float = DEFAULT_PRECISION_PX) -> float:
    return float(np.mean(center_errors(result, seq) <= threshold))


def average_overlap(result: TrackResult, seq: Sequence) -> float:
    return float(np.mean(overlaps(result, seq)))


def success_rate(result: TrackResult, seq: Sequence, threshold: float) -> float:
    return float(np.mean(overlaps(result, seq) > threshold))


def normalized_precision(result: TrackResult, seq: Sequence, threshold: float = NORMALIZED_PRECISION) -> float:
    """Precision with the center offset measured in units of the ground-truth width/height."""
    _check_lengths(result, seq)
    errors = []
    for p, g in zip(result.predicted, seq.ground_truth):
        (px, py), (gx, gy) = p.center, g.center
        errors.append(math.hypot((px - gx) / g.w, (py - gy) / g.h))
    return float(np.mean(np.array(errors) <= threshold))


def fps(result: TrackResult) -> float:
    """Frames per second over tracked frames, excluding the initialization time.

    A single-frame result reports 1 / times[0].
    """
    times = [float(t) for t in result.times]
    if not times:
        raise MeasurementError("no timings recorded")
    if any(t < 0 or not math.isfinite(t) for t in times):
        raise MeasurementError("timings must be finite and non-negative")
    if len(times) == 1:
        if times[0] <= 0:
            raise MeasurementError("single-frame timing is zero")
        return 1.0 / times[0]
    total = sum(times[1:])
    if total <= 0:
        raise MeasurementError("tracked-frame timings sum to zero")
    return (len(times) - 1) / total


def summarize(result: TrackResult, seq: Sequence, precision_threshold: float = DEFAULT_PRECISION_PX) -> dict:
    """Overlap and precision metrics of one sequence (timing-free, so deterministic)."""
    return {
        "auc": success_auc(result, seq),
        "precision": precision_at(result, seq, precision_threshold),
        "normalized_precision": normalized_precision(result, seq),
        "ao": average_overlap(result, seq),
        "sr50": success_rate(result, seq, 0.5),
        "sr75": success_rate(result, seq, 0.75),
    }


# ---------------------------------------------------------------------------
# Result documents
# ---------------------------------------------------------------------------

def result_path(out_dir: Path, name: str) -> Path:
    return Path(out_dir) / f"{name}.json"


def times_path(out_dir: Path, name: str) -> Path:
    return Path(out_dir) / f"{name}.times.json"


def write_result(out_dir: Path, name: str, result: TrackResult, metrics: dict) -> Path:
    """Write <name>.json (boxes, flags, metrics) and <name>.times.json (wall times, FPS)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "name": name,
        "frames": len(result),
        "boxes": [b.to_list() for b in result.predicted],
        "low_confidence": [bool(f) for f in result.low_confidence],
        "metrics": metrics,
    }
    path = result_path(out_dir, name)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    try:
        rate = fps(result)
    except MeasurementError:
        rate = None
    timing = {"name": name, "times": [float(t) for t in result.times], "fps": rate}
    times_path(out_dir, name).write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return path


def read_result(out_dir: Path, name: str) -> TrackResult:
    """Read a result document; times default to zeros when the sidecar is missing."""
    path = result_path(out_dir, name)
    if not path.is_file():
        raise MissingFileError(path, "result document")
    try:
        doc = json.loads(path.read_text())
        boxes = tuple(BoundingBox(*map(float, b)) for b in doc["boxes"])
        flags = tuple(bool(f) for f in doc.get("low_confidence", [False] * len(boxes)))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, InvalidBoxError) as e:
        raise SequenceError(f"{path}: malformed result document ({e})")

    times = (0.0,) * len(boxes)
    sidecar = times_path(out_dir, name)
    if sidecar.is_file():
        try:
            times = tuple(float(t) for t in json.loads(sidecar.read_text())["times"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise SequenceError(f"{sidecar}: malformed timing document ({e})")
    return TrackResult(predicted=boxes, times=times, low_confidence=flags)


# ---------------------------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------------------------

MOTIONS = ("static", "linear", "jump", "scale")


@dataclass
class MotionSpec:
    """A textured rectangle moving over a smooth textured background."""
    name: str = "synth"
    motion: str = "static"           # static | linear | jump | scale
    frames: int = 100
    width: int = 320
    height: int = 240
    target_w: int = 32
    target_h: int = 32
    start_x: Optional[float] = None  # left edge; None centers the target
    start_y: Optional[float] = None
    velocity: tuple = (3.0, 0.0)     # px per frame (linear)
    jump: tuple = (8.0, 0.0)         # px per jump (jump)
    jump_every: int = 10             # frames between jumps (jump)
    scale_rate: float = 1.01         # size factor per frame (scale)
    noise: float = 0.0               # per-frame pixel noise std

    @classmethod
    def from_dict(cls, data: dict) -> "MotionSpec":
        if not isinstance(data, dict):
            raise SynthSpecError("<root>", "spec must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise SynthSpecError(key, "unknown field")
        values = dict(data)
        for key in ("velocity", "jump"):
            if key in values:
                pair = values[key]
                try:
                    values[key] = (float(pair[0]), float(pair[1]))
                    if len(pair) != 2:
                        raise ValueError
                except (TypeError, ValueError, IndexError):
                    raise SynthSpecError(key, f"expected [dx, dy], got {pair!r}")
        spec = cls(**values)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.motion not in MOTIONS:
            raise SynthSpecError("motion", f"expected one of {', '.join(MOTIONS)}, got {self.motion!r}")
        for key in ("frames", "width", "height", "target_w", "target_h", "jump_every"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise SynthSpecError(key, f"expected a positive integer, got {value!r}")
        for key in ("start_x", "start_y"):
            value = getattr(self, key)
            if value is not None and (not isinstance(value, (int, float)) or isinstance(value, bool)):
                raise SynthSpecError(key, f"expected a number or null, got {value!r}")
        if self.target_w > self.width or self.target_h > self.height:
            raise SynthSpecError("target_w", "target larger than the frame")
        if not (isinstance(self.scale_rate, (int, float)) and self.scale_rate > 0):
            raise SynthSpecError("scale_rate", f"expected a positive number, got {self.scale_rate!r}")
        if not (isinstance(self.noise, (int, float)) and self.noise >= 0):
            raise SynthSpecError("noise", f"expected a non-negative number, got {self.noise!r}")

    def schedule(self) -> list[BoundingBox]:
        """Ground-truth box per frame; rendered boxes are integer-aligned."""
        self.validate()
        x0 = (self.width - self.target_w) / 2.0 if self.start_x is None else float(self.start_x)
        y0 = (self.height - self.target_h) / 2.0 if self.start_y is None else float(self.start_y)
        cx0, cy0 = x0 + self.target_w / 2.0, y0 + self.target_h / 2.0

        boxes = []
        for i in range(self.frames):
            cx, cy, w, h = cx0, cy0, float(self.target_w), float(self.target_h)
            if self.motion == "linear":
                cx += self.velocity[0] * i
                cy += self.velocity[1] * i
            elif self.motion == "jump":
                jumps = i // self.jump_every
                cx += self.jump[0] * jumps
                cy += self.jump[1] * jumps
            elif self.motion == "scale":
                w *= self.scale_rate ** i
                h *= self.scale_rate ** i
            w, h = max(1, round(w)), max(1, round(h))
            x, y = round(cx - w / 2.0), round(cy - h / 2.0)
            box = BoundingBox(float(x), float(y), float(w), float(h))
            if x < 0 or y < 0 or box.x2 > self.width or box.y2 > self.height:
                raise SynthSpecError(
                    "motion", f"target leaves the {self.width}x{self.height} frame at frame {i + 1}: {box.to_list()}")
            boxes.append(box)
        return boxes


def _smooth_texture(rng: np.random.Generator, width: int, height: int, cell: int, low: int, high: int) -> np.ndarray:
    coarse = rng.integers(low, high, size=(max(1, height // cell) + 1, max(1, width // cell) + 1, 3), dtype=np.uint8)
    img = Image.fromarray(coarse).resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def _target_texture(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    blocks = rng.integers(0, 2, size=(max(2, height // 4), max(2, width // 4))) * 200 + 25
    colored = np.stack([blocks, blocks[::-1], blocks[:, ::-1]], axis=-1).astype(np.uint8)
    return np.asarray(Image.fromarray(colored).resize((width, height), Image.Resampling.NEAREST), dtype=np.uint8)


def synth_sequence(spec: MotionSpec, seed: int = 0) -> tuple[Sequence, list[Frame]]:
    """Render spec into in-memory frames with exact ground truth.

    Frame paths are the names write_sequence would give the frames.
    """
    boxes = spec.schedule()
    rng = np.random.default_rng(seed)
    background = _smooth_texture(rng, spec.width, spec.height, 16, 70, 180)
    target = _target_texture(rng, spec.target_w, spec.target_h)

    frames = []
    for i, box in enumerate(boxes):
        pixels = background.copy()
        w, h, x, y = int(box.w), int(box.h), int(box.x), int(box.y)
        patch = target if (w, h) == target.shape[1::-1] else np.asarray(
            Image.fromarray(target).resize((w, h), Image.Resampling.NEAREST), dtype=np.uint8)
        pixels[y:y + h, x:x + w] = patch
        if spec.noise > 0:
            noisy = pixels.astype(np.float64) + rng.normal(0.0, spec.noise, size=pixels.shape)
            pixels = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
        frames.append(Frame(pixels=pixels, frame_index=i + 1))

    names = tuple(Path(IMAGE_DIRNAME) / f"{i + 1:04d}.png" for i in range(len(boxes)))
    return Sequence(name=spec.name, frame_paths=names, ground_truth=tuple(boxes), attributes=(spec.motion,)), frames


def write_sequence(seq: Sequence, frames: list[Frame], out_dir: Path) -> Sequence:
    """Materialize an in-memory sequence as an OTB directory; returns it as loaded from disk."""
    out_dir = Path(out_dir)
    img_dir = out_dir / IMAGE_DIRNAME
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_frame(frame, img_dir / f"{i + 1:04d}.png")
    write_ground_truth(list(seq.ground_truth), out_dir / GT_FILENAME)
    return load_sequence(out_dir)
