"""Shared fixtures for the finetrack test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT))

from finetrack.bench import MotionSpec, synth_sequence, write_ground_truth, write_sequence
from finetrack.core import BoundingBox
from finetrack.features import FeatureStack, Frame, PatchGeometry, save_frame


# ---------------------------------------------------------------------------
# Random inputs
# ---------------------------------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stack(rng, channels=9, height=32, width=32) -> FeatureStack:
    return FeatureStack(data=rng.normal(size=(channels, height, width)))


# ---------------------------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------------------------

def small_spec(**overrides) -> MotionSpec:
    """A small, fast sequence: 24x24 target on a 200x150 frame."""
    values = dict(name="synth", motion="static", frames=10, width=200, height=150, target_w=24, target_h=24)
    values.update(overrides)
    return MotionSpec(**values)


@pytest.fixture
def static_sequence():
    return synth_sequence(small_spec(frames=10), seed=3)


@pytest.fixture
def linear_sequence():
    spec = small_spec(motion="linear", frames=30, width=240, start_x=20.0, velocity=(3.0, 0.0))
    return synth_sequence(spec, seed=5)


@pytest.fixture
def sequence_dir(tmp_path):
    """Factory writing a synthetic sequence as an OTB directory under tmp_path/data."""

    def make(name="synth", seed=0, **overrides):
        seq, frames = synth_sequence(small_spec(name=name, **overrides), seed=seed)
        return write_sequence(seq, frames, tmp_path / "data" / name)

    return make


def write_otb_fixture(directory: Path, boxes: list, size=(40, 30)) -> Path:
    """Flat grey frames plus a ground-truth file, one frame per box."""
    img = directory / "img"
    img.mkdir(parents=True, exist_ok=True)
    for i in range(len(boxes)):
        pixels = np.full((size[1], size[0], 3), 128, dtype=np.uint8)
        save_frame(Frame(pixels=pixels, frame_index=i + 1), img / f"{i + 1:04d}.png")
    write_ground_truth(boxes, directory / "groundtruth_rect.txt")
    return directory


# ---------------------------------------------------------------------------
# Feature sources for pair sampling
# ---------------------------------------------------------------------------

class StubFeatureSource:
    """Random but reproducible stacks; geometry centered on the requested box."""

    def __init__(self, seed=0, channels=9):
        self.seed = seed
        self.channels = channels
        self.calls = []

    def _make(self, position, box, side_factor, out, kind):
        self.calls.append((kind, position))
        rng = np.random.default_rng([self.seed, position, 0 if kind == "template" else 1])
        cells = out // 4
        side = side_factor * float(np.sqrt(box.w * box.h))
        geometry = PatchGeometry(center=box.center, window=(side, side), out_size=(out, out), cell_size=4)
        return FeatureStack(data=rng.normal(size=(self.channels, cells, cells))), geometry

    def template(self, position, box):
        return self._make(position, box, 2.0, 64, "template")

    def search(self, position, box):
        return self._make(position, box, 4.0, 128, "search")


def drifting_annotations(n=120) -> list[BoundingBox]:
    return [BoundingBox(50.0 + 0.5 * i, 40.0 + 0.25 * i, 30.0 + 0.1 * i, 20.0) for i in range(n)]
