# tests/test_09_adversarial.py
"""Malformed inputs and degenerate scenes: every failure is a finetrack error, never a crash."""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from finetrack.bench import SequenceError, load_sequence, parse_ground_truth, read_result
from finetrack.config import ConfigError, from_dict, load_config, RunConfig
from finetrack.core import BoundingBox, FinetrackError, InvalidBoxError, giou, iou
from finetrack.features import (
    FEATURE_MAGIC, FeatureStack, Frame, NonFiniteValueError, PatchError, load_external_features, load_frame,
)
from finetrack.localizer import ChannelWeights, LocalizerError, ScorerHead, describe, proi_pool
from finetrack.pipeline import TrackerConfig, TrackerError, track_sequence
from tests.conftest import write_otb_fixture


class TestDegenerateBoxes:

    def test_non_finite_values(self):
        for values in ((np.nan, 0, 1, 1), (0, np.inf, 1, 1), (0, 0, -np.inf, 1)):
            with pytest.raises(InvalidBoxError):
                BoundingBox(*values)

    def test_tiny_and_huge_boxes(self):
        tiny = BoundingBox(0.0, 0.0, 1e-9, 1e-9)
        huge = BoundingBox(-1e9, -1e9, 2e9, 2e9)
        assert 0.0 <= iou(tiny, huge) <= 1.0
        assert -1.0 <= giou(tiny, huge) <= 1.0

    def test_far_apart_giou_bounded(self):
        assert giou(BoundingBox(0, 0, 1, 1), BoundingBox(1e12, 1e12, 1, 1)) >= -1.0


class TestMalformedFiles:

    def test_ground_truth_binary_garbage(self, tmp_path):
        path = tmp_path / "gt.txt"
        path.write_bytes(b"\x00\x01\x02,\x03,4,5\n")
        with pytest.raises(SequenceError):
            parse_ground_truth(path)

    def test_ground_truth_nan(self, tmp_path):
        path = tmp_path / "gt.txt"
        path.write_text("1,1,nan,5\n")
        with pytest.raises(SequenceError):
            parse_ground_truth(path)

    def test_corrupt_image(self, tmp_path):
        directory = write_otb_fixture(tmp_path / "seq", [BoundingBox(1, 1, 5, 5)] * 2)
        (directory / "img" / "0002.png").write_bytes(b"not a png")
        seq = load_sequence(directory)
        with pytest.raises(PatchError) as exc:
            seq.frame_at(1)
        assert "0002.png" in str(exc.value)

    def test_missing_image(self, tmp_path):
        with pytest.raises(PatchError):
            load_frame(tmp_path / "absent.png")

    def test_feature_file_garbage(self, tmp_path):
        rng = np.random.default_rng(50)
        for size in (0, 3, 8, 15, 64):
            path = tmp_path / f"g{size}.bin"
            path.write_bytes(FEATURE_MAGIC[:min(size, 8)] + rng.bytes(max(0, size - 8)))
            with pytest.raises(FinetrackError):
                load_external_features(path)

    def test_feature_file_non_finite(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(FEATURE_MAGIC + np.array([1, 1, 1], "<u4").tobytes() + np.array([np.nan], "<f4").tobytes())
        with pytest.raises(NonFiniteValueError) as exc:
            load_external_features(path)
        assert isinstance(exc.value, FinetrackError)
        assert exc.value.field == "payload"

    def test_feature_file_huge_header(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(FEATURE_MAGIC + np.array([2 ** 31, 2 ** 31, 2 ** 31], "<u4").tobytes())
        with pytest.raises(FinetrackError):
            load_external_features(path)

    def test_result_document_malformed(self, tmp_path):
        (tmp_path / "a.json").write_text("{\"boxes\": [[1, 2, 3]]")
        with pytest.raises(SequenceError):
            read_result(tmp_path, "a")
        (tmp_path / "a.json").write_text(json.dumps({"boxes": [[0, 0, -3, 4]]}))
        with pytest.raises(SequenceError):
            read_result(tmp_path, "a")
        (tmp_path / "a.json").write_text(json.dumps({"boxes": "nope"}))
        with pytest.raises(SequenceError):
            read_result(tmp_path, "a")

    def test_config_not_an_object(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("[1, 2, 3]")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_config_deep_garbage(self):
        with pytest.raises(ConfigError):
            from_dict(RunConfig, {"tracker": {"dcf": {"memory_capacity": {"a": {"b": 1}}}}})
        with pytest.raises(ConfigError):
            from_dict(RunConfig, {"tracker": {"scorer": {"target_measure": "l2"}}})


class TestDegenerateFeatures:

    def test_pool_box_larger_than_grid(self, rng):
        stack = FeatureStack(data=rng.normal(size=(2, 8, 8)))
        pooled = proi_pool(stack, BoundingBox(-50.0, -50.0, 200.0, 200.0), 5)
        assert np.all(np.isfinite(pooled.values))

    def test_pool_zero_stack(self):
        pooled = proi_pool(FeatureStack(data=np.zeros((3, 8, 8))), BoundingBox(1.0, 1.0, 4.0, 4.0), 3)
        assert np.all(pooled.values == 0.0)

    def test_non_positive_channel_weights(self):
        with pytest.raises(LocalizerError):
            ChannelWeights(np.array([1.0, 0.0]))
        with pytest.raises(LocalizerError):
            ChannelWeights(np.array([1.0, np.nan]))

    def test_odd_head_rejected(self):
        with pytest.raises(LocalizerError):
            ScorerHead(np.zeros(5))
        with pytest.raises(LocalizerError):
            ScorerHead(np.zeros(4), float("inf"))

    def test_describe_far_box(self, rng):
        with pytest.raises(LocalizerError):
            describe(FeatureStack(data=rng.normal(size=(9, 8, 8))), ChannelWeights.uniform(9),
                     BoundingBox(100.0, 100.0, 2.0, 2.0))


class TestDegenerateScenes:

    def test_textureless_frames(self):
        frame = Frame(pixels=np.full((120, 160, 3), 90, dtype=np.uint8))
        gt = BoundingBox(60.0, 40.0, 24.0, 24.0)
        result = track_sequence([frame] * 4, gt)
        assert result.predicted[0] == gt
        for box in result.predicted:
            cx, cy = box.center
            assert 0.0 <= cx <= 160.0 and 0.0 <= cy <= 120.0
        # nothing to correlate with: every tracked frame is flagged
        assert result.low_confidence == (False, True, True, True)

    def test_target_at_frame_corner(self):
        rng = np.random.default_rng(51)
        frame = Frame(pixels=rng.integers(0, 256, size=(100, 100, 3), dtype=np.uint8))
        gt = BoundingBox(0.0, 0.0, 20.0, 20.0)
        result = track_sequence([frame] * 5, gt)
        for box in result.predicted:
            cx, cy = box.center
            assert 0.0 <= cx <= 100.0 and 0.0 <= cy <= 100.0

    def test_target_filling_the_frame(self):
        rng = np.random.default_rng(52)
        frame = Frame(pixels=rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8))
        result = track_sequence([frame] * 3, BoundingBox(0.0, 0.0, 40.0, 40.0))
        assert len(result.predicted) == 3
        for box in result.predicted:
            assert box.w <= 40.0 and box.h <= 40.0

    def test_frame_size_changes_mid_sequence(self):
        rng = np.random.default_rng(53)
        a = Frame(pixels=rng.integers(0, 256, size=(80, 80, 3), dtype=np.uint8))
        b = Frame(pixels=rng.integers(0, 256, size=(80, 81, 3), dtype=np.uint8))
        with pytest.raises(TrackerError):
            track_sequence([a, b], BoundingBox(30.0, 30.0, 16.0, 16.0))

    def test_tiny_target(self):
        rng = np.random.default_rng(54)
        frame = Frame(pixels=rng.integers(0, 256, size=(60, 60, 3), dtype=np.uint8))
        config = TrackerConfig(min_target_size=4.0)
        result = track_sequence([frame] * 3, BoundingBox(28.0, 28.0, 2.0, 2.0), config)
        assert all(b.w >= 2.0 and b.h >= 2.0 for b in result.predicted[:1])
        assert all(b.w >= 4.0 and b.h >= 4.0 for b in result.predicted[1:])
