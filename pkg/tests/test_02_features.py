"""Patch sampling, feature channels, windows and the external feature format."""

import struct
import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(REPO_ROOT))

from finetrack.core import BoundingBox
from finetrack.features import (
    FEATURE_MAGIC, BadMagicError, DimensionMismatchError, FeatureConfig, FeatureStack, Frame,
    NonFiniteValueError, PatchError, PatchGeometry, ScalePyramid, TruncatedPayloadError, apply_window,
    block_normalize, extract_patch, feature_channels, hann_window, load_external_features, load_frame,
    orientation_histograms, sample_patch, save_external_features, save_frame, search_features, template_features,
)


def _frame(rng, h=60, w=80):
    return Frame(pixels=rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestConfig:

    def test_feature_defaults(self):
        cfg = FeatureConfig()
        assert cfg.channels == 9
        assert cfg.grid_size == 32
        assert cfg.template_patch_size == 64

    def test_patch_must_be_multiple_of_cell(self):
        with pytest.raises(ValueError):
            FeatureConfig(patch_size=130)

    def test_pyramid_factors(self):
        pyramid = ScalePyramid(levels=5, step=1.05)
        assert len(pyramid.scale_factors) == 5
        assert pyramid.scale_factors[2] == 1.0
        assert pyramid.center_index == 3
        assert pyramid.scale_factors[0] == pytest.approx(1.05 ** -2)
        assert pyramid.scale_factors[4] == pytest.approx(1.05 ** 2)

    def test_pyramid_even_levels_rejected(self):
        with pytest.raises(ValueError):
            ScalePyramid(levels=4)


# ---------------------------------------------------------------------------
# Frames and patches
# ---------------------------------------------------------------------------

class TestFrames:

    def test_frame_shape_checked(self):
        with pytest.raises(PatchError):
            Frame(pixels=np.zeros((10, 10), dtype=np.uint8))

    def test_frame_index_positive(self):
        with pytest.raises(PatchError):
            Frame(pixels=np.zeros((10, 10, 3), dtype=np.uint8), frame_index=0)

    def test_png_round_trip(self, tmp_path, rng):
        frame = _frame(rng)
        save_frame(frame, tmp_path / "f.png")
        loaded = load_frame(tmp_path / "f.png", frame_index=4)
        assert np.array_equal(loaded.pixels, frame.pixels)
        assert loaded.frame_index == 4


class TestExtractPatch:

    def test_identity_resample(self, rng):
        frame = _frame(rng)
        patch = extract_patch(frame, (40.0, 30.0), (80.0, 60.0), 1.0, (80, 60))
        assert patch.shape == (60, 80, 3)
        assert np.array_equal(patch, frame.pixels.astype(np.float64))

    def test_border_replication(self):
        pixels = np.zeros((20, 20, 3), dtype=np.uint8)
        pixels[0, 0] = (200, 100, 50)
        frame = Frame(pixels=pixels)
        patch = extract_patch(frame, (0.0, 0.0), (20.0, 20.0), 1.0, (20, 20))
        # samples left of and above pixel (0, 0) replicate it
        assert np.allclose(patch[:10, :10], (200, 100, 50))

    def test_constant_frame_gives_constant_patch(self):
        frame = Frame(pixels=np.full((30, 30, 3), 77, dtype=np.uint8))
        patch = extract_patch(frame, (2.0, 29.0), (50.0, 40.0), 1.3, (16, 16))
        assert np.allclose(patch, 77.0)

    def test_scale_enlarges_window(self, rng):
        frame = _frame(rng)
        _, geometry = sample_patch(frame, (40.0, 30.0), 20.0, 1.5, 32, 4)
        assert geometry.window == (30.0, 30.0)

    def test_translation_consistent(self, rng):
        pixels = rng.integers(0, 256, size=(90, 120, 3), dtype=np.uint8)
        moved = Frame(pixels=np.ascontiguousarray(pixels[7:, 11:]))
        patch = extract_patch(Frame(pixels=pixels), (60.3, 45.6), (30.0, 24.0), 1.2, (17, 13))
        same = extract_patch(moved, (60.3 - 11, 45.6 - 7), (30.0, 24.0), 1.2, (17, 13))
        assert np.allclose(patch, same, atol=1e-9)

    def test_gray_sampling_matches_rgb_luminance(self, rng):
        frame = _frame(rng, 90, 120)
        rgb, _ = sample_patch(frame, (50.5, 40.2), 37.0, 1.1, 32, 4)
        gray, geometry = sample_patch(frame, (50.5, 40.2), 37.0, 1.1, 32, 4, gray=True)
        assert gray.shape == (32, 32)
        assert np.allclose(gray, rgb @ np.array([0.299, 0.587, 0.114]))
        assert geometry.window == pytest.approx((40.7, 40.7))

    def test_center_outside_frame(self, rng):
        with pytest.raises(PatchError):
            extract_patch(_frame(rng), (-1.0, 10.0), (10.0, 10.0), 1.0, (8, 8))

    def test_non_positive_scale(self, rng):
        with pytest.raises(PatchError):
            extract_patch(_frame(rng), (10.0, 10.0), (10.0, 10.0), 0.0, (8, 8))


class TestPatchGeometry:

    def test_grid_round_trip(self):
        geometry = PatchGeometry(center=(100.0, 80.0), window=(96.0, 96.0), out_size=(128, 128), cell_size=4)
        box = BoundingBox(90.5, 71.25, 24.0, 18.0)
        back = geometry.from_grid(geometry.to_grid(box))
        for a, b in zip(back.to_list(), box.to_list()):
            assert a == pytest.approx(b)

    def test_patch_center_between_central_nodes(self):
        geometry = PatchGeometry(center=(100.0, 100.0), window=(128.0, 128.0), out_size=(128, 128), cell_size=4)
        grid = geometry.to_grid(BoundingBox.from_center(100.0, 100.0, 8.0, 8.0))
        assert grid.center == (15.5, 15.5)
        assert (grid.w, grid.h) == (2.0, 2.0)

    def test_cells_to_pixels(self):
        geometry = PatchGeometry(center=(0.0, 0.0), window=(64.0, 64.0), out_size=(128, 128), cell_size=4)
        assert geometry.cells_to_pixels(1, -2) == (-4.0, 2.0)


# ---------------------------------------------------------------------------
# Feature channels
# ---------------------------------------------------------------------------

class TestFeatureChannels:

    def test_shape_and_zero_mean(self, rng):
        patch = rng.uniform(0, 255, size=(128, 128, 3))
        stack = feature_channels(patch)
        assert stack.data.shape == (9, 32, 32)
        assert np.allclose(stack.data.mean(axis=(1, 2)), 0.0, atol=1e-12)

    def test_horizontal_ramp_lands_in_bin_zero(self):
        gray = np.tile(np.arange(32, dtype=np.float64), (32, 1))
        hist = orientation_histograms(gray, 8)
        assert np.all(hist[0] > 0)
        assert np.allclose(hist[1:], 0.0)

    def test_vertical_ramp_lands_in_bin_four(self):
        gray = np.tile(np.arange(32, dtype=np.float64)[:, None], (1, 32))
        hist = orientation_histograms(gray, 8)
        assert np.all(hist[4] > 0)
        assert np.allclose(np.delete(hist, 4, axis=0), 0.0)

    def test_rotation_shifts_orientation_energy(self, rng):
        gray = rng.uniform(size=(40, 40))
        energy = orientation_histograms(gray, 8).sum(axis=(1, 2))
        rotated = orientation_histograms(np.rot90(gray), 8).sum(axis=(1, 2))
        assert np.allclose(rotated, np.roll(energy, 4), rtol=1e-6)

    def test_soft_assignment_preserves_magnitude(self, rng):
        gray = rng.uniform(size=(20, 20))
        gy, gx = np.gradient(gray)
        assert np.allclose(orientation_histograms(gray, 8).sum(axis=0), np.hypot(gx, gy))

    def test_vertical_step_edge_fills_bin_zero_only(self):
        patch = np.full((128, 128, 3), 40.0)
        patch[:, 64:] = 200.0
        stack = feature_channels(patch)
        assert np.all(stack.data[2:] == 0.0)
        assert stack.data[1].std() > 0
        assert np.argmax(stack.data[1].max(axis=0)) in (15, 16)

    def test_cell_histograms_average_pixel_histograms(self, rng):
        gray = rng.uniform(size=(34, 41))
        pooled = orientation_histograms(gray, 8, cell=4)
        assert pooled.shape == (8, 8, 10)
        expected = orientation_histograms(gray, 8)[:, :32, :40].reshape(8, 8, 4, 10, 4).mean(axis=(2, 4))
        assert np.allclose(pooled, expected)

    def test_block_normalize_caps_values(self, rng):
        out = block_normalize(rng.uniform(size=(8, 6, 6)), 0.2)
        assert out.max() <= 0.2
        assert out.min() >= 0.0
        assert np.all(block_normalize(np.zeros((8, 4, 4)), 0.2) == 0.0)

    def test_block_normalize_ignores_contrast(self, rng):
        hist = rng.uniform(size=(8, 6, 6))
        assert np.allclose(block_normalize(3.0 * hist, 10.0), block_normalize(hist, 10.0), rtol=1e-3)

    def test_contrast_does_not_change_orientation_channels(self, rng):
        patch = rng.uniform(0, 120, size=(64, 64, 3))
        low = feature_channels(patch)
        high = feature_channels(2.0 * patch)
        assert np.allclose(high.data[1:], low.data[1:], atol=2e-3)

    def test_grayscale_patch_matches_rgb_patch(self, rng):
        patch = rng.uniform(0, 255, size=(64, 64, 3))
        gray = patch @ np.array([0.299, 0.587, 0.114])
        assert np.allclose(feature_channels(gray).data, feature_channels(patch).data)

    def test_patch_smaller_than_cell(self):
        with pytest.raises(PatchError):
            feature_channels(np.zeros((2, 2, 3)))

    def test_search_and_template_share_cell_scale(self, rng):
        frame = _frame(rng, 150, 200)
        box = BoundingBox(80, 60, 24, 24)
        s_stack, s_geom = search_features(frame, box, FeatureConfig())
        t_stack, t_geom = template_features(frame, box, FeatureConfig())
        assert s_stack.grid_shape == (32, 32)
        assert t_stack.grid_shape == (16, 16)
        assert s_geom.pixel_scale == pytest.approx(t_geom.pixel_scale)


class TestHannWindow:

    def test_peak_and_ends(self):
        window = hann_window(32, 32)
        assert window[16, 16] == pytest.approx(1.0)
        assert window.max() == pytest.approx(1.0)
        assert window[0, 16] == pytest.approx(0.0)
        assert window[31, 16] == pytest.approx(0.0)
        assert window[16, 0] == pytest.approx(0.0)

    def test_odd_size_symmetric(self):
        window = hann_window(9, 9)
        assert np.allclose(window, window[::-1, ::-1])

    def test_window_keeps_center_peak(self):
        yy, xx = np.mgrid[0:16, 0:16]
        bump = np.exp(-((yy - 8) ** 2 + (xx - 8) ** 2) / 18.0) + 0.5
        windowed = apply_window(FeatureStack(data=np.stack([bump, 2.0 * bump])))
        for channel in windowed.data:
            assert np.unravel_index(np.argmax(channel), channel.shape) == (8, 8)

    def test_apply_window(self, rng):
        stack = FeatureStack(data=rng.normal(size=(3, 8, 8)))
        windowed = apply_window(stack)
        assert windowed.data[:, 4, 4] == pytest.approx(stack.data[:, 4, 4])
        assert np.allclose(windowed.data[:, 0, :], 0.0)


# ---------------------------------------------------------------------------
# External features
# ---------------------------------------------------------------------------

class TestExternalFeatures:

    def test_round_trip_bit_exact(self, tmp_path, rng):
        data = rng.normal(size=(4, 6, 5)).astype(np.float32)
        save_external_features(FeatureStack(data=data), tmp_path / "f.bin")
        loaded = load_external_features(tmp_path / "f.bin")
        assert loaded.data.dtype == np.float32
        assert np.array_equal(loaded.data, data)

    def test_layout(self, tmp_path):
        values = np.arange(2 * 3 * 4, dtype="<f4")
        raw = FEATURE_MAGIC + struct.pack("<III", 2, 3, 4) + values.tobytes()
        (tmp_path / "f.bin").write_bytes(raw)
        loaded = load_external_features(tmp_path / "f.bin")
        assert loaded.data[1, 2, 3] == 23.0

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(b"NOTMAGIC" + struct.pack("<III", 1, 1, 1) + b"\0\0\0\0")
        with pytest.raises(BadMagicError) as exc:
            load_external_features(tmp_path / "f.bin")
        assert exc.value.field == "magic"

    def test_truncated_header_names_field(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(FEATURE_MAGIC + struct.pack("<I", 3))
        with pytest.raises(TruncatedPayloadError) as exc:
            load_external_features(tmp_path / "f.bin")
        assert exc.value.field == "Hf"

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(FEATURE_MAGIC + struct.pack("<III", 2, 2, 2) + b"\0" * 28)
        with pytest.raises(TruncatedPayloadError) as exc:
            load_external_features(tmp_path / "f.bin")
        assert exc.value.field == "payload"

    def test_non_finite_payload(self, tmp_path):
        values = np.array([1.0, np.inf], dtype="<f4")
        (tmp_path / "f.bin").write_bytes(FEATURE_MAGIC + struct.pack("<III", 1, 1, 2) + values.tobytes())
        with pytest.raises(NonFiniteValueError) as exc:
            load_external_features(tmp_path / "f.bin")
        assert exc.value.field == "payload"

    def test_stack_rejects_non_finite(self):
        with pytest.raises(NonFiniteValueError):
            FeatureStack(data=np.array([[[0.0, np.nan]]]))

    def test_zero_dimension(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(FEATURE_MAGIC + struct.pack("<III", 2, 0, 2))
        with pytest.raises(DimensionMismatchError) as exc:
            load_external_features(tmp_path / "f.bin")
        assert exc.value.field == "Hf"

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(FEATURE_MAGIC + struct.pack("<III", 1, 1, 1) + b"\0" * 8)
        with pytest.raises(DimensionMismatchError) as exc:
            load_external_features(tmp_path / "f.bin")
        assert exc.value.field == "payload"
