"""Patch sampling and multi-channel feature extraction.

Frames are resampled into fixed-size patches around the target, then turned
into a 9-channel stack: one grayscale channel plus eight soft-binned gradient
orientation channels pooled over cell_size x cell_size cells and normalized
against the energy of the surrounding 2x2-cell blocks. Precomputed
deep features can be ingested from the binary format below instead.

External feature file layout (little-endian):
    8 bytes   magic  b"C2FFEAT1"
    3 x u32   C, Hf, Wf
    C*Hf*Wf   float32 values, channel-major
"""

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from finetrack.core import BoundingBox, FinetrackError


FEATURE_MAGIC = b"C2FFEAT1"
_HEADER = struct.Struct("<III")
_LUMA = np.array([0.299, 0.587, 0.114])
_BLOCK_EPS = 1e-3


class PatchError(FinetrackError):
    """Raised when a patch cannot be sampled (e.g. the center left the frame)."""
    pass


class FeatureFileError(FinetrackError):
    """Raised when an external feature file cannot be parsed."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BadMagicError(FeatureFileError):
    pass


class DimensionMismatchError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class NonFiniteValueError(FeatureFileError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class FeatureConfig:
    """Feature extraction and patch geometry settings."""
    cell_size: int = 4               # pixels per feature cell
    n_orientations: int = 8          # gradient bins over [0, pi)
    patch_size: int = 128            # search patch side after resampling, pixels
    search_area_factor: float = 4.0  # search side = factor * sqrt(w*h)
    template_area_factor: float = 2.0
    block_truncation: float = 0.2    # cap on block-normalized orientation values

    def __post_init__(self):
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        if self.n_orientations < 1:
            raise ValueError("n_orientations must be >= 1")
        if self.patch_size < self.cell_size or self.patch_size % self.cell_size:
            raise ValueError("patch_size must be a positive multiple of cell_size")
        if self.search_area_factor <= 0 or self.template_area_factor <= 0:
            raise ValueError("area factors must be positive")
        if self.block_truncation <= 0:
            raise ValueError("block_truncation must be positive")

    @property
    def channels(self) -> int:
        return 1 + self.n_orientations

    @property
    def grid_size(self) -> int:
        return self.patch_size // self.cell_size

    @property
    def template_patch_size(self) -> int:
        """Template side that keeps the search patch's pixels-per-cell ratio."""
        cells = max(1, int(round(self.grid_size * self.template_area_factor / self.search_area_factor)))
        return cells * self.cell_size


@dataclass
class ScalePyramid:
    """Symmetric geometric pyramid of scale factors centered on 1.0."""
    levels: int = 5
    step: float = 1.05
    scale_factors: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.levels < 1 or self.levels % 2 == 0:
            raise ValueError("pyramid levels must be odd and >= 1")
        if self.levels > 1 and self.step <= 1.0:
            raise ValueError("pyramid step must be > 1 for multi-level pyramids")
        half = self.levels // 2
        self.scale_factors = tuple(float(self.step ** k) for k in range(-half, half + 1))

    @property
    def center_index(self) -> int:
        """1-based index of the unit scale."""
        return self.levels // 2 + 1


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Frame:
    """One video frame: H x W x 3 uint8 pixels and its 1-based index."""
    pixels: np.ndarray
    frame_index: int = 1

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise PatchError(f"frame pixels must be H x W x 3, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise PatchError("frame must be at least 1x1")
        if self.frame_index < 1:
            raise PatchError(f"frame_index must be >= 1, got {self.frame_index}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def contains(self, box: BoundingBox) -> bool:
        return box.x >= 0 and box.y >= 0 and box.x2 <= self.width and box.y2 <= self.height

    @cached_property
    def gray(self) -> np.ndarray:
        """Luminance on the 0..255 scale, computed once per frame."""
        return self.pixels @ _LUMA


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """C x Hf x Wf feature array over a sampled patch."""
    data: np.ndarray
    cell_size: int = 4

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionMismatchError(f"stack must be C x Hf x Wf with all dims >= 1, got {self.data.shape}", "shape")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValueError("stack holds non-finite values", "payload")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class PatchGeometry:
    """Where a patch was sampled from, and the pixel <-> feature-grid mapping.

    Feature cell j covers patch pixels [j*cell, (j+1)*cell); its value sits at
    grid node j, i.e. at the cell center.
    """
    center: tuple[float, float]
    window: tuple[float, float]   # sampled window size in frame pixels
    out_size: tuple[int, int]     # (width, height) of the resampled patch
    cell_size: int

    @property
    def pixel_scale(self) -> tuple[float, float]:
        """Frame pixels per patch pixel, along x and y."""
        return self.window[0] / self.out_size[0], self.window[1] / self.out_size[1]

    def to_grid(self, box: BoundingBox) -> BoundingBox:
        sx, sy = self.pixel_scale
        left = self.center[0] - self.window[0] / 2.0
        top = self.center[1] - self.window[1] / 2.0
        return BoundingBox(
            (box.x - left) / sx / self.cell_size - 0.5,
            (box.y - top) / sy / self.cell_size - 0.5,
            box.w / sx / self.cell_size,
            box.h / sy / self.cell_size,
        )

    def from_grid(self, box: BoundingBox) -> BoundingBox:
        sx, sy = self.pixel_scale
        left = self.center[0] - self.window[0] / 2.0
        top = self.center[1] - self.window[1] / 2.0
        return BoundingBox(
            (box.x + 0.5) * self.cell_size * sx + left,
            (box.y + 0.5) * self.cell_size * sy + top,
            box.w * self.cell_size * sx,
            box.h * self.cell_size * sy,
        )

    def cells_to_pixels(self, dy: float, dx: float) -> tuple[float, float]:
        """Convert a grid displacement to a frame-pixel displacement (dx, dy)."""
        sx, sy = self.pixel_scale
        return dx * self.cell_size * sx, dy * self.cell_size * sy


# ---------------------------------------------------------------------------
# Frame I/O
# ---------------------------------------------------------------------------

def load_frame(path: Path, frame_index: int = 1) -> Frame:
    """Read an image file into an RGB Frame."""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise PatchError(f"{path}: cannot read image ({e})")
    return Frame(pixels=pixels.copy(), frame_index=frame_index)


def save_frame(frame: Frame, path: Path) -> None:
    Image.fromarray(np.ascontiguousarray(frame.pixels, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def _bilinear(source: np.ndarray, center: tuple[float, float], window: tuple[float, float],
              out_size: tuple[int, int]) -> np.ndarray:
    height, width = source.shape[:2]
    out_w, out_h = out_size
    xs = center[0] - window[0] / 2.0 + (np.arange(out_w) + 0.5) * (window[0] / out_w) - 0.5
    ys = center[1] - window[1] / 2.0 + (np.arange(out_h) + 0.5) * (window[1] / out_h) - 0.5

    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    if source.ndim == 3:
        fx, fy = fx[None, :, None], fy[:, None, None]
    else:
        fx, fy = fx[None, :], fy[:, None]
    x0i = np.clip(x0.astype(np.int64), 0, width - 1)
    x1i = np.clip(x0.astype(np.int64) + 1, 0, width - 1)
    y0i = np.clip(y0.astype(np.int64), 0, height - 1)
    y1i = np.clip(y0.astype(np.int64) + 1, 0, height - 1)

    # uint8 samples promote to float64 in the blend
    top = source[y0i[:, None], x0i[None, :]] * (1.0 - fx) + source[y0i[:, None], x1i[None, :]] * fx
    bottom = source[y1i[:, None], x0i[None, :]] * (1.0 - fx) + source[y1i[:, None], x1i[None, :]] * fx
    return top * (1.0 - fy) + bottom * fy


def _check_patch_args(frame: Frame, center: tuple[float, float], size: tuple[float, float],
                      scale: float, out_size: tuple[int, int]) -> None:
    cx, cy = center
    if not (0.0 <= cx <= frame.width and 0.0 <= cy <= frame.height):
        raise PatchError(f"patch center ({cx:.2f}, {cy:.2f}) outside {frame.width}x{frame.height} frame")
    if scale <= 0:
        raise PatchError(f"scale must be positive, got {scale}")
    if int(out_size[0]) < 1 or int(out_size[1]) < 1 or size[0] <= 0 or size[1] <= 0:
        raise PatchError(f"patch sizes must be positive, got size={size} out_size={out_size}")


def extract_patch(frame: Frame, center: tuple[float, float], size: tuple[float, float],
                  scale: float, out_size: tuple[int, int]) -> np.ndarray:
    """Crop a (size*scale) window around center and resample it bilinearly to out_size.

    Samples falling outside the frame take the value of the nearest border
    pixel. Returns an (out_h, out_w, 3) float64 array.
    """
    _check_patch_args(frame, center, size, scale, out_size)
    window = (size[0] * scale, size[1] * scale)
    return _bilinear(frame.pixels, center, window, (int(out_size[0]), int(out_size[1])))


def sample_patch(frame: Frame, center: tuple[float, float], side: float, scale: float,
                 out_side: int, cell_size: int, gray: bool = False) -> tuple[np.ndarray, PatchGeometry]:
    """Square-window wrapper around extract_patch that also returns the geometry.

    With gray=True the frame luminance is resampled instead of its RGB pixels,
    giving an H x W patch equal to the luminance of the RGB one.
    """
    if gray:
        _check_patch_args(frame, center, (side, side), scale, (out_side, out_side))
        patch = _bilinear(frame.gray, center, (side * scale, side * scale), (out_side, out_side))
    else:
        patch = extract_patch(frame, center, (side, side), scale, (out_side, out_side))
    geometry = PatchGeometry(
        center=(float(center[0]), float(center[1])),
        window=(side * scale, side * scale),
        out_size=(out_side, out_side),
        cell_size=cell_size,
    )
    return patch, geometry


def search_side(box: BoundingBox, area_factor: float) -> float:
    """Square region side proportional to the geometric mean of the box extent."""
    return area_factor * math.sqrt(box.w * box.h)


# ---------------------------------------------------------------------------
# Feature channels
# ---------------------------------------------------------------------------

def _to_gray(patch: np.ndarray) -> np.ndarray:
    if patch.ndim == 2:
        return patch.astype(np.float64) / 255.0
    return (patch[..., :3].astype(np.float64) @ _LUMA) / 255.0


def _cell_pool(channel: np.ndarray, cell: int) -> np.ndarray:
    hf, wf = channel.shape[-2] // cell, channel.shape[-1] // cell
    trimmed = channel[..., :hf * cell, :wf * cell]
    shape = trimmed.shape[:-2] + (hf, cell, wf, cell)
    return trimmed.reshape(shape).mean(axis=(-3, -1))


def orientation_histograms(gray: np.ndarray, n_orientations: int, cell: int = 1) -> np.ndarray:
    """Gradient magnitude soft-assigned to orientation bins over [0, pi), averaged per cell.

    Bin b is centered at b*pi/n; each pixel splits its magnitude linearly
    between the two nearest bins (circularly). cell=1 gives per-pixel
    histograms; rows and columns past the last whole cell are dropped.
    """
    gy, gx = np.gradient(gray)
    magnitude = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    position = theta / (np.pi / n_orientations)
    lower = np.floor(position)
    frac = position - lower
    lo = lower.astype(np.int64) % n_orientations
    hi = (lo + 1) % n_orientations

    hf, wf = gray.shape[0] // cell, gray.shape[1] // cell
    n_cells = hf * wf
    rows = np.arange(hf * cell) // cell
    cols = np.arange(wf * cell) // cell
    cell_index = rows[:, None] * wf + cols[None, :]
    keep = (slice(0, hf * cell), slice(0, wf * cell))

    size = n_orientations * n_cells
    hist = np.bincount((lo[keep] * n_cells + cell_index).ravel(),
                       weights=(magnitude * (1.0 - frac))[keep].ravel(), minlength=size)
    hist += np.bincount((hi[keep] * n_cells + cell_index).ravel(),
                        weights=(magnitude * frac)[keep].ravel(), minlength=size)
    return hist.reshape(n_orientations, hf, wf) / float(cell * cell)


def block_normalize(hist: np.ndarray, truncation: float) -> np.ndarray:
    """Divide each cell's histogram by the RMS energy of the four 2x2 blocks around it, then cap.

    Blocks past the grid border repeat the edge cells. A cell with no
    gradient energy nearby stays zero.
    """
    energy = np.pad(np.square(hist).sum(axis=0), 1, mode="edge")
    blocks = (energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]) / 4.0
    around = (blocks[:-1, :-1] + blocks[1:, :-1] + blocks[:-1, 1:] + blocks[1:, 1:]) / 4.0
    return np.minimum(hist / np.sqrt(around + _BLOCK_EPS ** 2), truncation)


def feature_channels(patch: np.ndarray, config: FeatureConfig = None) -> FeatureStack:
    """Grayscale + block-normalized orientation channels, pooled per cell, mean-subtracted per channel.

    patch is either H x W x 3 RGB or H x W luminance, both on the 0..255 scale.
    """
    if config is None:
        config = FeatureConfig()
    cell = config.cell_size
    if patch.shape[0] < cell or patch.shape[1] < cell:
        raise PatchError(f"patch {patch.shape[:2]} smaller than one {cell}x{cell} cell")

    gray = _to_gray(patch)
    hist = orientation_histograms(gray, config.n_orientations, cell)
    channels = np.concatenate([
        _cell_pool(gray, cell)[None],
        block_normalize(hist, config.block_truncation),
    ])
    channels -= channels.mean(axis=(1, 2), keepdims=True)
    return FeatureStack(data=channels, cell_size=cell)


def _clamp_center(frame: Frame, box: BoundingBox) -> tuple[float, float]:
    cx, cy = box.center
    return min(max(cx, 0.0), float(frame.width)), min(max(cy, 0.0), float(frame.height))


def search_features(frame: Frame, box: BoundingBox, config: FeatureConfig,
                    scale: float = 1.0) -> tuple[FeatureStack, PatchGeometry]:
    """Features of the search region around box at one pyramid scale."""
    side = search_side(box, config.search_area_factor)
    patch, geometry = sample_patch(frame, _clamp_center(frame, box), side, scale,
                                   config.patch_size, config.cell_size, gray=True)
    return feature_channels(patch, config), geometry


def template_features(frame: Frame, box: BoundingBox, config: FeatureConfig) -> tuple[FeatureStack, PatchGeometry]:
    """Features of the (smaller) template region, sampled at the search patch's pixels per cell."""
    side = search_side(box, config.search_area_factor) * config.template_patch_size / config.patch_size
    patch, geometry = sample_patch(frame, _clamp_center(frame, box), side, 1.0,
                                   config.template_patch_size, config.cell_size, gray=True)
    return feature_channels(patch, config), geometry


def _hann_1d(n: int) -> np.ndarray:
    # Raised cosine peaking at n // 2, zero at both ends (halves differ by one sample for even n).
    if n == 1:
        return np.ones(1)
    if n == 2:
        return np.array([0.0, 1.0])
    center = n // 2
    idx = np.arange(n, dtype=np.float64) - center
    half = np.where(idx < 0, center, n - 1 - center).astype(np.float64)
    return 0.5 * (1.0 + np.cos(np.pi * idx / half))


def hann_window(height: int, width: int) -> np.ndarray:
    return np.outer(_hann_1d(height), _hann_1d(width))


def apply_window(stack: FeatureStack) -> FeatureStack:
    """Taper every channel by a 2-D Hann window (1 at the grid center, 0 on the border)."""
    window = hann_window(*stack.grid_shape)
    return FeatureStack(data=stack.data * window[None], cell_size=stack.cell_size)


# ---------------------------------------------------------------------------
# External feature files
# ---------------------------------------------------------------------------

def save_external_features(stack: FeatureStack, path: Path) -> None:
    c, hf, wf = stack.data.shape
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    Path(path).write_bytes(FEATURE_MAGIC + _HEADER.pack(c, hf, wf) + payload)


def load_external_features(path: Path, cell_size: int = 4) -> FeatureStack:
    """Read a stack written in the external binary format, values bit-exact as float32."""
    raw = Path(path).read_bytes()
    if raw[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(f"expected {FEATURE_MAGIC!r}, got {raw[:len(FEATURE_MAGIC)]!r}", "magic")

    header_end = len(FEATURE_MAGIC) + _HEADER.size
    if len(raw) < header_end:
        missing = ("C", "Hf", "Wf")[max(0, (len(raw) - len(FEATURE_MAGIC))) // 4]
        raise TruncatedPayloadError(f"file ends inside the header ({len(raw)} bytes)", missing)

    dims = _HEADER.unpack_from(raw, len(FEATURE_MAGIC))
    for name, value in zip(("C", "Hf", "Wf"), dims):
        if value < 1:
            raise DimensionMismatchError(f"dimension must be >= 1, got {value}", name)

    expected = dims[0] * dims[1] * dims[2]
    available = (len(raw) - header_end) / 4
    if available < expected:
        raise TruncatedPayloadError(
            f"header declares {expected} values, payload holds {int(available)}", "payload")
    if available > expected:
        raise DimensionMismatchError(
            f"header declares {expected} values, payload holds {available:g}", "payload")

    data = np.frombuffer(raw, dtype="<f4", count=expected, offset=header_end).reshape(dims)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError("payload holds non-finite values", "payload")
    return FeatureStack(data=data.astype(np.float32), cell_size=cell_size)
