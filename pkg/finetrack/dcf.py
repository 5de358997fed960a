"""Discriminative correlation filter: training, detection and online update.

The filter W holds one spectrum per feature channel. For a sample with
channel spectra X_i the detection score is, per frequency bin,

    R = sum_i conj(X_i) * W_i

i.e. the filter circularly cross-correlated with the sample and summed over
channels. Training minimizes

    sum_j mu_j |R_j - Y|^2 + lambda^2 |W|^2

over the weighted sample memory. The normal equations decouple per bin into
C x C Hermitian systems, which are solved by a conjugate-gradient iteration
run on all bins at once. The sample memory carries the per-bin Gram matrices
sum_j mu_j X_j X_j^H those systems multiply by.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from finetrack.core import BoundingBox, FinetrackError, TargetState
from finetrack.features import FeatureStack, PatchGeometry


class DcfError(FinetrackError):
    """Raised on dimension mismatches and invalid filter configuration."""
    pass


@dataclass
class DcfConfig:
    """Filter hyperparameters; defaults follow common DCF practice."""
    regularization: float = 0.1          # lambda
    cg_init_iterations: int = 50         # CG budget on the first frame
    cg_iterations: int = 5               # CG budget per subsequent update
    cg_tolerance: float = 1e-6           # relative residual stop
    memory_capacity: int = 30            # N
    sample_decay: float = 0.02           # weight given to each new sample
    label_sigma_factor: float = 1.0 / 16.0
    learning_rate: float = 0.01          # lr of the filter moving average
    update_interval: int = 1             # frames between filter updates

    def __post_init__(self):
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if self.cg_init_iterations < 1 or self.cg_iterations < 1:
            raise ValueError("CG iteration budgets must be positive")
        if self.cg_tolerance <= 0:
            raise ValueError("cg_tolerance must be positive")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be >= 1")
        if not 0.0 < self.sample_decay < 1.0:
            raise ValueError("sample_decay must lie in (0, 1)")
        if self.label_sigma_factor <= 0:
            raise ValueError("label_sigma_factor must be positive")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in [0, 1]")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianLabel:
    """Desired response: a circularly wrapped Gaussian peaked at `peak`."""
    map: np.ndarray
    sigma: float
    peak: tuple[int, int]

    @property
    def spectrum(self) -> np.ndarray:
        return np.fft.fft2(self.map)


@dataclass(frozen=True, eq=False)
class FrequencyFilter:
    """Per-channel filter spectra, C x Hf x Wf complex."""
    coeffs: np.ndarray
    residual_norms: tuple = ()

    def __post_init__(self):
        if self.coeffs.ndim != 3:
            raise DcfError(f"filter coefficients must be C x Hf x Wf, got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise DcfError("filter coefficients must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.coeffs.shape

    @classmethod
    def zeros(cls, shape: tuple[int, int, int]) -> "FrequencyFilter":
        return cls(np.zeros(shape, dtype=np.complex128))


@dataclass(frozen=True, eq=False)
class SampleMemory:
    """Weighted training samples (channel spectra); weights sum to 1 once non-empty."""
    capacity: int
    spectra: tuple = ()
    weights: tuple = ()
    serials: tuple = ()          # insertion order, oldest first
    next_serial: int = 0
    gram: Optional[np.ndarray] = None           # Hf x Wf x C x C, sum_j mu_j X_j X_j^H
    weighted_sum: Optional[np.ndarray] = None   # C x Hf x Wf, sum_j mu_j X_j

    @property
    def count(self) -> int:
        return len(self.spectra)

    @classmethod
    def empty(cls, capacity: int) -> "SampleMemory":
        if capacity < 1:
            raise DcfError("memory capacity must be >= 1")
        return cls(capacity=capacity)


@dataclass(frozen=True, eq=False)
class ResponseMap:
    """Correlation response over the search grid.

    `peak` is the grid position of zero displacement (the label peak). A
    target displaced by d cells inside the patch answers at peak - d.
    The optional fields tie the map to where and at which scale it was sampled.
    """
    data: np.ndarray
    peak: tuple[int, int]
    geometry: Optional[PatchGeometry] = None
    scale_factor: float = 1.0
    scale_index: int = 1
    target_size: Optional[tuple[float, float]] = None

    def displacement(self, row: int, col: int) -> tuple[int, int]:
        """Target displacement (dy, dx) in cells implied by a response at (row, col)."""
        h, w = self.data.shape
        dy = (self.peak[0] - row + h // 2) % h - h // 2
        dx = (self.peak[1] - col + w // 2) % w - w // 2
        return dy, dx


# ---------------------------------------------------------------------------
# Labels and transforms
# ---------------------------------------------------------------------------

def gaussian_label(dims: tuple[int, int], sigma: float, peak: tuple[int, int]) -> GaussianLabel:
    """exp(-d^2 / 2 sigma^2) with d the wrap-around distance to peak, in cells."""
    h, w = dims
    if sigma <= 0:
        raise DcfError(f"label sigma must be positive, got {sigma}")
    if not (0 <= peak[0] < h and 0 <= peak[1] < w):
        raise DcfError(f"label peak {peak} outside {h}x{w} grid")
    dy = np.abs(np.arange(h) - peak[0])
    dx = np.abs(np.arange(w) - peak[1])
    dy = np.minimum(dy, h - dy)
    dx = np.minimum(dx, w - dx)
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    return GaussianLabel(map=np.exp(-d2 / (2.0 * sigma ** 2)), sigma=float(sigma), peak=(int(peak[0]), int(peak[1])))


def label_for_grid(grid_shape: tuple[int, int], config: DcfConfig) -> GaussianLabel:
    """Label centered on the grid, sigma proportional to the grid diagonal."""
    h, w = grid_shape
    sigma = config.label_sigma_factor * math.hypot(h, w)
    return gaussian_label((h, w), sigma, (h // 2, w // 2))


def to_spectrum(stack: FeatureStack) -> np.ndarray:
    """Per-channel 2-D DFT."""
    return np.fft.fft2(np.asarray(stack.data, dtype=np.float64), axes=(-2, -1))


def from_spectrum(spectra: np.ndarray) -> np.ndarray:
    """Inverse of to_spectrum for spectra of real channels."""
    return np.real(np.fft.ifft2(spectra, axes=(-2, -1)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _bin_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-bin inner product <a, b> over the channel axis."""
    return np.sum(np.conj(a) * b, axis=0)


def conjugate_gradient(apply_op: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, x0: np.ndarray,
                       iterations: int, tolerance: float) -> tuple[np.ndarray, list[float]]:
    """Solve the per-bin Hermitian positive definite systems A x = rhs.

    Every frequency bin runs its own Krylov recurrence (step sizes are
    per-bin arrays), in the residual-minimizing form of conjugate gradients,
    so each bin's residual norm is non-increasing. Iteration stops once the
    total residual norm drops below tolerance times its initial value.
    Returns the solution and the residual norm after each iteration.
    """
    x = x0.astype(np.complex128, copy=True)
    r = rhs - apply_op(x)
    ar = apply_op(r)
    p = r.copy()
    ap = ar.copy()
    r_ar = np.real(_bin_dot(r, ar))

    norms = [float(np.linalg.norm(r))]
    initial = norms[0]
    if initial == 0.0:
        return x, norms

    for _ in range(iterations):
        if norms[-1] <= tolerance * initial:
            break
        ap_ap = np.real(_bin_dot(ap, ap))
        alpha = np.divide(r_ar, ap_ap, out=np.zeros_like(r_ar), where=ap_ap > 0)
        x += alpha * p
        r -= alpha * ap
        ar = apply_op(r)
        r_ar_next = np.real(_bin_dot(r, ar))
        beta = np.divide(r_ar_next, r_ar, out=np.zeros_like(r_ar), where=r_ar > 0)
        p = r + beta * p
        ap = ar + beta * ap
        r_ar = r_ar_next
        norms.append(float(np.linalg.norm(r)))
    return x, norms


def _check_memory(memory: SampleMemory, label: GaussianLabel) -> tuple[int, int, int]:
    if memory.count == 0:
        raise DcfError("cannot train a filter from an empty sample memory")
    shape = memory.spectra[0].shape
    for spectrum in memory.spectra:
        if spectrum.shape != shape:
            raise DcfError(f"sample shapes disagree: {spectrum.shape} vs {shape}")
    if shape[1:] != label.map.shape:
        raise DcfError(f"label grid {label.map.shape} does not match sample grid {shape[1:]}")
    return shape


def _outer(sample: np.ndarray) -> np.ndarray:
    v = np.moveaxis(sample, 0, -1)
    return v[..., :, None] * np.conj(v)[..., None, :]


def memory_statistics(memory: SampleMemory) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin weighted Gram matrices and the weighted sample sum.

    update_memory keeps both current; a memory assembled by hand gets them
    computed here from its samples.
    """
    if memory.gram is not None and memory.weighted_sum is not None:
        return memory.gram, memory.weighted_sum
    spectra = np.stack(memory.spectra)
    weights = np.asarray(memory.weights, dtype=np.float64)
    gram = np.einsum("n,nihw,njhw->hwij", weights, spectra, np.conj(spectra), optimize=True)
    return gram, np.tensordot(weights, spectra, axes=1)


def normal_operator(memory: SampleMemory, regularization: float) -> Callable[[np.ndarray], np.ndarray]:
    """W -> sum_j mu_j X_j (sum_i conj(X_ji) W_i) + lambda^2 W."""
    gram, _ = memory_statistics(memory)
    lam2 = regularization ** 2

    def apply(w: np.ndarray) -> np.ndarray:
        per_bin = np.matmul(gram, np.moveaxis(w, 0, -1)[..., None])[..., 0]
        return np.moveaxis(per_bin, -1, 0) + lam2 * w

    return apply


def train_filter(memory: SampleMemory, label: GaussianLabel, config: DcfConfig,
                 warm_start: FrequencyFilter = None, iterations: int = None) -> FrequencyFilter:
    """Solve the regularized weighted least-squares filter by conjugate gradients.

    `iterations` defaults to the initial-frame budget; warm starting from the
    previous filter lets the per-frame budget stay small.
    """
    shape = _check_memory(memory, label)
    if warm_start is not None and warm_start.shape != shape:
        raise DcfError(f"warm start shape {warm_start.shape} does not match samples {shape}")
    if iterations is None:
        iterations = config.cg_init_iterations

    _, weighted_sum = memory_statistics(memory)
    rhs = weighted_sum * label.spectrum[None]
    x0 = warm_start.coeffs if warm_start is not None else np.zeros(shape, dtype=np.complex128)

    coeffs, norms = conjugate_gradient(
        normal_operator(memory, config.regularization), rhs, x0, iterations, config.cg_tolerance)
    return FrequencyFilter(coeffs=coeffs, residual_norms=tuple(norms))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def detect_spectrum(filt: FrequencyFilter, spectra: np.ndarray, peak: tuple[int, int] = None) -> ResponseMap:
    if spectra.shape != filt.shape:
        raise DcfError(f"sample shape {spectra.shape} does not match filter {filt.shape}")
    h, w = spectra.shape[1:]
    response = np.real(np.fft.ifft2(np.sum(np.conj(spectra) * filt.coeffs, axis=0)))
    if peak is None:
        peak = (h // 2, w // 2)
    return ResponseMap(data=response, peak=peak)


def detect(filt: FrequencyFilter, stack: FeatureStack, peak: tuple[int, int] = None) -> ResponseMap:
    """Real response of the filter correlated with the stack, summed over channels."""
    return detect_spectrum(filt, to_spectrum(stack), peak)


def normalize_response(resp: ResponseMap, label: GaussianLabel) -> ResponseMap:
    """Cosine similarity between the response and the label re-centered on every grid cell.

    Values lie in [-1, 1], so maps sampled at different pyramid scales can be
    compared directly. A target that answers with a sharper or wider peak
    scores lower than one that reproduces the label. An all-zero response
    stays all zero.
    """
    if resp.data.shape != label.map.shape:
        raise DcfError(f"response grid {resp.data.shape} does not match label grid {label.map.shape}")
    energy = float(np.linalg.norm(resp.data)) * float(np.linalg.norm(label.map))
    if energy == 0.0:
        return replace(resp, data=np.zeros_like(resp.data, dtype=np.float64))
    origin = np.roll(label.map, (-label.peak[0], -label.peak[1]), axis=(0, 1))
    scores = np.real(np.fft.ifft2(np.fft.fft2(resp.data) * np.conj(np.fft.fft2(origin))))
    return replace(resp, data=np.clip(scores / energy, -1.0, 1.0))


def select_scale(responses: list[ResponseMap]) -> tuple[TargetState, float]:
    """Global maximum over all pyramid levels, mapped back to a frame-pixel TargetState.

    Exact ties prefer the scale factor closest to 1.0, then the smallest
    displacement from the label peak, then the smallest linear grid index.
    """
    if not responses:
        raise DcfError("select_scale needs at least one response")

    best_key = None
    best = None
    for level, resp in enumerate(responses):
        if resp.geometry is None or resp.target_size is None:
            raise DcfError(f"response {level} carries no patch geometry")
        value = float(resp.data.max())
        rows, cols = np.nonzero(resp.data == value)
        for row, col in zip(rows.tolist(), cols.tolist()):
            dy, dx = resp.displacement(row, col)
            key = (-value, abs(math.log(resp.scale_factor)), dy * dy + dx * dx,
                   row * resp.data.shape[1] + col, level)
            if best_key is None or key < best_key:
                best_key = key
                best = (resp, dy, dx, value)

    resp, dy, dx, value = best
    ox, oy = resp.geometry.cells_to_pixels(dy, dx)
    cx = resp.geometry.center[0] + ox
    cy = resp.geometry.center[1] + oy
    w, h = resp.target_size
    state = TargetState(box=BoundingBox.from_center(cx, cy, w, h), scale_index=resp.scale_index)
    return state, value


# ---------------------------------------------------------------------------
# Online update
# ---------------------------------------------------------------------------

def update_memory(memory: SampleMemory, new_sample: np.ndarray, decay: float) -> SampleMemory:
    """Insert a sample with weight `decay`, scaling the others by (1 - decay).

    At capacity the lowest-weight sample (oldest on ties) is evicted first;
    the surviving weights are renormalized so the total stays 1. The Gram
    matrices and weighted sum follow the same arithmetic.
    """
    if not 0.0 < decay < 1.0:
        raise DcfError(f"decay must lie in (0, 1), got {decay}")
    if memory.count and new_sample.shape != memory.spectra[0].shape:
        raise DcfError(f"sample shape {new_sample.shape} does not match memory {memory.spectra[0].shape}")

    spectra = list(memory.spectra)
    weights = list(memory.weights)
    serials = list(memory.serials)
    gram, weighted_sum = memory_statistics(memory) if spectra else (None, None)

    if len(spectra) >= memory.capacity:
        victim = min(range(len(weights)), key=lambda k: (weights[k], serials[k]))
        gram = gram - weights[victim] * _outer(spectra[victim])
        weighted_sum = weighted_sum - weights[victim] * spectra[victim]
        del spectra[victim], weights[victim], serials[victim]

    if not spectra:
        return replace(memory, spectra=(new_sample,), weights=(1.0,),
                       serials=(memory.next_serial,), next_serial=memory.next_serial + 1,
                       gram=_outer(new_sample), weighted_sum=np.array(new_sample, dtype=np.complex128))

    total = sum(weights)
    if total > 0:
        weights = [wt * (1.0 - decay) / total for wt in weights]
        gram = gram * ((1.0 - decay) / total)
        weighted_sum = weighted_sum * ((1.0 - decay) / total)
    else:
        weights = [(1.0 - decay) / len(weights)] * len(weights)
        gram = weighted_sum = None
    spectra.append(new_sample)
    weights.append(decay)
    serials.append(memory.next_serial)
    norm = sum(weights)
    updated = replace(memory, spectra=tuple(spectra), weights=tuple(wt / norm for wt in weights),
                      serials=tuple(serials), next_serial=memory.next_serial + 1,
                      gram=None, weighted_sum=None)
    if gram is None:
        gram, weighted_sum = memory_statistics(updated)
    else:
        gram = (gram + decay * _outer(new_sample)) / norm
        weighted_sum = (weighted_sum + decay * new_sample) / norm
    return replace(updated, gram=gram, weighted_sum=weighted_sum)


def update_filter(previous: FrequencyFilter, fresh: FrequencyFilter, lr: float) -> FrequencyFilter:
    """Moving average (1 - lr) * previous + lr * fresh."""
    if previous.shape != fresh.shape:
        raise DcfError(f"filter shapes differ: {previous.shape} vs {fresh.shape}")
    if not 0.0 <= lr <= 1.0:
        raise DcfError(f"learning rate must lie in [0, 1], got {lr}")
    return FrequencyFilter(coeffs=(1.0 - lr) * previous.coeffs + lr * fresh.coeffs,
                           residual_norms=fresh.residual_norms)
