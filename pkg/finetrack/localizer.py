"""Fine localizer: template channel attention, exact ROI pooling and the proposal scorer.

A proposal is described by pooling the channel-weighted search features over
its box at two resolutions (3x3 and 5x5). The scorer is a linear head over
[p, p * t], where p is the proposal descriptor and t the template descriptor,
trained by Adam to regress the proposal's GIoU with the ground truth.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from finetrack.core import BoundingBox, FinetrackError, giou, iou
from finetrack.features import (
    FeatureConfig, FeatureStack, Frame, PatchGeometry, search_features, template_features,
)


POOL_SIZES = (3, 5)
ATTENTION_EPS = 1e-6
HEAD_FORMAT = "finetrack-scorer-head"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TARGET_MEASURES = {"giou": giou, "iou": iou}


class LocalizerError(FinetrackError):
    """Raised on invalid pooling boxes, dimension mismatches and bad training input."""
    pass


class HeadHashMismatchError(LocalizerError):
    """Raised when a scorer head was trained under a different feature configuration."""
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ScorerTrainingConfig:
    """Offline scorer training: pair sampling and Adam settings."""
    steps: int = 2000
    step_size: float = 1e-3
    max_gap: int = 50              # frames between template and search frame
    frame_pairs: int = 32          # (template, search) frame pairs per sequence
    n_proposals: int = 16          # proposals per search frame
    min_giou: float = 0.1
    pos_sigma: float = 0.1         # center noise, fraction of the box diagonal
    scale_sigma: float = 0.2       # log-scale noise, per axis
    max_rejections: int = 100
    target_measure: str = "giou"   # "giou" or "iou"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.max_gap < 1:
            raise ValueError("max_gap must be >= 1")
        if self.frame_pairs < 1 or self.n_proposals < 1:
            raise ValueError("frame_pairs and n_proposals must be >= 1")
        if not -1.0 <= self.min_giou <= 1.0:
            raise ValueError("min_giou must lie in [-1, 1]")
        if self.pos_sigma < 0 or self.scale_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if self.max_rejections < 0:
            raise ValueError("max_rejections must be >= 0")
        if self.target_measure not in TARGET_MEASURES:
            raise ValueError(f"target_measure must be one of {sorted(TARGET_MEASURES)}")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChannelWeights:
    """Per-channel multipliers, all positive with mean 1."""
    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise LocalizerError(f"channel weights must be a non-empty vector, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise LocalizerError("channel weights must be finite and positive")

    @property
    def channels(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, channels: int) -> "ChannelWeights":
        return cls(np.ones(channels))


@dataclass(frozen=True, eq=False)
class PooledDescriptor:
    """C x k x k pooled grid."""
    values: np.ndarray
    k: int

    @property
    def vector(self) -> np.ndarray:
        return self.values.ravel()


@dataclass(frozen=True, eq=False)
class ScorerHead:
    """Linear scorer over [p, p * t]: weights has twice the descriptor dimension."""
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        if self.weights.ndim != 1 or self.weights.size < 2 or self.weights.size % 2:
            raise LocalizerError(f"head weights must be a vector of even length, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)) or not math.isfinite(self.bias):
            raise LocalizerError("head parameters must be finite")

    @property
    def descriptor_dim(self) -> int:
        return self.weights.size // 2

    @classmethod
    def zeros(cls, descriptor_dim: int) -> "ScorerHead":
        return cls(np.zeros(2 * descriptor_dim), 0.0)


@dataclass(frozen=True, eq=False)
class TrainingPair:
    template_desc: np.ndarray
    proposal_desc: np.ndarray
    proposal_box: BoundingBox
    gt_box: BoundingBox
    target: float
    template_frame: int = 0
    search_frame: int = 0


@dataclass(frozen=True)
class HeadFit:
    """Outcome of train_head: the best head plus the loss trace."""
    head: ScorerHead
    losses: tuple
    best_step: int

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def best_loss(self) -> float:
        return self.losses[self.best_step]


# ---------------------------------------------------------------------------
# Channel attention
# ---------------------------------------------------------------------------

def _cell_coverage(start: float, stop: float, n: int) -> np.ndarray:
    # Grid node j owns [j - 0.5, j + 0.5).
    centers = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(stop, centers + 0.5) - np.maximum(start, centers - 0.5), 0.0, 1.0)


def channel_weights(template: FeatureStack, target_box: BoundingBox, eps: float = ATTENTION_EPS) -> ChannelWeights:
    """Energy ratio of each channel inside vs. outside the target, normalized to mean 1.

    Cells partly covered by the box count fractionally on both sides. When
    the box covers the whole template there is no background to compare
    against and the weights fall back to uniform.
    """
    hf, wf = template.grid_shape
    inside = np.outer(_cell_coverage(target_box.y, target_box.y2, hf),
                      _cell_coverage(target_box.x, target_box.x2, wf))
    outside = 1.0 - inside
    in_area = inside.sum()
    out_area = outside.sum()
    if in_area <= 0:
        raise LocalizerError(f"target box {target_box.to_list()} does not cover the template grid")
    if out_area <= 1e-12:
        return ChannelWeights.uniform(template.channels)

    energy = np.abs(np.asarray(template.data, dtype=np.float64))
    in_mean = np.einsum("cij,ij->c", energy, inside) / in_area
    out_mean = np.einsum("cij,ij->c", energy, outside) / out_area
    ratio = (in_mean + eps) / (out_mean + eps)
    return ChannelWeights(ratio / ratio.mean())


# ---------------------------------------------------------------------------
# Precise ROI pooling
# ---------------------------------------------------------------------------

def _tent_integral(t: np.ndarray) -> np.ndarray:
    """Antiderivative of the unit tent max(0, 1 - |t|), zero at -inf."""
    t = np.clip(t, -1.0, 1.0)
    return np.where(t <= 0.0, 0.5 * (t + 1.0) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def _axis_integrals(starts: np.ndarray, extents: np.ndarray, k: int, n: int) -> np.ndarray:
    """(P, k, n) integrals of each node's tent over each of the k bins."""
    edges = starts[:, None] + extents[:, None] * (np.arange(k + 1) / k)[None, :]
    nodes = np.arange(n, dtype=np.float64)
    cumulative = _tent_integral(edges[:, :, None] - nodes[None, None, :])
    return cumulative[:, 1:, :] - cumulative[:, :-1, :]


def overlaps_grid(box: BoundingBox, grid_shape: tuple[int, int]) -> bool:
    """True when box meets the support of the interpolant, (-1, Wf) x (-1, Hf)."""
    hf, wf = grid_shape
    return box.x2 > -1.0 and box.x < wf and box.y2 > -1.0 and box.y < hf


def _check_overlap(box: BoundingBox, grid_shape: tuple[int, int]) -> None:
    if not overlaps_grid(box, grid_shape):
        raise LocalizerError(
            f"box {box.to_list()} lies entirely outside the {grid_shape[0]}x{grid_shape[1]} feature grid")


def _pool_many(data: np.ndarray, boxes: list[BoundingBox], k: int) -> np.ndarray:
    _, hf, wf = data.shape
    xs = np.array([b.x for b in boxes])
    ys = np.array([b.y for b in boxes])
    ws = np.array([b.w for b in boxes])
    hs = np.array([b.h for b in boxes])
    ix = _axis_integrals(xs, ws, k, wf)
    iy = _axis_integrals(ys, hs, k, hf)
    rows = np.tensordot(iy, data, axes=([2], [1]))                 # P x k x C x Wf
    pooled = np.matmul(rows, np.swapaxes(ix, 1, 2)[:, None]).transpose(0, 2, 1, 3)
    return pooled / ((ws / k) * (hs / k))[:, None, None, None]


def proi_pool(stack: FeatureStack, box: BoundingBox, k: int) -> PooledDescriptor:
    """Exact k x k average of the bilinear interpolant of each channel over box.

    Feature values sit at integer grid nodes and the interpolant is zero
    beyond the outermost nodes. Each bin average is the closed-form integral
    of the tent basis, so the result is differentiable in the box edges.
    """
    if k < 1:
        raise LocalizerError(f"pooling size must be >= 1, got {k}")
    _check_overlap(box, stack.grid_shape)
    data = np.asarray(stack.data, dtype=np.float64)
    return PooledDescriptor(values=_pool_many(data, [box], k)[0], k=k)


def describe_many(stack: FeatureStack, weights: ChannelWeights, boxes: list[BoundingBox]) -> np.ndarray:
    """(P, C * 34) descriptors for many boxes over the same channel-weighted stack."""
    if weights.channels != stack.channels:
        raise LocalizerError(f"{weights.channels} channel weights for a {stack.channels}-channel stack")
    if not boxes:
        return np.zeros((0, stack.channels * sum(k * k for k in POOL_SIZES)))
    for box in boxes:
        _check_overlap(box, stack.grid_shape)
    data = np.asarray(stack.data, dtype=np.float64) * weights.weights[:, None, None]
    parts = [_pool_many(data, boxes, k).reshape(len(boxes), -1) for k in POOL_SIZES]
    return np.concatenate(parts, axis=1)


def describe(stack: FeatureStack, weights: ChannelWeights, box: BoundingBox) -> np.ndarray:
    """Concatenated 3x3 and 5x5 pooled grids of the channel-weighted stack."""
    return describe_many(stack, weights, [box])[0]


def descriptor_dim(channels: int) -> int:
    return channels * sum(k * k for k in POOL_SIZES)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def head_features(template_desc: np.ndarray, proposal_descs: np.ndarray) -> np.ndarray:
    """[p, p * t] for one proposal (1-D) or a batch of proposals (2-D)."""
    proposal_descs = np.asarray(proposal_descs, dtype=np.float64)
    template_desc = np.asarray(template_desc, dtype=np.float64)
    if proposal_descs.shape[-1] != template_desc.shape[-1]:
        raise LocalizerError(
            f"descriptor dims differ: proposal {proposal_descs.shape[-1]} vs template {template_desc.shape[-1]}")
    return np.concatenate([proposal_descs, proposal_descs * template_desc], axis=-1)


def score_many(head: ScorerHead, template_desc: np.ndarray, proposal_descs: np.ndarray) -> np.ndarray:
    features = head_features(template_desc, proposal_descs)
    if features.shape[-1] != head.weights.size:
        raise LocalizerError(
            f"descriptor dim {features.shape[-1] // 2} does not match head dim {head.descriptor_dim}")
    return features @ head.weights + head.bias


def score(head: ScorerHead, template_desc: np.ndarray, proposal_desc: np.ndarray) -> float:
    """Predicted GIoU of one proposal."""
    return float(score_many(head, template_desc, proposal_desc))


def correlation_head(template_desc: np.ndarray) -> ScorerHead:
    """Head scoring <p, t> / <t, t>: 1.0 for a proposal that reproduces the template."""
    t = np.asarray(template_desc, dtype=np.float64)
    energy = float(t @ t)
    scale = 1.0 / energy if energy > 0 else 0.0
    return ScorerHead(np.concatenate([np.zeros(t.size), np.full(t.size, scale)]), 0.0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def design_matrix(pairs: list[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked head features and targets for a list of pairs."""
    if not pairs:
        raise LocalizerError("no training pairs")
    features = np.stack([head_features(p.template_desc, p.proposal_desc) for p in pairs])
    targets = np.array([p.target for p in pairs], dtype=np.float64)
    return features, targets


def loss_and_gradient(head: ScorerHead, features: np.ndarray,
                      targets: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Mean squared error of the head and its gradient w.r.t. (weights, bias).

    Args:
        head: current parameters
        features: (n, 2D) head features, see head_features
        targets: (n,) regression targets

    Returns:
        (loss, d loss / d weights, d loss / d bias)
    """
    residual = features @ head.weights + head.bias - targets
    n = residual.size
    loss = float(np.mean(residual ** 2))
    grad_w = (2.0 / n) * (features.T @ residual)
    grad_b = float((2.0 / n) * residual.sum())
    return loss, grad_w, grad_b


def fit_head(pairs: list[TrainingPair], steps: int, step_size: float,
             initial: Optional[ScorerHead] = None) -> HeadFit:
    """Full-batch Adam on the GIoU-MSE objective, keeping the best head seen."""
    if step_size <= 0:
        raise LocalizerError(f"step_size must be positive, got {step_size}")
    if steps < 0:
        raise LocalizerError(f"steps must be >= 0, got {steps}")
    features, targets = design_matrix(pairs)
    dim = features.shape[1] // 2
    head = initial if initial is not None else ScorerHead.zeros(dim)
    if head.descriptor_dim != dim:
        raise LocalizerError(f"initial head dim {head.descriptor_dim} does not match descriptors ({dim})")

    theta = np.append(head.weights.astype(np.float64), head.bias)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses = []
    best_theta, best_step = theta.copy(), 0

    for t in range(1, steps + 2):
        current = ScorerHead(theta[:-1].copy(), float(theta[-1]))
        loss, grad_w, grad_b = loss_and_gradient(current, features, targets)
        losses.append(loss)
        if loss < losses[best_step]:
            best_theta, best_step = theta.copy(), len(losses) - 1
        if t > steps:
            break
        grad = np.append(grad_w, grad_b)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad ** 2
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        theta = theta - step_size * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    best = ScorerHead(best_theta[:-1].copy(), float(best_theta[-1]))
    return HeadFit(head=best, losses=tuple(losses), best_step=best_step)


def train_head(pairs: list[TrainingPair], steps: int, step_size: float = 1e-3,
               initial: Optional[ScorerHead] = None) -> ScorerHead:
    """Train a scorer head; returns the parameters with the lowest observed loss."""
    return fit_head(pairs, steps, step_size, initial).head


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------

class FeatureSource(Protocol):
    """Per-frame feature access used by the pair sampler (0-based frame positions)."""

    def template(self, position: int, box: BoundingBox) -> tuple[FeatureStack, PatchGeometry]:
        ...

    def search(self, position: int, box: BoundingBox) -> tuple[FeatureStack, PatchGeometry]:
        ...


class FrameFeatureSource:
    """FeatureSource over lazily loaded frames, hand-crafted features."""

    def __init__(self, frame_at: Callable[[int], Frame], config: FeatureConfig):
        self.frame_at = frame_at
        self.config = config
        self._frames = {}

    def _frame(self, position: int) -> Frame:
        if position not in self._frames:
            self._frames[position] = self.frame_at(position)
        return self._frames[position]

    def template(self, position: int, box: BoundingBox) -> tuple[FeatureStack, PatchGeometry]:
        return template_features(self._frame(position), box, self.config)

    def search(self, position: int, box: BoundingBox) -> tuple[FeatureStack, PatchGeometry]:
        return search_features(self._frame(position), box, self.config)


def perturb_box(box: BoundingBox, rng: np.random.Generator, pos_sigma: float, scale_sigma: float) -> BoundingBox:
    """Gaussian jitter of the center (sigma = pos_sigma * diagonal) and of log width/height.

    Draws four normals in a fixed order (dx, dy, log w, log h).
    """
    dx, dy = rng.normal(0.0, 1.0, size=2) * (pos_sigma * box.diagonal)
    sw, sh = np.exp(rng.normal(0.0, 1.0, size=2) * scale_sigma)
    w = box.w * float(sw)
    h = box.h * float(sh)
    return BoundingBox(box.x + float(dx) + (box.w - w) / 2.0,
                       box.y + float(dy) + (box.h - h) / 2.0, w, h)


def sample_proposal(gt: BoundingBox, rng: np.random.Generator, config: ScorerTrainingConfig) -> BoundingBox:
    """Rejection-sample a perturbed box with giou >= min_giou, falling back to gt."""
    for _ in range(config.max_rejections + 1):
        candidate = perturb_box(gt, rng, config.pos_sigma, config.scale_sigma)
        if giou(candidate, gt) >= config.min_giou:
            return candidate
    return gt


def proposal_pairs(template_desc: np.ndarray, weights: ChannelWeights, stack: FeatureStack,
                   geometry: PatchGeometry, gt: BoundingBox, rng: np.random.Generator,
                   config: ScorerTrainingConfig, n_proposals: int = None,
                   template_frame: int = 0, search_frame: int = 0) -> list[TrainingPair]:
    """Training pairs for proposals drawn around gt in one search patch."""
    measure = TARGET_MEASURES[config.target_measure]
    count = config.n_proposals if n_proposals is None else n_proposals
    boxes = [sample_proposal(gt, rng, config) for _ in range(count)]
    descs = describe_many(stack, weights, [geometry.to_grid(b) for b in boxes])
    return [
        TrainingPair(template_desc=template_desc, proposal_desc=desc, proposal_box=box, gt_box=gt,
                     target=float(measure(box, gt)), template_frame=template_frame, search_frame=search_frame)
        for box, desc in zip(boxes, descs)
    ]


def template_descriptor(stack: FeatureStack, geometry: PatchGeometry, gt: BoundingBox,
                        attention: bool = True) -> tuple[ChannelWeights, np.ndarray]:
    """Channel weights and descriptor of the ground-truth template."""
    grid_box = geometry.to_grid(gt)
    weights = channel_weights(stack, grid_box) if attention else ChannelWeights.uniform(stack.channels)
    return weights, describe(stack, weights, grid_box)


def sample_training_pairs(annotations: list[BoundingBox], features: FeatureSource,
                          config: ScorerTrainingConfig = None, seed: int = 0,
                          attention: bool = True) -> list[TrainingPair]:
    """Draw (template, search) frame pairs at most max_gap apart and proposals in each search frame.

    Args:
        annotations: ground-truth box per frame, in frame order
        features: source of template and search features by frame position
        config: sampling settings; defaults to ScorerTrainingConfig()
        seed: seeds every random draw, so the result is reproducible
        attention: derive channel weights from the template (else uniform)

    Returns:
        frame_pairs * n_proposals training pairs
    """
    if config is None:
        config = ScorerTrainingConfig()
    n = len(annotations)
    if n < 2:
        raise LocalizerError(f"pair sampling needs >= 2 annotated frames, got {n}")

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(config.frame_pairs):
        t = int(rng.integers(0, n))
        lo, hi = max(0, t - config.max_gap), min(n - 1, t + config.max_gap)
        candidates = [i for i in range(lo, hi + 1) if i != t]
        s = candidates[int(rng.integers(0, len(candidates)))]

        t_stack, t_geom = features.template(t, annotations[t])
        weights, t_desc = template_descriptor(t_stack, t_geom, annotations[t], attention)
        s_stack, s_geom = features.search(s, annotations[s])
        pairs.extend(proposal_pairs(t_desc, weights, s_stack, s_geom, annotations[s], rng, config,
                                    template_frame=t, search_frame=s))
    return pairs


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def feature_config_hash(features: FeatureConfig, attention: bool = True) -> str:
    """sha256 over everything that changes what a descriptor entry means."""
    payload = {"features": asdict(features), "pool_sizes": list(POOL_SIZES), "attention": bool(attention)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_head(head: ScorerHead, path: Path, config_hash: str) -> None:
    doc = {
        "format": HEAD_FORMAT,
        "descriptor_dim": head.descriptor_dim,
        "feature_hash": config_hash,
        "bias": head.bias,
        "weights": [float(w) for w in head.weights],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_head(path: Path, config_hash: str) -> ScorerHead:
    """Read a head file, refusing it when its feature hash differs from config_hash."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise LocalizerError(f"{path}: scorer head file not found")
    except json.JSONDecodeError as e:
        raise LocalizerError(f"{path}: not a JSON document ({e})")

    if not isinstance(doc, dict) or doc.get("format") != HEAD_FORMAT:
        raise LocalizerError(f"{path}: not a scorer head file")
    if doc.get("feature_hash") != config_hash:
        raise HeadHashMismatchError(
            f"{path}: head was trained under feature config {str(doc.get('feature_hash'))[:12]}..., "
            f"current config is {config_hash[:12]}...")
    try:
        weights = np.array(doc["weights"], dtype=np.float64)
        bias = float(doc["bias"])
        dim = int(doc["descriptor_dim"])
    except (KeyError, TypeError, ValueError) as e:
        raise LocalizerError(f"{path}: malformed scorer head ({e})")
    head = ScorerHead(weights, bias)
    if head.descriptor_dim != dim:
        raise LocalizerError(f"{path}: descriptor_dim {dim} disagrees with {weights.size} weights")
    return head
