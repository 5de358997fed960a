"""Coarse-to-fine tracker: DCF coarse estimate, Gaussian proposals, scorer ranking, filter update.

Per frame:
    1. sample the search region around the last state at every pyramid scale
    2. correlate with the filter; each response is scored against the label
       shape and the best position over all scales gives the coarse state
    3. draw proposals around the coarse box (proposal 0 is the coarse box itself)
    4. score them against the template; the best becomes the new state
    5. add a sample at the new state to the memory and refresh the filter
"""

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np

from finetrack.bench import TrackResult
from finetrack.core import BoundingBox, FinetrackError, TargetState
from finetrack.dcf import (
    DcfConfig, FrequencyFilter, GaussianLabel, SampleMemory, detect_spectrum, label_for_grid,
    normalize_response, select_scale, to_spectrum, train_filter, update_filter, update_memory,
)
from finetrack.features import (
    FeatureConfig, FeatureStack, Frame, PatchGeometry, ScalePyramid, apply_window, search_features,
    template_features,
)
from finetrack.localizer import (
    ChannelWeights, ScorerHead, ScorerTrainingConfig, correlation_head, describe_many, overlaps_grid,
    perturb_box, proposal_pairs, score_many, template_descriptor, train_head,
)


class TrackerError(FinetrackError):
    """Raised when a frame cannot be processed (dimension or feature mismatch)."""
    pass


class InitError(TrackerError):
    """Raised when the tracker cannot be initialized on the first frame."""
    pass


@dataclass
class TrackerConfig:
    """Everything that determines a trajectory besides the frames and the first box."""
    dcf: DcfConfig = field(default_factory=DcfConfig)
    pyramid: ScalePyramid = field(default_factory=ScalePyramid)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    scorer: ScorerTrainingConfig = field(default_factory=ScorerTrainingConfig)
    n_proposals: int = 64
    proposal_pos_sigma: float = 0.03     # fraction of the box diagonal
    proposal_scale_sigma: float = 0.03   # log-scale std per axis
    seed: int = 0
    confidence_floor: float = 0.1        # normalized coarse peaks (in [-1, 1]) below this flag the frame
    fine_stage: bool = True              # False: coarse-only tracker
    channel_attention: bool = True       # False: uniform channel weights
    head_warmup_proposals: int = 128
    head_warmup_steps: int = 200
    head_warmup_step_size: float = 1e-3
    min_target_size: float = 4.0

    def __post_init__(self):
        if self.n_proposals < 1:
            raise ValueError("n_proposals must be >= 1")
        if self.proposal_pos_sigma <= 0 or self.proposal_scale_sigma <= 0:
            raise ValueError("proposal sigmas must be positive")
        if self.head_warmup_proposals < 1 or self.head_warmup_steps < 0:
            raise ValueError("head warm-up needs >= 1 proposal and >= 0 steps")
        if self.head_warmup_step_size <= 0:
            raise ValueError("head_warmup_step_size must be positive")
        if self.min_target_size <= 0:
            raise ValueError("min_target_size must be positive")


@dataclass(frozen=True, eq=False)
class TrackerState:
    """Per-sequence carry from one frame to the next."""
    filter: FrequencyFilter
    memory: SampleMemory
    label: GaussianLabel
    channel_wts: ChannelWeights
    template_desc: np.ndarray
    head: ScorerHead
    last_state: TargetState
    config: TrackerConfig
    rng_state: dict
    frame_shape: tuple
    frames_seen: int = 1
    coarse_state: Optional[TargetState] = None
    coarse_peak: float = 1.0
    low_confidence: bool = False


def _rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _fit_box(box: BoundingBox, frame: Frame, min_size: float) -> BoundingBox:
    """Keep the center inside the frame and the extent between min_size and the frame size."""
    cx, cy = box.center
    cx = min(max(cx, 0.0), float(frame.width))
    cy = min(max(cy, 0.0), float(frame.height))
    w = min(max(box.w, min_size), float(frame.width))
    h = min(max(box.h, min_size), float(frame.height))
    if (cx, cy, w, h) == (*box.center, box.w, box.h):
        return box
    return BoundingBox.from_center(cx, cy, w, h)


def _training_spectrum(stack: FeatureStack) -> np.ndarray:
    return to_spectrum(apply_window(stack))


def init(frame: Frame, gt: BoundingBox, config: TrackerConfig = None,
         head: Optional[ScorerHead] = None) -> TrackerState:
    """Train the first filter and build the template at the ground-truth box.

    Without an offline head (and with the fine stage enabled) the scorer is
    warmed up on proposals drawn around gt in the first frame, starting from
    the template-correlation head.
    """
    if config is None:
        config = TrackerConfig()
    if not frame.contains(gt):
        raise InitError(f"initial box {gt.to_list()} is not inside the {frame.width}x{frame.height} frame")

    stack, geometry = search_features(frame, gt, config.features)
    label = label_for_grid(stack.grid_shape, config.dcf)
    memory = update_memory(SampleMemory.empty(config.dcf.memory_capacity), _training_spectrum(stack),
                           config.dcf.sample_decay)
    filt = train_filter(memory, label, config.dcf)

    t_stack, t_geometry = template_features(frame, gt, config.features)
    weights, t_desc = template_descriptor(t_stack, t_geometry, gt, config.channel_attention)

    rng = np.random.default_rng(config.seed)
    if head is not None:
        if head.descriptor_dim != t_desc.size:
            raise InitError(f"scorer head expects {head.descriptor_dim}-dim descriptors, features give {t_desc.size}")
    elif config.fine_stage:
        pairs = proposal_pairs(t_desc, weights, stack, geometry, gt, rng, config.scorer,
                               n_proposals=config.head_warmup_proposals)
        head = train_head(pairs, config.head_warmup_steps, config.head_warmup_step_size,
                          initial=correlation_head(t_desc))
    else:
        head = ScorerHead.zeros(t_desc.size)

    return TrackerState(
        filter=filt,
        memory=memory,
        label=label,
        channel_wts=weights,
        template_desc=t_desc,
        head=head,
        last_state=TargetState(box=gt, scale_index=config.pyramid.center_index),
        config=config,
        rng_state=rng.bit_generator.state,
        frame_shape=frame.pixels.shape,
    )


def sample_proposals(coarse: TargetState, config: TrackerConfig, rng: np.random.Generator) -> list[BoundingBox]:
    """N boxes around the coarse state; proposal 0 is the coarse box unchanged."""
    proposals = [coarse.box]
    for _ in range(config.n_proposals - 1):
        proposals.append(perturb_box(coarse.box, rng, config.proposal_pos_sigma, config.proposal_scale_sigma))
    return proposals


def _coarse(state: TrackerState, frame: Frame) -> tuple[TargetState, float, FeatureStack, PatchGeometry]:
    config = state.config
    box = state.last_state.box
    responses, stacks = [], []
    for level, factor in enumerate(config.pyramid.scale_factors):
        stack, geometry = search_features(frame, box, config.features, scale=factor)
        spectra = _training_spectrum(stack)
        if spectra.shape != state.filter.shape:
            raise TrackerError(f"search features {spectra.shape} do not match the filter {state.filter.shape}")
        response = normalize_response(detect_spectrum(state.filter, spectra, state.label.peak), state.label)
        responses.append(replace(response, geometry=geometry, scale_factor=factor, scale_index=level + 1,
                                 target_size=(box.w * factor, box.h * factor)))
        stacks.append((stack, geometry))
    coarse, peak = select_scale(responses)
    stack, geometry = stacks[coarse.scale_index - 1]
    return coarse, peak, stack, geometry


def _refine(state: TrackerState, coarse: TargetState, stack: FeatureStack, geometry: PatchGeometry,
            rng: np.random.Generator) -> BoundingBox:
    proposals = sample_proposals(coarse, state.config, rng)
    grid_boxes = [geometry.to_grid(p) for p in proposals]
    usable = [i for i, b in enumerate(grid_boxes) if overlaps_grid(b, stack.grid_shape)]
    scores = np.full(len(proposals), -np.inf)
    if usable:
        descs = describe_many(stack, state.channel_wts, [grid_boxes[i] for i in usable])
        scores[usable] = score_many(state.head, state.template_desc, descs)
    # argmax returns the first maximum, so the coarse box wins exact ties
    return proposals[int(np.argmax(scores))]


def step(state: TrackerState, frame: Frame) -> tuple[TrackerState, TargetState]:
    """Track one frame; returns the updated state and the emitted target state."""
    if frame.pixels.shape != state.frame_shape:
        raise TrackerError(f"frame shape {frame.pixels.shape} differs from the first frame {state.frame_shape}")
    config = state.config
    coarse, peak, stack, geometry = _coarse(state, frame)
    coarse = replace(coarse, box=_fit_box(coarse.box, frame, config.min_target_size))

    rng = _rng(state.rng_state)
    if config.fine_stage:
        box = _fit_box(_refine(state, coarse, stack, geometry, rng), frame, config.min_target_size)
    else:
        box = coarse.box
    target = TargetState(box=box, scale_index=coarse.scale_index)

    frames_seen = state.frames_seen + 1
    filt, memory = state.filter, state.memory
    if frames_seen % config.dcf.update_interval == 0:
        sample_stack, _ = search_features(frame, box, config.features)
        memory = update_memory(memory, _training_spectrum(sample_stack), config.dcf.sample_decay)
        fresh = train_filter(memory, state.label, config.dcf, warm_start=filt,
                             iterations=config.dcf.cg_iterations)
        filt = update_filter(filt, fresh, config.dcf.learning_rate)

    new_state = replace(
        state,
        filter=filt,
        memory=memory,
        last_state=target,
        rng_state=rng.bit_generator.state,
        frames_seen=frames_seen,
        coarse_state=coarse,
        coarse_peak=peak,
        low_confidence=peak < config.confidence_floor,
    )
    return new_state, target


FrameCallback = Callable[[int, TrackerState], None]


def track_sequence(frames: Iterable[Frame], gt: BoundingBox, config: TrackerConfig = None,
                   head: Optional[ScorerHead] = None, on_frame: Optional[FrameCallback] = None) -> TrackResult:
    """Run init on the first frame and step on the rest, timing every frame.

    on_frame(position, state) is called after each frame (position 0 is init).
    """
    predicted, times, flags = [], [], []
    state = None
    for position, frame in enumerate(frames):
        start = time.perf_counter()
        if state is None:
            state = init(frame, gt, config, head)
            box = gt
        else:
            state, target = step(state, frame)
            box = target.box
        times.append(time.perf_counter() - start)
        predicted.append(box)
        flags.append(state.low_confidence)
        if on_frame is not None:
            on_frame(position, state)
    if state is None:
        raise TrackerError("no frames to track")
    return TrackResult(predicted=tuple(predicted), times=tuple(times), low_confidence=tuple(flags))
