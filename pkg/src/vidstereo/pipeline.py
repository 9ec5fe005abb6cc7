"""Three-stage coarse-to-fine video stereo model and clip-level inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import PYRAMID_SCALES, FeatureEncoder, FeaturePyramid, FlowSet, extract_features
from .config import ModelConfig, PipelineConfig
from .correlation import align_neighbors
from .geometry import convex_upsample, resize_bilinear, upsample_disparity_to, upscale_disparity
from .mru import (UPSAMPLE_FACTOR, StageInputs, UpdateBlock, UpdateState, gather_frames,
                  mru_iteration, neighbor_index)


class PipelineError(ValueError):
    pass


@dataclass
class DisparityPrediction:
    """``final``: ``(N, T, H, W)`` non-negative full-resolution disparities.

    ``iterates`` (only when requested) lists every per-stage, per-iteration
    prediction upsampled to full resolution, coarse stage first, unclamped.
    """
    final: torch.Tensor
    iterates: list = field(default_factory=list)
    stage_iterates: list = field(default_factory=list)


class StereoVideoModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.encoder = FeatureEncoder(config.feature_dim, config.encoder_widths)
        if config.stage_weights == "shared":
            self.update_blocks = nn.ModuleList([UpdateBlock(config, upsample_head=True)])
        else:
            self.update_blocks = nn.ModuleList(
                [UpdateBlock(config, upsample_head=(i == 2)) for i in range(3)])
        n_init = 1 if config.motion_state == "shared" else 3
        self.motion_init = nn.ParameterList(
            [nn.Parameter(0.5 * torch.randn(config.motion_dim)) for _ in range(n_init)])

    def block_for(self, stage: int) -> UpdateBlock:
        return self.update_blocks[0 if len(self.update_blocks) == 1 else stage]

    def initial_motion(self, stage: int, like: torch.Tensor) -> torch.Tensor:
        vec = self.motion_init[0 if len(self.motion_init) == 1 else stage]
        nt, _, h, w = like.shape
        return vec.to(like.dtype).view(1, -1, 1, 1).expand(nt, -1, h, w)

    def forward(self, left, right, flows: FlowSet, iterations: int,
                return_iterates: bool = False) -> DisparityPrediction:
        return infer(self, left, right, flows, iterations, return_iterates=return_iterates)


def stage_inputs(model: StereoVideoModel, pyramid: FeaturePyramid, flows: FlowSet,
                 scale: Fraction) -> StageInputs:
    cfg = model.config
    left = pyramid.left[scale]
    n, t = left.shape[:2]
    left = left.flatten(0, 1)
    right = pyramid.right[scale].flatten(0, 1)
    device = left.device
    if cfg.correlation_mode == "per-frame":
        idx = torch.arange(t, device=device)
        prev_idx, next_idx = idx, idx
        zero = left.new_zeros(n * t, 2, *left.shape[-2:])
        to_prev, to_next = zero, zero
    else:
        prev_idx, next_idx = neighbor_index(t, device)
        to_prev, to_next = flows.at_scale(scale)
        to_prev = to_prev.to(left.dtype).flatten(0, 1)
        to_next = to_next.to(left.dtype).flatten(0, 1)
        if not cfg.alignment:
            to_prev, to_next = torch.zeros_like(to_prev), torch.zeros_like(to_next)
    right_triple = align_neighbors(gather_frames(right, t, prev_idx), right,
                                   gather_frames(right, t, next_idx), to_prev, to_next)
    left_triple = None
    if cfg.correlation_mode == "multi-multi":
        left_triple = align_neighbors(gather_frames(left, t, prev_idx), left,
                                      gather_frames(left, t, next_idx), to_prev, to_next)
    return StageInputs(left=left, right_triple=right_triple, left_triple=left_triple,
                       to_prev=to_prev, to_next=to_next, prev_index=prev_idx,
                       next_index=next_idx, frames=t)


def run_stage(model: StereoVideoModel, stage: int, inputs: StageInputs,
              init_disp: torch.Tensor, init_motion: torch.Tensor, iterations: int):
    """Run ``iterations`` update steps at one scale.

    Returns ``(iterates, final_motion, final_hidden)`` where ``iterates`` is a
    list of ``(disp, upsample_weights_or_None)`` per iteration.
    """
    if iterations < 1:
        raise PipelineError("iterations must be >= 1")
    block = model.block_for(stage)
    n = init_disp.shape[0] // inputs.frames
    h, w = init_disp.shape[-2:]
    hidden = init_disp.new_zeros(n, model.config.hidden_dim, inputs.frames, h, w)
    state = UpdateState(disp=init_disp, hidden=hidden, motion=init_motion)
    last = stage == len(PYRAMID_SCALES) - 1
    iterates = []
    for _ in range(iterations):
        state = mru_iteration(block, state, inputs, want_weights=last)
        iterates.append((state.disp, state.upsample_weights))
    return iterates, state.motion, state.hidden


def _check_clip(model, left, right, flows):
    if left.dim() != 5 or left.shape != right.shape:
        raise PipelineError(f"left/right must be matching (N, T, 3, H, W), got "
                            f"{tuple(left.shape)} and {tuple(right.shape)}")
    n, t, _, h, w = left.shape
    if h % 16 or w % 16:
        raise PipelineError(f"image height and width must be divisible by 16, got {h}x{w}")
    if t < 2 and model.config.correlation_mode != "per-frame":
        raise PipelineError(
            "clips need T >= 2 frames; use correlation_mode='per-frame' for single images")
    if flows.frames != t:
        raise PipelineError(f"flow set covers {flows.frames} frames, clip has {t}")


def infer(model: StereoVideoModel, left: torch.Tensor, right: torch.Tensor, flows: FlowSet,
          iterations: int, return_iterates: bool = False) -> DisparityPrediction:
    """Predict disparities for whole ``(N, T, 3, H, W)`` clips in one pass."""
    _check_clip(model, left, right, flows)
    n, t, _, H, W = left.shape
    pyramid = extract_features(model.encoder, left, right)
    disp = motion = None
    full_iterates, stage_iterates = [], []
    final = None
    for stage, scale in enumerate(PYRAMID_SCALES):
        inputs = stage_inputs(model, pyramid, flows, scale)
        if disp is None:
            disp = inputs.left.new_zeros(n * t, 1, *inputs.left.shape[-2:])
        else:
            disp = upscale_disparity(disp, 2)
        if motion is None or model.config.motion_state == "separated":
            motion = model.initial_motion(stage, inputs.left)
        else:
            motion = resize_bilinear(motion, tuple(inputs.left.shape[-2:]))
        iterates, motion, _ = run_stage(model, stage, inputs, disp, motion, iterations)
        disp = iterates[-1][0]
        if return_iterates:
            stage_iterates.append([d.view(n, t, *d.shape[-2:]) for d, _ in iterates])
            for d, wts in iterates:
                full_iterates.append(_to_full(d, wts, (H, W)).view(n, t, H, W))
        if stage == len(PYRAMID_SCALES) - 1:
            final = _to_full(disp, iterates[-1][1], (H, W)).view(n, t, H, W)
    return DisparityPrediction(final=final.clamp(min=0), iterates=full_iterates,
                               stage_iterates=stage_iterates)


def _to_full(disp, weights, size):
    if weights is not None:
        return convex_upsample(disp, weights, UPSAMPLE_FACTOR)
    return upsample_disparity_to(disp, size)


def infer_windows(model: StereoVideoModel, left, right, flows: FlowSet, iterations: int,
                  window: int) -> torch.Tensor:
    """Baseline: infer non-overlapping ``window``-frame chunks and stitch them."""
    t = left.shape[1]
    outs = []
    for start in range(0, t, window):
        stop = min(start + window, t)
        # a lone trailing frame borrows its predecessor as a neighbour
        lo = start if stop - start >= 2 or model.config.correlation_mode == "per-frame" else stop - 2
        pred = infer(model, left[:, lo:stop], right[:, lo:stop],
                     flows.subsequence(lo, stop), iterations).final
        outs.append(pred[:, start - lo:])
    return torch.cat(outs, dim=1)


def bundle_to_tensors(bundles, dtype=torch.float32):
    """Stack synthetic bundles into ``(left, right, flows, disparity)`` tensors."""
    to = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    left = torch.stack([to(b.left_images).permute(0, 3, 1, 2) for b in bundles])
    right = torch.stack([to(b.right_images).permute(0, 3, 1, 2) for b in bundles])
    fwd = torch.stack([to(b.flow_fwd).permute(0, 3, 1, 2) for b in bundles])
    bwd = torch.stack([to(b.flow_bwd).permute(0, 3, 1, 2) for b in bundles])
    disp = torch.stack([to(b.disparity) for b in bundles])
    return left, right, FlowSet(fwd, bwd), disp


def infer_sequence(model: StereoVideoModel, sequence, config: PipelineConfig | None = None,
                   iterations: int | None = None, flows: FlowSet | None = None) -> np.ndarray:
    """Predict ``(T, H, W)`` disparities for one synthetic bundle (or compatible object).

    ``flows`` overrides the bundle's ground-truth flow; without it the
    sequence must carry ``flow_fwd``/``flow_bwd``.
    """
    config = config or PipelineConfig(model=model.config)
    iterations = iterations or config.iterations_eval
    to = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)
    left = to(sequence.left_images).permute(0, 3, 1, 2)[None]
    right = to(sequence.right_images).permute(0, 3, 1, 2)[None]
    if flows is None:
        flows = FlowSet(to(sequence.flow_fwd).permute(0, 3, 1, 2)[None],
                        to(sequence.flow_bwd).permute(0, 3, 1, 2)[None])
    model.eval()
    with torch.no_grad():
        pred = infer(model, left, right, flows, iterations)
    return pred.final[0].cpu().numpy()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
