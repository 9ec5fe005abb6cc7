"""Motion-propagation recurrent update unit.

Layout conventions: per-frame maps are ``(N*T, C, h, w)`` with frames of one
clip contiguous; the gated updater works on ``(N, C, T, h, w)`` so that its 3-D
kernels can mix neighbouring frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .correlation import cost_channels, tfcl
from .geometry import bilinear_warp

UPSAMPLE_FACTOR = 4


def frames_to_volume(x: torch.Tensor, frames: int) -> torch.Tensor:
    nt, c, h, w = x.shape
    return x.view(nt // frames, frames, c, h, w).transpose(1, 2)


def volume_to_frames(x: torch.Tensor) -> torch.Tensor:
    n, c, t, h, w = x.shape
    return x.transpose(1, 2).reshape(n * t, c, h, w)


def gather_frames(x: torch.Tensor, frames: int, index: torch.Tensor) -> torch.Tensor:
    """Reorder the frame axis of a ``(N*T, ...)`` tensor by ``index``."""
    v = x.view(x.shape[0] // frames, frames, *x.shape[1:])
    return v[:, index].flatten(0, 1)


def neighbor_index(frames: int, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Previous / next frame index with clip ends replicated onto themselves."""
    idx = torch.arange(frames, device=device)
    return (idx - 1).clamp(min=0), (idx + 1).clamp(max=frames - 1)


class TemporalConv(nn.Module):
    """3-D convolution over ``(N, C, T, h, w)`` with a ``(kt, kh, kw)`` kernel.

    Computed as a 2-D convolution over the ``kt`` temporally neighbouring
    frames stacked along channels (zero padding in time), which is equivalent
    to ``nn.Conv3d`` with ``padding=(kt//2, kh//2, kw//2)`` but runs on the
    optimized 2-D kernels.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int, int]):
        super().__init__()
        kt, kh, kw = kernel
        if kt % 2 == 0:
            raise ValueError("temporal kernel size must be odd")
        self.kernel = kernel
        self.conv = nn.Conv2d(kt * in_channels, out_channels, (kh, kw), padding=(kh // 2, kw // 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, t, h, w = x.shape
        kt = self.kernel[0]
        frames = x.transpose(1, 2)                      # (N, T, C, h, w)
        if kt > 1:
            r = kt // 2
            padded = F.pad(frames, (0, 0, 0, 0, 0, 0, r, r))
            frames = torch.cat([padded[:, i:i + t] for i in range(kt)], dim=2)
        out = self.conv(frames.reshape(n * t, -1, h, w))
        return out.view(n, t, -1, h, w).transpose(1, 2)


class GatedUpdate3D(nn.Module):
    """Convolutional GRU whose gates are 3-D convolutions over (time, height, width)."""

    def __init__(self, hidden_dim: int, input_dim: int, kernel: tuple[int, int, int]):
        super().__init__()
        cin = hidden_dim + input_dim
        self.kernel = kernel
        self.convzr = TemporalConv(cin, 2 * hidden_dim, kernel)
        self.convq = TemporalConv(cin, hidden_dim, kernel)

    def forward(self, h, x, context):
        zr = torch.sigmoid(self.convzr(torch.cat([h, x], dim=1)) + context.repeat(1, 2, 1, 1, 1))
        z, r = zr.chunk(2, dim=1)
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)) + context)
        return (1 - z) * h + z * q


def _super_kernel(name: str):
    return {"1x1x15": (1, 1, 15), "1x3x3": (1, 3, 3), "none": None}[name]


class UpdateBlock(nn.Module):
    """One parameter bundle of the update module.

    ``upsample_head`` adds the convex-upsampling weight head used by the
    finest (1/4) stage.
    """

    def __init__(self, config: ModelConfig, upsample_head: bool = True):
        super().__init__()
        c = config
        self.config = c
        n_cost = cost_channels(c.correlation_mode)
        self.cost_channels = n_cost
        self.corr_encoder = nn.Sequential(
            nn.Conv2d(n_cost, c.corr_dim, 1), nn.ReLU(),
            nn.Conv2d(c.corr_dim, c.corr_dim, 3, padding=1), nn.ReLU())
        self.disp_encoder = nn.Sequential(
            nn.Conv2d(1, c.disp_dim, 7, padding=3), nn.ReLU(),
            nn.Conv2d(c.disp_dim, c.disp_dim, 3, padding=1), nn.ReLU())
        self.mop_encoder = nn.Sequential(
            nn.Conv2d(3 * c.motion_dim, c.motion_dim, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c.motion_dim, c.motion_dim, 3, padding=1))
        trunk_in = c.corr_dim + c.disp_dim + c.motion_dim
        self.motion_trunk = nn.Sequential(
            nn.Conv2d(trunk_in, c.hidden_dim, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c.hidden_dim, c.hidden_dim, 3, padding=1), nn.ReLU())
        # motion feature, context and next motion state in one conv
        self.heads = nn.Conv2d(c.hidden_dim, 2 * c.hidden_dim + c.motion_dim, 3, padding=1)
        self._head_split = (c.hidden_dim, c.hidden_dim, c.motion_dim)

        time_k = 3 if c.updater_kernel == "3d" else 1
        self.gru = GatedUpdate3D(c.hidden_dim, c.hidden_dim, (time_k, 1, 5))
        sk = _super_kernel(c.super_kernel)
        self.super_gru = GatedUpdate3D(c.hidden_dim, c.hidden_dim, sk) if sk else None
        self.disp_head = nn.Sequential(
            nn.Conv2d(c.hidden_dim, c.hidden_dim, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c.hidden_dim, 1, 3, padding=1))
        self.mask_head = None
        if upsample_head:
            self.mask_head = nn.Sequential(
                nn.Conv2d(c.hidden_dim, c.hidden_dim, 3, padding=1), nn.ReLU(),
                nn.Conv2d(c.hidden_dim, 9 * UPSAMPLE_FACTOR ** 2, 1))

    def encode_correlation(self, cost: torch.Tensor) -> torch.Tensor:
        if cost.shape[1] != self.cost_channels:
            raise ValueError(
                f"cost volume has {cost.shape[1]} channels, encoder expects {self.cost_channels}")
        return self.corr_encoder(cost)

    def encode_disparity(self, disp: torch.Tensor) -> torch.Tensor:
        if disp.shape[1] != 1:
            raise ValueError(f"disparity must have 1 channel, got {disp.shape[1]}")
        return self.disp_encoder(disp)

    def motion_propagate(self, m_prev, m_center, m_next, to_prev, to_next) -> torch.Tensor:
        """Align neighbour motion states onto the centre frame and fuse them."""
        if not (m_prev.shape == m_center.shape == m_next.shape):
            raise ValueError("motion states must share a shape")
        aligned = bilinear_warp(torch.cat([m_prev, m_next]), torch.cat([to_prev, to_next]))
        aligned_prev, aligned_next = aligned.chunk(2)
        return self.mop_encoder(torch.cat([aligned_prev, m_center, aligned_next], dim=1))

    def motion_encode(self, f_corr, f_disp, f_mop):
        """Return ``(motion_feature, context, new_motion_state)``."""
        if not (f_corr.shape[-2:] == f_disp.shape[-2:] == f_mop.shape[-2:]):
            raise ValueError("encoder features must share spatial size")
        trunk = self.motion_trunk(torch.cat([f_corr, f_disp, f_mop], dim=1))
        f_mot, context, state = self.heads(trunk).split(self._head_split, dim=1)
        return F.relu(f_mot), context, torch.tanh(state)

    def super_kernel_update(self, h, f_mot, context, frames: int, want_weights: bool = False):
        """Gated update over the frame axis.

        ``h`` is ``(N, C, T, h, w)``; ``f_mot`` and ``context`` are per-frame maps.
        Returns ``(h_new, delta_disp, upsample_weights_or_None)``.
        """
        x = frames_to_volume(f_mot, frames)
        ctx = frames_to_volume(context, frames)
        h = self.gru(h, x, ctx)
        if self.super_gru is not None:
            h = self.super_gru(h, x, ctx)
        hf = volume_to_frames(h)
        delta = self.disp_head(hf)
        weights = None
        if want_weights:
            if self.mask_head is None:
                raise ValueError("this update block has no upsampling head")
            weights = 0.25 * self.mask_head(hf)
        return h, delta, weights


@dataclass
class StageInputs:
    """Per-stage constants: features, aligned right (and left) triples, flows."""
    left: torch.Tensor                  # (N*T, C, h, w)
    right_triple: tuple                 # three (N*T, C, h, w)
    left_triple: tuple | None
    to_prev: torch.Tensor               # (N*T, 2, h, w)
    to_next: torch.Tensor
    prev_index: torch.Tensor
    next_index: torch.Tensor
    frames: int


@dataclass
class UpdateState:
    disp: torch.Tensor                  # (N*T, 1, h, w)
    hidden: torch.Tensor                # (N, C, T, h, w)
    motion: torch.Tensor                # (N*T, C0, h, w)
    iteration: int = 0
    upsample_weights: torch.Tensor | None = None


def mru_iteration(block: UpdateBlock, state: UpdateState, inputs: StageInputs,
                  want_weights: bool = False) -> UpdateState:
    """One refinement step for every frame of the clip."""
    cost = tfcl(inputs.left, inputs.right_triple, state.disp, state.iteration,
                left_triple=inputs.left_triple)
    f_corr = block.encode_correlation(cost)
    f_disp = block.encode_disparity(state.disp)
    m_prev = gather_frames(state.motion, inputs.frames, inputs.prev_index)
    m_next = gather_frames(state.motion, inputs.frames, inputs.next_index)
    f_mop = block.motion_propagate(m_prev, state.motion, m_next, inputs.to_prev, inputs.to_next)
    f_mot, context, motion = block.motion_encode(f_corr, f_disp, f_mop)
    hidden, delta, weights = block.super_kernel_update(
        state.hidden, f_mot, context, inputs.frames, want_weights=want_weights)
    return UpdateState(disp=state.disp + delta, hidden=hidden, motion=motion,
                       iteration=state.iteration + 1, upsample_weights=weights)
