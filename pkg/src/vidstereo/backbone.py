"""Shared-weight feature pyramid and bidirectional flow provisioning."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io_formats
from .geometry import resample_flow

PYRAMID_SCALES = (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4))


class InstanceNorm(nn.InstanceNorm2d):
    """Instance norm that also accepts 1x1 maps (where it is identically zero)."""

    def forward(self, x):
        if x.shape[-1] * x.shape[-2] == 1:
            return x - x.mean(dim=(-2, -1), keepdim=True)
        return super().forward(x)


class ResidualBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1)
        self.norm1 = InstanceNorm(planes)
        self.norm2 = InstanceNorm(planes)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride), InstanceNorm(planes))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        if self.shortcut is not None:
            x = self.shortcut(x)
        return F.relu(x + y)


class FeatureEncoder(nn.Module):
    """Residual encoder emitting ``feature_dim``-channel maps at 1/16, 1/8 and 1/4.

    One instance is applied to every (view, frame) image, which is what makes
    the left and right extractors share weights.
    """

    def __init__(self, feature_dim: int = 96, widths: tuple[int, int, int] = (32, 48, 64)):
        super().__init__()
        w1, w2, w3 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w1, 7, stride=2, padding=3), InstanceNorm(w1), nn.ReLU())
        self.layer2 = nn.Sequential(ResidualBlock(w1, w1), ResidualBlock(w1, w2, stride=2))
        self.layer4 = ResidualBlock(w2, w2)
        self.layer8 = nn.Sequential(ResidualBlock(w2, w3, stride=2), ResidualBlock(w3, w3))
        self.layer16 = ResidualBlock(w3, w3, stride=2)
        self.out4 = nn.Conv2d(w2, feature_dim, 1)
        self.out8 = nn.Conv2d(w3, feature_dim, 1)
        self.out16 = nn.Conv2d(w3, feature_dim, 1)

    def forward(self, images: torch.Tensor) -> dict[Fraction, torch.Tensor]:
        h, w = images.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image height and width must be divisible by 16, got {h}x{w}")
        x = 2.0 * images - 1.0
        x = self.layer2(self.stem(x))
        x4 = self.layer4(x)
        x8 = self.layer8(x4)
        x16 = self.layer16(x8)
        return {
            PYRAMID_SCALES[0]: self.out16(x16),
            PYRAMID_SCALES[1]: self.out8(x8),
            PYRAMID_SCALES[2]: self.out4(x4),
        }


@dataclass
class FeaturePyramid:
    """Per-scale ``(N, T, C, sH, sW)`` feature maps for both views."""
    left: dict[Fraction, torch.Tensor]
    right: dict[Fraction, torch.Tensor]


def extract_features(encoder: FeatureEncoder, left: torch.Tensor,
                     right: torch.Tensor) -> FeaturePyramid:
    """Run the shared encoder over ``(N, T, 3, H, W)`` left and right clips."""
    n, t = left.shape[:2]
    both = torch.cat([left, right], dim=0).flatten(0, 1)
    feats = encoder(both)
    out_l, out_r = {}, {}
    for s, f in feats.items():
        f = f.view(2 * n, t, *f.shape[1:])
        out_l[s], out_r[s] = f[:n], f[n:]
    return FeaturePyramid(out_l, out_r)


class FlowProviderError(RuntimeError):
    pass


@dataclass
class FlowSet:
    """Bidirectional flows of a clip plus per-scale centre-frame alignments.

    ``flow_fwd[:, t]`` maps frame t to t+1 on frame t's grid, ``flow_bwd[:, t]``
    maps frame t+1 to t on frame t+1's grid; both ``(N, T-1, 2, H, W)`` at full
    resolution. For every centre frame ``t`` the warps that bring neighbours
    onto its grid are ``to_prev[t] = flow_bwd[t-1]`` and ``to_next[t] =
    flow_fwd[t]``, with zero flow at the clip ends (the missing neighbour is
    replaced by the centre itself).
    """
    flow_fwd: torch.Tensor
    flow_bwd: torch.Tensor
    scaled: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flow_fwd.shape != self.flow_bwd.shape:
            raise ValueError("forward and backward flows must have equal shapes")
        if not self.scaled:
            for s in PYRAMID_SCALES:
                self.scaled[s] = self._alignment_at(s)

    @property
    def frames(self) -> int:
        return self.flow_fwd.shape[1] + 1

    def at_scale(self, scale) -> tuple[torch.Tensor, torch.Tensor]:
        """Flow to previous / next frame, each ``(N, T, 2, sH, sW)``."""
        s = Fraction(scale).limit_denominator(64)
        if s not in self.scaled:
            self.scaled[s] = self._alignment_at(s)
        return self.scaled[s]

    def _size_at(self, scale) -> tuple[int, int]:
        h, w = self.flow_fwd.shape[-2:]
        return int(h * scale), int(w * scale)

    def _resample(self, flows: torch.Tensor, scale) -> torch.Tensor:
        n, k = flows.shape[:2]
        if k == 0:
            return flows.new_zeros(n, 0, 2, *self._size_at(scale))
        out = resample_flow(flows.flatten(0, 1), 1, scale)
        return out.view(n, k, *out.shape[1:])

    def _alignment_at(self, scale):
        fwd = self._resample(self.flow_fwd, scale)
        bwd = self._resample(self.flow_bwd, scale)
        zero = fwd.new_zeros(fwd.shape[0], 1, *fwd.shape[2:])
        return torch.cat([zero, bwd], dim=1), torch.cat([fwd, zero], dim=1)

    def zeroed(self) -> "FlowSet":
        return FlowSet(torch.zeros_like(self.flow_fwd), torch.zeros_like(self.flow_bwd))

    def subsequence(self, start: int, stop: int) -> "FlowSet":
        return FlowSet(self.flow_fwd[:, start:stop - 1], self.flow_bwd[:, start:stop - 1])


def provide_flow(sequence, source: str = "ground_truth", flow_dir: str | None = None,
                 dtype=torch.float32) -> FlowSet:
    """Build a :class:`FlowSet` for one clip.

    ``source="ground_truth"`` reads ``flow_fwd``/``flow_bwd`` from a synthetic
    bundle; ``source="external_file"`` loads ``flow_fwd/*.flo`` and
    ``flow_bwd/*.flo`` (sorted by name) from ``flow_dir``.
    """
    if source == "ground_truth":
        fwd = getattr(sequence, "flow_fwd", None)
        bwd = getattr(sequence, "flow_bwd", None)
        if fwd is None or bwd is None:
            raise FlowProviderError("sequence carries no ground-truth flow")
    elif source == "external_file":
        if flow_dir is None:
            raise FlowProviderError("external_file flow source needs flow_dir")
        fwd = _load_flo_dir(os.path.join(flow_dir, "flow_fwd"))
        bwd = _load_flo_dir(os.path.join(flow_dir, "flow_bwd"))
    else:
        raise FlowProviderError(f"unknown flow source {source!r}")
    fwd = np.asarray(fwd)
    bwd = np.asarray(bwd)
    expected = sequence.left_images.shape[0] - 1 if hasattr(sequence, "left_images") else None
    if expected is not None and (fwd.shape[0] != expected or bwd.shape[0] != expected):
        raise FlowProviderError(
            f"clip has {expected + 1} frames: expected {expected} flows per direction, "
            f"got {fwd.shape[0]} forward and {bwd.shape[0]} backward")
    to_t = lambda a: torch.as_tensor(a, dtype=dtype).permute(0, 3, 1, 2)[None]
    return FlowSet(to_t(fwd), to_t(bwd))


def _load_flo_dir(directory: str) -> np.ndarray:
    paths = sorted(glob.glob(os.path.join(directory, "*.flo")))
    if not paths:
        raise FlowProviderError(f"no .flo files found in {directory}")
    return np.stack([io_formats.read_flo(p) for p in paths])


def load_flo_files(paths) -> np.ndarray:
    """Stack ``.flo`` files in the given order into ``(K, H, W, 2)``."""
    if not paths:
        raise FlowProviderError("no flow files given")
    return np.stack([io_formats.read_flo(p) for p in paths])
