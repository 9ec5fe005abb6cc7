"""Triple-frame correlation: flow alignment, disparity warping, local correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import bilinear_warp, warp_by_disparity


@dataclass(frozen=True)
class SearchRange:
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.offsets:
            raise ValueError("search range must be nonempty")
        if (0, 0) not in self.offsets:
            raise ValueError("search range must contain the (0, 0) offset")

    def __len__(self) -> int:
        return len(self.offsets)

    @property
    def radius(self) -> tuple[int, int]:
        return (max(abs(dx) for dx, _ in self.offsets),
                max(abs(dy) for _, dy in self.offsets))


HORIZONTAL = SearchRange(tuple((dx, 0) for dx in range(-4, 5)))
GRID_3X3 = SearchRange(tuple((dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)))

CORRELATION_MODES = ("single-multi", "multi-multi", "per-frame")


def search_range_for(iteration: int) -> SearchRange:
    """Even iterations search along the scanline, odd ones a 3x3 window."""
    return HORIZONTAL if iteration % 2 == 0 else GRID_3X3


def cost_channels(mode: str, range_size: int = 9) -> int:
    if mode not in CORRELATION_MODES:
        raise ValueError(f"unknown correlation mode {mode!r}; expected one of {CORRELATION_MODES}")
    blocks = 9 if mode == "multi-multi" else 3
    return blocks * range_size


def align_neighbors(prev: torch.Tensor, center: torch.Tensor, nxt: torch.Tensor,
                    flow_to_prev: torch.Tensor, flow_to_next: torch.Tensor):
    """Warp both temporal neighbours onto the centre frame's pixel grid.

    ``flow_to_prev`` / ``flow_to_next`` live on the centre grid and point to the
    matching location in the previous / next frame. At a sequence boundary pass
    the centre itself with a zero flow.
    """
    return bilinear_warp(prev, flow_to_prev), center, bilinear_warp(nxt, flow_to_next)


def local_correlation(left: torch.Tensor, right: torch.Tensor,
                      search: SearchRange) -> torch.Tensor:
    """``score(p, r) = <left(p), right(p + r)> / sqrt(C)`` for every offset ``r``.

    Out-of-range ``p + r`` clamps to the image edge. Returns ``(N, |R|, H, W)``.
    """
    if left.shape != right.shape:
        raise ValueError(f"local_correlation: shape mismatch {tuple(left.shape)} vs {tuple(right.shape)}")
    _, c, h, w = left.shape
    rx, ry = search.radius
    padded = F.pad(right, (rx, rx, ry, ry), mode="replicate")
    scores = [(left * padded[:, :, ry + dy: ry + dy + h, rx + dx: rx + dx + w]).sum(dim=1)
              for dx, dy in search.offsets]
    return torch.stack(scores, dim=1) / math.sqrt(c)


def tfcl(left: torch.Tensor, right_triple, disp: torch.Tensor, iteration: int,
         left_triple=None) -> torch.Tensor:
    """Cost volume for one centre frame.

    Each of the three flow-aligned right maps ``(t-1, t, t+1)`` is warped to
    the left view by ``disp`` and correlated against ``left``; the blocks are
    concatenated in frame order. If ``left_triple`` (aligned left neighbours)
    is given every left map is correlated against every right map, left-major.
    """
    search = search_range_for(iteration)
    n = left.shape[0]
    rights = torch.cat(list(right_triple), dim=0)
    warped = warp_by_disparity(rights, disp.repeat(len(right_triple), 1, 1, 1))
    lefts = [left] if left_triple is None else list(left_triple)
    blocks = []
    for l in lefts:
        corr = local_correlation(l.repeat(len(right_triple), 1, 1, 1), warped, search)
        blocks.extend(corr.split(n, dim=0))
    return torch.cat(blocks, dim=1)
