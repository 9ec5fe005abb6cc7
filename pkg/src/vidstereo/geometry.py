"""Differentiable resampling primitives.

All tensors are channel-first: maps are ``(N, C, H, W)``, flows ``(N, 2, H, W)``
with channel 0 the x (column) displacement and channel 1 the y (row)
displacement, disparities ``(N, 1, H, W)``. Displacements are in pixels of the
resolution the tensor lives at. Sampling outside the image clamps to the edge.
"""
from __future__ import annotations

from fractions import Fraction

import torch
import torch.nn.functional as F

SCALES = (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1))


def _check_scale(scale) -> Fraction:
    s = Fraction(scale).limit_denominator(64)
    if s not in SCALES:
        raise ValueError(f"scale must be one of 1/16, 1/8, 1/4, 1; got {scale}")
    return s


def _check_spatial(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.dim() != 4 or b.dim() != 4:
        raise ValueError(f"{what}: expected 4-D tensors, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(
            f"{what}: batch/spatial mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def pixel_grid(height: int, width: int, like: torch.Tensor) -> torch.Tensor:
    """``(1, 2, H, W)`` tensor of (x, y) pixel coordinates."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=like.dtype, device=like.device),
        torch.arange(width, dtype=like.dtype, device=like.device),
        indexing="ij",
    )
    return torch.stack([xs, ys])[None]


def sample_at(field: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``field`` at absolute pixel ``coords`` (N, 2, H', W').

    Coordinates are clamped to the image, so integer coordinates reproduce
    pixel values exactly.
    """
    n, c, h, w = field.shape
    x = coords[:, 0].clamp(0, w - 1)
    y = coords[:, 1].clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    ax = (x - x0).unsqueeze(1)
    ay = (y - y0).unsqueeze(1)
    x0l, y0l = x0.long(), y0.long()
    x1l, y1l = (x0l + 1).clamp(max=w - 1), (y0l + 1).clamp(max=h - 1)
    flat = field.reshape(n, c, h * w)
    out_hw = coords.shape[-2:]

    def tap(yy, xx):
        idx = (yy * w + xx).view(n, 1, -1).expand(n, c, -1)
        return flat.gather(2, idx).view(n, c, *out_hw)

    top = (1 - ax) * tap(y0l, x0l) + ax * tap(y0l, x1l)
    bottom = (1 - ax) * tap(y1l, x0l) + ax * tap(y1l, x1l)
    return (1 - ay) * top + ay * bottom


def bilinear_warp(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """``out(p) = field(p + flow(p))`` with bilinear interpolation and edge clamp."""
    _check_spatial(field, flow, "bilinear_warp")
    if flow.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.shape[1]}")
    h, w = field.shape[-2:]
    return sample_at(field, pixel_grid(h, w, flow) + flow)


def warp_by_disparity(field: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """``out(x, y) = field(x - disp(x, y), y)``.

    Positive disparity means the right-view match of a left pixel lies to its
    left, so warping right-view features by the left disparity aligns them
    with the left view.
    """
    _check_spatial(field, disp, "warp_by_disparity")
    if disp.shape[1] != 1:
        raise ValueError(f"disparity must have 1 channel, got {disp.shape[1]}")
    flow = torch.cat([-disp, torch.zeros_like(disp)], dim=1)
    return bilinear_warp(field, flow)


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def resample_flow(flow: torch.Tensor, source_scale, target_scale) -> torch.Tensor:
    """Resize a flow field between pyramid scales, rescaling its vectors."""
    src = _check_scale(source_scale)
    dst = _check_scale(target_scale)
    if src == dst:
        return flow
    ratio = dst / src
    h, w = flow.shape[-2:]
    size = (int(h * ratio), int(w * ratio))
    if size[0] < 1 or size[1] < 1 or Fraction(size[0]) != h * ratio or Fraction(size[1]) != w * ratio:
        raise ValueError(f"flow of size {h}x{w} cannot be resampled by {ratio}")
    return resize_bilinear(flow, size) * float(ratio)


def upscale_disparity(disp: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bilinear ``factor``-times upsampling with values scaled to the new units."""
    h, w = disp.shape[-2:]
    return resize_bilinear(disp, (h * factor, w * factor)) * factor


def upsample_disparity_to(disp: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to ``size``; values scaled by the width ratio."""
    w = disp.shape[-1]
    return resize_bilinear(disp, size) * (size[1] / w)


def convex_upsample(disp: torch.Tensor, weights: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Upsample ``disp`` by ``factor`` as learned convex combinations.

    ``weights`` holds ``9 * factor**2`` unnormalized logits per coarse pixel;
    a softmax over the 9 taps makes every fine pixel a convex combination of
    the 3x3 coarse neighbourhood of its parent cell. Borders replicate. Values
    are multiplied by ``factor``.
    """
    n, c, h, w = disp.shape
    if weights.shape != (n, 9 * factor * factor, h, w):
        raise ValueError(
            f"convex_upsample: weights shape {tuple(weights.shape)} does not match "
            f"expected {(n, 9 * factor * factor, h, w)}"
        )
    mask = torch.softmax(weights.view(n, 1, 9, factor, factor, h, w), dim=2)
    padded = F.pad(factor * disp, (1, 1, 1, 1), mode="replicate")
    taps = F.unfold(padded, kernel_size=3).view(n, c, 9, 1, 1, h, w)
    up = torch.sum(mask * taps, dim=2)
    up = up.permute(0, 1, 4, 2, 5, 3)
    return up.reshape(n, c, factor * h, factor * w)
