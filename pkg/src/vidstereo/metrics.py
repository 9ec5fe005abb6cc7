"""Sequence training loss and disparity / temporal-consistency metrics.

Numpy inputs are ``(T, H, W)`` (or ``(H, W)`` for single-frame metrics);
:func:`sequence_loss` works on torch tensors so it can be differentiated.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

DEFAULT_GAMMA = 0.9


def sequence_loss(predictions, gt: torch.Tensor, gamma: float = DEFAULT_GAMMA,
                  valid: torch.Tensor | None = None) -> torch.Tensor:
    """Exponentially weighted l1 loss over an ordered list of iterates.

    ``predictions`` is a list of ``N`` tensors shaped like ``gt`` ``(..., T, H, W)``,
    oldest first; iterate ``n`` (1-based) gets weight ``gamma ** (N - n)``.
    The per-frame mean absolute error over valid pixels is summed over frames
    (and averaged over any leading batch axis).
    """
    if len(predictions) == 0:
        raise ValueError("sequence_loss needs at least one prediction")
    if valid is None:
        valid = torch.isfinite(gt)
    valid = valid.to(gt.dtype)
    gt = torch.where(valid > 0, gt, torch.zeros_like(gt))
    count = valid.sum(dim=(-2, -1)).clamp(min=1)
    n = len(predictions)
    total = gt.new_zeros(())
    for i, pred in enumerate(predictions, start=1):
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
        err = ((pred - gt).abs() * valid).sum(dim=(-2, -1)) / count
        per_clip = err.sum(dim=-1)
        total = total + gamma ** (n - i) * per_clip.mean()
    return total


def _mask(d_gt: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    m = np.isfinite(d_gt)
    if mask is not None:
        m = m & np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("metric mask selects no pixels")
    return m


def epe(d: np.ndarray, d_gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute disparity error over the mask."""
    d, d_gt = np.asarray(d, dtype=np.float64), np.asarray(d_gt, dtype=np.float64)
    if d.shape != d_gt.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {d_gt.shape}")
    m = _mask(d_gt, mask)
    return float(np.abs(d - d_gt)[m].mean())


def delta_npx(d: np.ndarray, d_gt: np.ndarray, n: float,
              mask: np.ndarray | None = None) -> float:
    """Fraction of masked pixels whose absolute error exceeds ``n`` px."""
    d, d_gt = np.asarray(d, dtype=np.float64), np.asarray(d_gt, dtype=np.float64)
    if d.shape != d_gt.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {d_gt.shape}")
    m = _mask(d_gt, mask)
    return float((np.abs(d - d_gt)[m] > n).mean())


def _temporal_mask(d_gt: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Pixels whose ground truth is finite in every frame (and in ``mask``)."""
    m = np.all(np.isfinite(d_gt), axis=0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        m &= mask if mask.ndim == 2 else np.all(mask, axis=0)
    return m


def tepe_map(d_seq: np.ndarray, gt_seq: np.ndarray) -> np.ndarray:
    """Per-pixel temporal end-point error of ``(T, H, W)`` sequences.

    ``sqrt(sum_t ((d[t] - d[t+1]) - (gt[t] - gt[t+1]))**2)`` over the T-1
    adjacent pairs, not normalized by T.
    """
    d = np.asarray(d_seq, dtype=np.float64)
    g = np.asarray(gt_seq, dtype=np.float64)
    if d.shape != g.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {g.shape}")
    if d.ndim != 3 or d.shape[0] < 2:
        raise ValueError("temporal metrics need a (T, H, W) sequence with T >= 2")
    diff = (d[:-1] - d[1:]) - (g[:-1] - g[1:])
    return np.sqrt(np.sum(diff ** 2, axis=0))


def tepe(d_seq, gt_seq, mask: np.ndarray | None = None) -> float:
    m = _temporal_mask(np.asarray(gt_seq, dtype=np.float64), mask)
    if not m.any():
        raise ValueError("metric mask selects no pixels")
    return float(tepe_map(d_seq, gt_seq)[m].mean())


def delta_t_npx(d_seq, gt_seq, n: float, mask: np.ndarray | None = None) -> float:
    m = _temporal_mask(np.asarray(gt_seq, dtype=np.float64), mask)
    if not m.any():
        raise ValueError("metric mask selects no pixels")
    return float((tepe_map(d_seq, gt_seq)[m] > n).mean())


@dataclass
class MetricReport:
    epe: float
    delta_1px: float
    delta_3px: float
    tepe: float
    delta_t_1px: float
    delta_t_3px: float
    valid_pixel_count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def fieldnames(cls) -> list[str]:
        return list(cls.__dataclass_fields__)

    def csv_row(self, method: str, sequence: str) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([method, sequence] + [getattr(self, k) for k in self.fieldnames()])
        return buf.getvalue()

    @classmethod
    def mean(cls, reports) -> "MetricReport":
        reports = list(reports)
        if not reports:
            raise ValueError("no reports to aggregate")
        w = np.array([r.valid_pixel_count for r in reports], dtype=np.float64)
        vals = {k: float(np.average([getattr(r, k) for r in reports], weights=w))
                for k in cls.fieldnames() if k != "valid_pixel_count"}
        return cls(valid_pixel_count=int(w.sum()), **vals)


def evaluate_sequence(d_seq: np.ndarray, gt_seq: np.ndarray,
                      mask: np.ndarray | None = None) -> MetricReport:
    """All metrics for one ``(T, H, W)`` clip; occluded pixels count as valid."""
    d = np.asarray(d_seq, dtype=np.float64)
    g = np.asarray(gt_seq, dtype=np.float64)
    m = _mask(g, mask)
    return MetricReport(
        epe=epe(d, g, m),
        delta_1px=delta_npx(d, g, 1, m),
        delta_3px=delta_npx(d, g, 3, m),
        tepe=tepe(d, g, m),
        delta_t_1px=delta_t_npx(d, g, 1, m),
        delta_t_3px=delta_t_npx(d, g, 3, m),
        valid_pixel_count=int(m.sum()),
    )


def write_reports_csv(path, rows) -> None:
    """``rows``: iterable of ``(method, sequence, MetricReport)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "sequence"] + MetricReport.fieldnames())
        for method, seq, rep in rows:
            writer.writerow([method, seq] + [getattr(rep, k) for k in MetricReport.fieldnames()])
