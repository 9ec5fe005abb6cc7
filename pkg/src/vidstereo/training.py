"""Training loop, checkpoints and evaluation helpers."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io_formats
from .config import PipelineConfig, TrainConfig, from_dict, to_dict
from .metrics import MetricReport, evaluate_sequence, sequence_loss
from .pipeline import StereoVideoModel, bundle_to_tensors, infer, infer_windows
from .synthdata import GroundTruthBundle, generate_sequence

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, snapshot: str | None):
        super().__init__(f"loss became non-finite at step {step}"
                         + (f"; diagnostic snapshot at {snapshot}" if snapshot else ""))
        self.step = step
        self.snapshot = snapshot


def materialize(dataset) -> list[GroundTruthBundle]:
    """Accept bundles or ``(SceneConfig, seed)`` pairs."""
    out = []
    for item in dataset:
        if isinstance(item, GroundTruthBundle):
            out.append(item)
        else:
            cfg, seed = item
            out.append(generate_sequence(cfg, seed))
    if not out:
        raise ValueError("dataset is empty")
    return out


def sample_batch(bundles, step: int, seed: int, frames: int, batch_size: int,
                 crop: tuple[int, int] | None):
    """Deterministic batch for ``step``: clip index, temporal window and crop."""
    rng = np.random.default_rng([seed, step])
    picks = []
    for _ in range(batch_size):
        b = bundles[int(rng.integers(len(bundles)))]
        if b.frames < frames:
            raise ValueError(f"sequence has {b.frames} frames, training needs {frames}")
        start = int(rng.integers(0, b.frames - frames + 1))
        b = b.subsequence(start, start + frames)
        if crop is not None:
            H, W = b.left_images.shape[1:3]
            ch, cw = crop
            if ch > H or cw > W:
                raise ValueError(f"crop {crop} exceeds image size {(H, W)}")
            b = b.crop(int(rng.integers(0, H - ch + 1)), int(rng.integers(0, W - cw + 1)), ch, cw)
        picks.append(b)
    return bundle_to_tensors(picks)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def model_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def parameter_hash(model: torch.nn.Module) -> str:
    return hashlib.sha256(io_formats.dumps_container(model_arrays(model))).hexdigest()


def save_checkpoint(path, model: StereoVideoModel, pipeline: PipelineConfig,
                    train_cfg: TrainConfig | None = None, optimizer=None, scheduler=None,
                    step: int = 0, seed: int | None = None) -> str:
    """Write model (and optionally optimizer) state; returns the content hash."""
    arrays = model_arrays(model)
    meta = {"kind": "vidstereo-checkpoint", "config": to_dict(pipeline, train_cfg),
            "step": step, "seed": seed}
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                arrays[f"optim/{idx}/{key}"] = torch.as_tensor(value).cpu().numpy()
        meta["optim_param_groups"] = state["param_groups"]
    if scheduler is not None:
        meta["scheduler"] = {k: v for k, v in scheduler.state_dict().items()
                             if isinstance(v, (int, float, str, bool, list, type(None)))}
    buf = io_formats.write_container(path, arrays, meta)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path, dtype=torch.float32):
    """Return ``(model, pipeline_config, train_config, arrays, meta)``."""
    arrays, meta = io_formats.read_container(path)
    pipeline, train_cfg = from_dict(meta["config"])
    model = StereoVideoModel(pipeline.model)
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items()
             if k.startswith("param/")}
    model.load_state_dict(state)
    return model.to(dtype), pipeline, train_cfg, arrays, meta


def _restore_optimizer(optimizer, arrays, meta):
    state = {}
    for key, value in arrays.items():
        if not key.startswith("optim/"):
            continue
        _, idx, name = key.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
    optimizer.load_state_dict({"state": state, "param_groups": meta["optim_param_groups"]})


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: StereoVideoModel
    manifest: dict
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    checkpoint: str | None = None


def _one_cycle(optimizer, train_cfg: TrainConfig):
    return torch.optim.lr_scheduler.OneCycleLR(
        optimizer, max_lr=train_cfg.lr, total_steps=train_cfg.steps + 1,
        pct_start=train_cfg.pct_start, anneal_strategy="linear", cycle_momentum=False)


def train(dataset, pipeline: PipelineConfig, train_cfg: TrainConfig, seed: int,
          out_dir: str | os.PathLike | None = None, resume: str | os.PathLike | None = None,
          eval_set=None, target_epe: float | None = None, stop_after: int | None = None,
          ) -> TrainResult:
    """Train a model from scratch (or from ``resume``) with a fixed seed.

    Every step draws its batch from a generator seeded by ``(seed, step)`` so a
    resumed run sees exactly the batches an uninterrupted one would. With
    ``eval_set`` and ``train_cfg.eval_every`` the mean EPE on it is recorded;
    if ``target_epe`` is given training stops once that EPE is reached.
    ``stop_after`` ends the run early (before the schedule finishes).
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    bundles = materialize(dataset)
    eval_bundles = materialize(eval_set) if eval_set is not None else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(seed)
    model = StereoVideoModel(pipeline.model)
    optimizer = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr,
                                  weight_decay=train_cfg.weight_decay)
    scheduler = _one_cycle(optimizer, train_cfg)
    start_step = 0
    losses, metric_curve = [], []
    if resume is not None:
        loaded, _, _, arrays, meta = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        _restore_optimizer(optimizer, arrays, meta)
        if "scheduler" in meta:
            scheduler.load_state_dict({**scheduler.state_dict(), **meta["scheduler"]})
        start_step = int(meta["step"])
        losses = list(meta.get("losses", []))

    t0 = time.time()
    model.train()
    step = start_step
    last = train_cfg.steps if stop_after is None else min(train_cfg.steps, start_step + stop_after)
    while step < last:
        left, right, flows, gt = sample_batch(bundles, step, seed, pipeline.frames_train,
                                              train_cfg.batch_size, train_cfg.crop)
        pred = infer(model, left, right, flows, pipeline.iterations_train, return_iterates=True)
        loss = sequence_loss(pred.iterates, gt, gamma=train_cfg.gamma)
        if not torch.isfinite(loss):
            snap = None
            if out is not None:
                snap = str(out / f"diverged_step{step}.ckpt")
                save_checkpoint(snap, model, pipeline, train_cfg, step=step, seed=seed)
            raise TrainingDiverged(step, snap)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if train_cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        optimizer.step()
        scheduler.step()
        step += 1
        losses.append(loss.item())
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, losses[-1], scheduler.get_last_lr()[0])
        if eval_bundles is not None and train_cfg.eval_every and step % train_cfg.eval_every == 0:
            rep = evaluate_model(model, eval_bundles, pipeline.iterations_eval)
            metric_curve.append({"step": step, "epe": rep.epe, "tepe": rep.tepe})
            model.train()
            log.info("step %d eval epe %.4f tepe %.4f", step, rep.epe, rep.tepe)
            if target_epe is not None and rep.epe < target_epe:
                break
        if out is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(out / f"step{step:06d}.ckpt", model, pipeline, train_cfg,
                            optimizer, scheduler, step, seed)

    model.eval()
    manifest = {
        "config": to_dict(pipeline, train_cfg),
        "seed": seed,
        "steps_run": step - start_step,
        "final_step": step,
        "loss_curve": losses,
        "metric_curve": metric_curve,
        "parameter_hash": parameter_hash(model),
        "wall_clock_s": time.time() - t0,
    }
    ckpt = None
    if out is not None:
        ckpt = str(out / "final.ckpt")
        save_checkpoint(ckpt, model, pipeline, train_cfg, optimizer, scheduler, step, seed)
    return TrainResult(model=model, manifest=manifest, losses=losses, metrics=metric_curve,
                       checkpoint=ckpt)


def predict_bundle(model: StereoVideoModel, bundle: GroundTruthBundle, iterations: int,
                   window: int | None = None, zero_flow: bool = False) -> np.ndarray:
    """``(T, H, W)`` prediction for one bundle (optionally window-stitched)."""
    left, right, flows, _ = bundle_to_tensors([bundle])
    if zero_flow:
        flows = flows.zeroed()
    model.eval()
    with torch.no_grad():
        if window is None:
            pred = infer(model, left, right, flows, iterations).final
        else:
            pred = infer_windows(model, left, right, flows, iterations, window)
    return pred[0].numpy()


def evaluate_model(model: StereoVideoModel, bundles, iterations: int,
                   window: int | None = None) -> MetricReport:
    reports = [evaluate_sequence(predict_bundle(model, b, iterations, window), b.disparity)
               for b in bundles]
    return MetricReport.mean(reports)
