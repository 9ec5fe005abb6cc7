"""Train a small model for a few hundred steps and watch it refine.

This is a toy budget (a few minutes on one CPU core); the point is to see the
loss fall and the iterates converge, not to reach good accuracy.
Run: ``python3 demos/04_train_and_infer.py [steps]``.
"""
# %%
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from vidstereo import ModelConfig, PipelineConfig, SceneConfig, TrainConfig, generate_sequence
from vidstereo.pipeline import bundle_to_tensors, infer
from vidstereo.training import train

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# %%
scene = SceneConfig(width=64, height=32, frames=5, max_motion=2)
data = [generate_sequence(scene, s) for s in range(8)]
held_out = generate_sequence(scene, 100)
pipe = PipelineConfig(iterations_train=4, iterations_eval=8, frames_train=5,
                      model=ModelConfig.desk(hidden_dim=16, feature_dim=16, corr_dim=16))
res = train(data, pipe, TrainConfig(steps=steps, batch_size=2, log_every=0), seed=0)
print(f"loss {np.mean(res.losses[:20]):.2f} -> {np.mean(res.losses[-20:]):.2f} over {steps} steps")

# %%
# Each stage refines its own resolution; the list of iterates shows the error
# falling within a stage and jumping down at each coarse-to-fine handoff.
left, right, flows, gt = bundle_to_tensors([held_out])
with torch.no_grad():
    pred = infer(res.model, left, right, flows, pipe.iterations_eval, return_iterates=True)
errs = [(it - gt).abs().mean().item() for it in pred.iterates]
print("EPE per iterate:", " ".join(f"{e:.2f}" for e in errs))

# %%
fig, axes = plt.subplots(1, 3, figsize=(12, 3))
axes[0].semilogy(res.losses)
axes[0].set_title("training loss")
axes[1].plot(errs, marker="o")
axes[1].set_title("EPE per iterate (held-out clip)")
axes[2].imshow(np.concatenate([pred.final[0, 2].numpy(), gt[0, 2].numpy()], 0), cmap="magma")
axes[2].set_title("prediction (top) / ground truth")
axes[2].axis("off")
fig.tight_layout()
fig.savefig(OUT / "04_training.png", dpi=100)
print("wrote", OUT / "04_training.png")
