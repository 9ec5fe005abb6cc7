"""What the triple-frame correlation volume looks like.

One left feature map is correlated against three right maps: the previous and
next frames aligned to the centre by optical flow, and the centre itself.
Run from the repository root: ``python3 demos/02_triple_frame_correlation.py``.
"""
# %%
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch
import torch.nn.functional as F

from vidstereo.correlation import GRID_3X3, HORIZONTAL, align_neighbors, tfcl
from vidstereo.synthdata import SceneConfig, generate_sequence

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# %%
clip = generate_sequence(SceneConfig(width=96, height=64, frames=3, max_motion=3), seed=3)
to_t = lambda a: torch.from_numpy(a).permute(2, 0, 1)[None].double()


def patches(x):
    # a stand-in feature extractor: normalised 3x3 colour patches
    x = x - x.mean(dim=(2, 3), keepdim=True)
    p = F.unfold(x, 3, padding=1).view(1, 27, *x.shape[-2:])
    return p / p.norm(dim=1, keepdim=True).clamp_min(1e-9)


left = patches(to_t(clip.left_images[1]))
rights = [patches(to_t(clip.right_images[t])) for t in range(3)]
flow = lambda a: torch.from_numpy(a).permute(2, 0, 1)[None].double()
triple = align_neighbors(rights[0], rights[1], rights[2], flow(clip.flow_bwd[0]), flow(clip.flow_fwd[1]))

# %%
# Sample around the true disparity. With a perfect estimate the peak of every
# block sits at the zero offset (index 4 of each 9-channel block).
disp = torch.from_numpy(clip.disparity[1])[None, None].double()
for it, rng in ((0, HORIZONTAL), (1, GRID_3X3)):
    vol = tfcl(left, triple, disp, it)
    hits = [(vol[0, 9 * b:9 * b + 9].argmax(0) == 4).double().mean().item() for b in range(3)]
    print(f"iteration {it} ({len(rng)} offsets): peak at zero offset for "
          + ", ".join(f"{name} {h:.2f}" for name, h in zip(("prev", "centre", "next"), hits)))

# A disparity estimate that is 2 px too small moves the horizontal peak by two.
vol = tfcl(left, triple, disp - 2, 0)
print("with d - 2 the most common peak index is", vol[0, 9:18].argmax(0).flatten().mode().values.item())

# %%
fig, axes = plt.subplots(1, 3, figsize=(12, 3))
for ax, b, name in zip(axes, range(3), ("aligned prev", "centre", "aligned next")):
    ax.imshow(tfcl(left, triple, disp, 0)[0, 9 * b + 4], cmap="viridis")
    ax.set_title(f"{name}: score at zero offset")
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "02_correlation.png", dpi=100)
print("wrote", OUT / "02_correlation.png")
