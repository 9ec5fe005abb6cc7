"""Per-frame error versus temporal error.

A prediction can be wrong by a constant offset and still be perfectly stable
through time, or be accurate on average and flicker. EPE sees the first, TEPE
sees the second. Run: ``python3 demos/03_temporal_metrics.py``.
"""
# %%
import numpy as np

from vidstereo.metrics import evaluate_sequence

rng = np.random.default_rng(0)
gt = np.repeat(rng.uniform(2, 12, size=(1, 32, 48)), 10, axis=0)
gt += np.linspace(0, 1, 10)[:, None, None]          # disparity slowly grows

biased = gt + 1.5                                     # stable but offset
flicker = gt + rng.choice([-0.75, 0.75], size=gt.shape)   # unbiased but jittery

# %%
for name, pred in (("constant +1.5 px", biased), ("+-0.75 px flicker", flicker)):
    r = evaluate_sequence(pred, gt)
    print(f"{name:>18}: EPE {r.epe:.3f}  d1 {r.delta_1px:.2f}  TEPE {r.tepe:.3f}  dt1 {r.delta_t_1px:.2f}")

# %%
# The temporal error is not normalised by the number of frame pairs, so a
# longer clip of the same flicker scores higher. Compare clips of equal length.
for t in (3, 5, 10):
    print(f"T={t:2d}: TEPE {evaluate_sequence(flicker[:t], gt[:t]).tepe:.3f}")
