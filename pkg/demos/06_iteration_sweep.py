"""TEPE as a function of inference iterations for the trained suite models.

The desk-scale models are trained with 4 iterations per stage. This sweep
shows how far past that their refinement keeps helping.
Run after the suite: ``python3 demos/06_iteration_sweep.py``.
"""
# %%
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from vidstereo.experiments import SuiteConfig, suite_data
from vidstereo.training import evaluate_model, load_checkpoint

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
cfg = SuiteConfig()
run_dir = Path("results/directional") / cfg.digest()
_, eval_set = suite_data(cfg)
iterations = [2, 4, 6, 8, 10, 15, 20]

# %%
sweep = {}
for ckpt in sorted(run_dir.glob("single-multi_seed*/final.ckpt")):
    model, *_ = load_checkpoint(ckpt)
    reps = [evaluate_model(model, eval_set, n) for n in iterations]
    sweep[ckpt.parent.name] = {"tepe": [r.tepe for r in reps], "epe": [r.epe for r in reps]}
    print(ckpt.parent.name, " ".join(f"{n}:{r.tepe:.3f}/{r.epe:.3f}" for n, r in zip(iterations, reps)))
(run_dir / "iteration_sweep.json").write_text(json.dumps({"iterations": iterations, **sweep}, indent=2))

# %%
fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
for name, s in sweep.items():
    for ax, key in zip(axes, ("tepe", "epe")):
        ax.plot(iterations, s[key], marker="o", label=name)
        ax.set_xlabel("iterations per stage")
        ax.set_ylabel(key.upper())
axes[0].axvline(cfg.iterations_train, color="grey", ls=":")
axes[0].legend()
fig.tight_layout()
fig.savefig(OUT / "06_iteration_sweep.png", dpi=100)
print("wrote", OUT / "06_iteration_sweep.png")
