"""Read the cached ablation runs and show which trends reproduce.

The runs themselves come from ``python3 -m vidstereo.experiments`` (hours on
one CPU core). This script only reads ``results/directional/<digest>/``.
"""
# %%
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from vidstereo.experiments import SuiteConfig, summarize

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

cfg = SuiteConfig()
run_dir = Path("results/directional") / cfg.digest()
summary = summarize(run_dir)
if not summary["complete"]:
    print("suite incomplete; present runs:", sorted(p.stem for p in run_dir.glob("*_seed*.json")))

# %%
for variant, scores in summary["means"].items():
    print(f"{variant:>14}: " + "  ".join(f"{k} {v:.3f}" for k, v in sorted(scores.items())))
for name, verdict in summary["verdicts"].items():
    print(f"{name:>12}: {verdict}")

# %%
means = summary["means"]
if means:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(means)
    ax.bar(names, [means[n]["tepe_it20"] for n in names])
    ax.set_ylabel("TEPE, 20 iterations (seed mean)")
    fig.tight_layout()
    fig.savefig(OUT / "05_directional.png", dpi=100)
    print("wrote", OUT / "05_directional.png")
