"""Directional ablation suite: alignment, multi-multi, iterations, inference frames.

Each variant is trained from scratch for every seed, then scored on a shared
held-out synthetic set. Results are written per (variant, seed) as JSON under
a directory keyed by a hash of the suite definition, so an interrupted suite
resumes where it stopped and a finished one is read back instead of rerun.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, PipelineConfig, TrainConfig, to_dict
from .synthdata import SceneConfig, generate_sequence
from .training import evaluate_model, train

log = logging.getLogger(__name__)

VARIANTS = {
    "single-multi": {},
    "alignment-off": {"alignment": False},
    "multi-multi": {"correlation_mode": "multi-multi"},
}


@dataclass(frozen=True)
class SuiteConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int = 5000
    train_sequences: int = 80
    eval_sequences: int = 20
    frames: int = 10
    window: int = 5
    iterations_train: int = 4
    iterations_eval: tuple[int, int] = (10, 20)
    crop: tuple[int, int] = (32, 64)
    batch_size: int = 2
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(frames=10, max_motion=4))
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig.desk(hidden_dim=16, feature_dim=16, corr_dim=16))
    data_seed: int = 1000

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def pipeline(self, variant: str) -> PipelineConfig:
        model = dataclasses.replace(self.model, **VARIANTS[variant])
        return PipelineConfig(iterations_train=self.iterations_train,
                              iterations_eval=max(self.iterations_eval),
                              frames_train=5, model=model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, crop=self.crop,
                           log_every=500)


def suite_data(cfg: SuiteConfig):
    # train and eval seeds are disjoint ranges of one stream
    seeds = np.random.default_rng(cfg.data_seed).permutation(
        cfg.train_sequences + cfg.eval_sequences)
    gen = lambda s: generate_sequence(cfg.scene, int(s) + cfg.data_seed)
    train_set = [gen(s) for s in seeds[:cfg.train_sequences]]
    eval_set = [gen(s) for s in seeds[cfg.train_sequences:]]
    return train_set, eval_set


def _score(model, eval_set, cfg: SuiteConfig, variant: str) -> dict:
    lo, hi = cfg.iterations_eval
    full = evaluate_model(model, eval_set, hi)
    scores = {f"tepe_it{hi}": full.tepe, "epe": full.epe}
    if variant == "single-multi":
        scores[f"tepe_it{lo}"] = evaluate_model(model, eval_set, lo).tepe
        scores[f"tepe_window{cfg.window}"] = evaluate_model(model, eval_set, hi,
                                                            window=cfg.window).tepe
    return scores


def run_suite(cfg: SuiteConfig | None = None, root: str | Path = "results/directional",
              variants=tuple(VARIANTS)) -> dict:
    """Run (or resume) the suite and return the summary dict."""
    cfg = cfg or SuiteConfig()
    out = Path(root) / cfg.digest()
    out.mkdir(parents=True, exist_ok=True)
    (out / "suite.json").write_text(json.dumps(cfg.to_dict(), indent=2, default=list))
    data = None
    for variant in variants:
        for seed in cfg.seeds:
            path = out / f"{variant}_seed{seed}.json"
            if path.exists():
                continue
            if data is None:
                data = suite_data(cfg)
            t0 = time.time()
            pipeline = cfg.pipeline(variant)
            result = train(data[0], pipeline, cfg.train_config(), seed,
                           out_dir=out / f"{variant}_seed{seed}")
            record = {
                "variant": variant, "seed": seed,
                "scores": _score(result.model, data[1], cfg, variant),
                "final_loss": float(np.mean(result.losses[-100:])),
                "loss_curve": [float(np.mean(result.losses[i:i + 100]))
                               for i in range(0, len(result.losses), 100)],
                "parameter_hash": result.manifest["parameter_hash"],
                "checkpoint": str(Path(result.checkpoint).relative_to(out)),
                "config": to_dict(pipeline, cfg.train_config()),
                "wall_clock_s": time.time() - t0,
            }
            path.write_text(json.dumps(record, indent=2))
            log.info("%s seed %d: %s", variant, seed, record["scores"])
    return summarize(out)


def load_records(out: Path) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted(Path(out).glob("*_seed*.json"))]


def summarize(out: str | Path) -> dict:
    """Seed-means per variant plus the four directional verdicts."""
    records = load_records(Path(out))
    cfg = json.loads((Path(out) / "suite.json").read_text())
    lo, hi = cfg["iterations_eval"]
    window = cfg["window"]
    means: dict[str, dict[str, float]] = {}
    for variant in VARIANTS:
        rs = [r["scores"] for r in records if r["variant"] == variant]
        if len(rs) == len(cfg["seeds"]):
            means[variant] = {k: float(np.mean([s[k] for s in rs])) for k in rs[0]}
    summary = {"means": means, "complete": len(means) == len(VARIANTS), "checks": {}}
    sm = means.get("single-multi")
    if sm is not None and "alignment-off" in means:
        summary["checks"]["alignment"] = (sm[f"tepe_it{hi}"], means["alignment-off"][f"tepe_it{hi}"])
    if sm is not None and "multi-multi" in means:
        summary["checks"]["multi_multi"] = (sm[f"tepe_it{hi}"], means["multi-multi"][f"tepe_it{hi}"])
    if sm is not None:
        summary["checks"]["iterations"] = (sm[f"tepe_it{hi}"], sm[f"tepe_it{lo}"])
        summary["checks"]["frames"] = (sm[f"tepe_it{hi}"], sm[f"tepe_window{window}"])
    # each pair is (expected-better-or-equal, other)
    summary["verdicts"] = {k: a <= b for k, (a, b) in summary["checks"].items()}
    return summary


def overfit_check(seed: int = 0, max_steps: int = 2000, target_epe: float = 0.5,
                  eval_every: int = 100, lr: float = 1e-3) -> dict:
    """Fit one 64x96, 5-frame clip until its EPE drops below ``target_epe``."""
    clip = generate_sequence(SceneConfig(width=96, height=64, frames=5), seed)
    pipe = PipelineConfig(iterations_train=4, iterations_eval=8, frames_train=5,
                          model=ModelConfig.desk(hidden_dim=16, feature_dim=16, corr_dim=16))
    t0 = time.time()
    res = train([clip], pipe, TrainConfig(steps=max_steps, batch_size=1, lr=lr,
                                          eval_every=eval_every, log_every=eval_every),
                seed=seed, eval_set=[clip], target_epe=target_epe)
    return {"steps": res.manifest["final_step"], "epe": res.metrics[-1]["epe"],
            "curve": res.metrics, "seconds": time.time() - t0}


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(json.dumps(run_suite(), indent=2))


if __name__ == "__main__":
    main()
