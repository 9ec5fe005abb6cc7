"""Command-line entry points: generate, train, eval, infer and compare.

Every command that writes artifacts writes exactly one ``run_manifest.json``
into its output directory. Exit codes: 0 success, 2 usage or config error,
3 data error, 4 numerical failure. ``VIDSTEREO_WORKERS`` caps the number of
parallel evaluation workers.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
import yaml

from . import io_formats
from .backbone import FlowProviderError, FlowSet
from .config import ConfigError, apply_overrides, load_config_layers, parse_ablation, to_dict
from .metrics import MetricReport, evaluate_sequence, write_reports_csv
from .pipeline import PipelineError, infer
from .synthdata import SceneConfig, SceneConfigError, generate_sequence, read_bundle, write_bundle
from .training import (
    TrainingDiverged, load_checkpoint, parameter_hash, predict_bundle, train,
)

log = logging.getLogger("vidstereo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "VIDSTEREO_WORKERS"
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _kv(items, what):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"{what} {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def worker_count(requested: int | None = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(WORKERS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {cap!r}") from None
    return max(1, n)


def write_manifest(out: Path, command: str, config, seed, param_hash, metrics, t0) -> Path:
    """The single manifest of a run. Only ``wall_clock_s`` varies between reruns."""
    body = {
        "command": command,
        "config": config,
        "seed": seed,
        "parameter_hash": param_hash,
        "metrics": metrics,
        "wall_clock_s": round(time.time() - t0, 3),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(body, indent=2, sort_keys=True))
    return path


def list_bundles(data: str | os.PathLike) -> list[Path]:
    root = Path(data)
    if (root / "manifest.json").exists():
        return [root]
    dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    if not dirs:
        raise DataError(f"no sequences found under {root}")
    return dirs


def _savefig(fig, path):
    # no timestamp/software chunks so reruns are byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def colorize(disp: np.ndarray, vmax: float) -> np.ndarray:
    """uint8 RGB rendering of a disparity map with the magma colormap."""
    from matplotlib import colormaps
    x = np.nan_to_num(np.asarray(disp, dtype=np.float64), nan=0.0) / max(vmax, 1e-6)
    rgb = colormaps["magma"](np.clip(x, 0, 1))[..., :3]
    return (rgb * 255 + 0.5).astype(np.uint8)


def write_disparity_vis(directory: Path, disp_seq: np.ndarray, vmax: float):
    from PIL import Image
    directory.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(disp_seq):
        Image.fromarray(colorize(d, vmax)).save(directory / f"{i:06d}.png")


def plot_curves(path: Path, series: dict, xlabel: str, ylabel: str, logy=False):
    """``series`` maps a legend label to ``(xs, ys)``."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o" if len(xs) < 20 else None, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    t0 = time.time()
    values = {}
    if args.config:
        with open(args.config) as fh:
            values = yaml.safe_load(fh) or {}
        if not isinstance(values, dict):
            raise UsageError(f"config file {args.config} must hold a key/value mapping")
    values.update({k: yaml.safe_load(v) for k, v in _kv(args.set, "--set").items()})
    try:
        scene = SceneConfig.from_dict(values)
    except TypeError as exc:
        raise UsageError(f"bad scene config: {exc}") from None
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    seeds = [int(s) for s in rng.choice(2**31 - 1, size=args.count, replace=False)]
    for i, s in enumerate(seeds):
        write_bundle(generate_sequence(scene, s), out / f"seq_{i:05d}")
        log.info("wrote sequence %d/%d (seed %d)", i + 1, args.count, s)
    write_manifest(out, "generate", {"scene": scene.to_dict(), "sequence_seeds": seeds},
                   args.seed, None, {"count": args.count}, t0)
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.time()
    ablation = parse_ablation(args.ablation)
    pipeline, train_cfg = load_config_layers(args.config or (), _kv(args.set, "--set"))
    if ablation:
        pipeline, train_cfg = apply_overrides(pipeline, train_cfg, ablation)
    bundles = [read_bundle(p) for p in list_bundles(args.data)]
    eval_set = [read_bundle(p) for p in list_bundles(args.eval_data)] if args.eval_data else None
    out = Path(args.out)
    res = train(bundles, pipeline, train_cfg, args.seed, out_dir=out, eval_set=eval_set)

    steps = np.arange(1, len(res.losses) + 1)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(zip(steps.tolist(), res.losses))
    plot_curves(out / "loss_curve.png", {"training loss": (steps, res.losses)}, "step", "loss",
                logy=True)
    if res.metrics:
        with open(out / "metric_curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "epe", "tepe"])
            w.writeheader()
            w.writerows(res.metrics)
        xs = [m["step"] for m in res.metrics]
        plot_curves(out / "metric_curve.png",
                    {k: (xs, [m[k] for m in res.metrics]) for k in ("epe", "tepe")}, "step", "px")
    write_manifest(out, "train", {**to_dict(pipeline, train_cfg), "ablation": ablation,
                                  "data": str(args.data)},
                   args.seed, res.manifest["parameter_hash"],
                   {"final_loss": res.losses[-1] if res.losses else None,
                    "steps_run": res.manifest["steps_run"], "metric_curve": res.metrics,
                    "checkpoint": os.path.relpath(res.checkpoint, out)}, t0)
    return EXIT_OK


def _predict(source, bundle, iterations, frames):
    if source == "gt":
        return bundle.disparity.astype(np.float32)
    window = frames if frames and frames < bundle.frames else None
    return predict_bundle(source, bundle, iterations, window)


def cmd_eval(args) -> int:
    t0 = time.time()
    if (args.ckpt is None) == (args.predictor is None):
        raise UsageError("give exactly one of --ckpt or --predictor gt")
    if args.ckpt is not None:
        model, pipeline, _, _, _ = load_checkpoint(args.ckpt)
        model.eval()
        method = args.method or Path(args.ckpt).stem
        iterations = args.iters or pipeline.iterations_eval
        config, p_hash = to_dict(pipeline), parameter_hash(model)
        source = model
    else:
        method, iterations, config, p_hash, source = args.method or "oracle-gt", None, None, None, "gt"
    dirs = list_bundles(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        b = read_bundle(path)
        with torch.no_grad():
            pred = _predict(source, b, iterations, args.frames)
        rep = evaluate_sequence(pred, b.disparity)
        if not args.no_vis:
            vmax = float(np.nanmax(b.disparity))
            write_disparity_vis(out / "vis" / path.name / "pred", pred, vmax)
            write_disparity_vis(out / "vis" / path.name / "gt", b.disparity, vmax)
        return path.name, rep

    torch_threads = torch.get_num_threads()
    n = worker_count(args.workers)
    if n > 1:
        # one intra-op thread per worker keeps reductions in a fixed order
        torch.set_num_threads(1)
        with ThreadPoolExecutor(n) as pool:
            results = list(pool.map(one, dirs))
        torch.set_num_threads(torch_threads)
    else:
        results = [one(p) for p in dirs]

    seq_dir = out / "sequences"
    seq_dir.mkdir(exist_ok=True)
    for name, rep in results:
        (seq_dir / f"{name}.json").write_text(rep.to_json())
    agg = MetricReport.mean([r for _, r in results])
    rows = [(method, name, rep) for name, rep in results] + [(method, "aggregate", agg)]
    write_reports_csv(out / "reports.csv", rows)
    summary = {"method": method, "iterations": iterations, "frames": args.frames,
               "sequences": len(results), **json.loads(agg.to_json())}
    (out / "aggregate.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(out, "eval", {"model": config, "iterations": iterations,
                                 "frames": args.frames, "data": str(args.data),
                                 "predictor": "gt" if source == "gt" else "checkpoint"},
                   None, p_hash, summary, t0)
    log.info("%s: epe %.4f tepe %.4f over %d sequences", method, agg.epe, agg.tepe, len(results))
    return EXIT_OK


def _sorted_glob(pattern: str, what: str) -> list[str]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise DataError(f"{what} pattern {pattern!r} matched no files")
    return paths


def cmd_infer(args) -> int:
    t0 = time.time()
    lefts = _sorted_glob(args.left, "--left")
    rights = _sorted_glob(args.right, "--right")
    if len(lefts) != len(rights):
        raise DataError(f"{len(lefts)} left images but {len(rights)} right images")
    t = len(lefts)
    left = np.stack([io_formats.read_image(p) for p in lefts])
    right = np.stack([io_formats.read_image(p) for p in rights])
    if left.shape != right.shape:
        raise DataError("left and right images differ in size")
    flows = []
    for flag, pattern in (("--flow-fwd", args.flow_fwd), ("--flow-bwd", args.flow_bwd)):
        if pattern is None:
            flows.append(np.zeros((t - 1, *left.shape[1:3], 2), np.float32))
            continue
        files = _sorted_glob(pattern, flag)
        if len(files) != t - 1:
            raise DataError(f"{flag}: need {t - 1} flow files for {t} frames, got {len(files)}")
        flows.append(np.stack([io_formats.read_flo(p) for p in files]))
    model, pipeline, _, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    iterations = args.iters or pipeline.iterations_eval
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).permute(0, 3, 1, 2)[None].float()
    with torch.no_grad():
        pred = infer(model, to_t(left), to_t(right), FlowSet(to_t(flows[0]), to_t(flows[1])),
                     iterations).final[0].numpy()
    if not np.isfinite(pred).all():
        raise FloatingPointError("prediction contains non-finite values")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (src, d) in enumerate(zip(lefts, pred)):
        stem = f"{i:06d}"
        io_formats.write_pfm(out / f"{stem}.pfm", d)
        io_formats.write_disp_png16(out / f"{stem}.png", d)
    write_manifest(out, "infer", {"model": to_dict(pipeline), "iterations": iterations,
                                  "left": lefts, "right": rights},
                   None, parameter_hash(model), {"frames": t,
                                                 "max_disparity": float(pred.max())}, t0)
    return EXIT_OK


def cmd_compare(args) -> int:
    t0 = time.time()
    reports = []
    for path in args.reports:
        try:
            reports.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from None
    cols = ["method", "iterations", "frames"] + [k for k in MetricReport.fieldnames()]
    for r, path in zip(reports, args.reports):
        missing = [c for c in cols[3:] if c not in r]
        if missing:
            raise DataError(f"{path} lacks {missing}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            w.writerow([r.get(c) for c in cols])
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r.get(c)) for c in cols) + " |" for r in reports]
    (out / "comparison.md").write_text("\n".join(lines) + "\n")

    # one line per method across the iteration counts it was evaluated at
    series = {}
    for r in reports:
        if r.get("iterations") is not None:
            series.setdefault(f"{r['method']} (T={r.get('frames') or 'all'})", []).append(
                (r["iterations"], r["tepe"]))
    if series:
        lines_ = {k: tuple(map(list, zip(*sorted(v)))) for k, v in series.items()}
        plot_curves(out / "tepe_vs_iterations.png", lines_, "inference iterations", "TEPE")
    write_manifest(out, "compare", {"reports": list(map(str, args.reports))}, None, None,
                   {"rows": len(reports)}, t0)
    print(open(out / "comparison.md").read(), end="")
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidstereo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic stereo clips with ground truth")
    g.add_argument("--config", help="YAML scene config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="scene config override")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on generated clips")
    t.add_argument("--data", required=True)
    t.add_argument("--config", action="append", help="YAML config layer (repeatable)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", action="append", metavar="KEY=VALUE")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    t.add_argument("--eval-data", help="clips to score every train.eval_every steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on generated clips")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--predictor", choices=["gt"], help="oracle that returns ground truth")
    e.add_argument("--out", required=True)
    e.add_argument("--iters", type=int)
    e.add_argument("--frames", type=int, help="window length; shorter than the clip stitches")
    e.add_argument("--method", help="label used in reports")
    e.add_argument("--workers", type=int)
    e.add_argument("--no-vis", action="store_true", help="skip colour-mapped PNGs")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict disparity for image files")
    i.add_argument("--left", required=True)
    i.add_argument("--right", required=True)
    i.add_argument("--flow-fwd")
    i.add_argument("--flow-bwd")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--iters", type=int)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("compare", help="tabulate eval aggregates and plot TEPE")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SceneConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io_formats.FormatError, FlowProviderError, PipelineError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
