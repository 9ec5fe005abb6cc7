"""Acceptance gate: one PASS/FAIL line per criterion, repeated in the terminal summary.

Criterion 6 reads the cached ablation suite under ``results/directional``;
produce it with ``python3 -m vidstereo.experiments``. It fails, rather than
skips, when runs are missing.
"""
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

import oracles
from conftest import ACCEPTANCE_LINES
from vidstereo import cli, io_formats
from vidstereo.correlation import align_neighbors, tfcl
from vidstereo.experiments import SuiteConfig, overfit_check, summarize
from vidstereo.metrics import DEFAULT_GAMMA, delta_npx, delta_t_npx, epe, sequence_loss, tepe

ROOT = Path(__file__).resolve().parents[1]


def verdict(n, name, ok, detail):
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_c1_tfcl_oracle():
    t0 = time.time()
    g = torch.Generator().manual_seed(2024)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    worst = 0.0
    for iteration in (0, 1):
        left, rp, rc, rn = (rnd(1, 8, 6, 8) for _ in range(4))
        to_prev, to_next = 1.5 * rnd(1, 2, 6, 8), 1.5 * rnd(1, 2, 6, 8)
        disp = 3 * torch.rand(1, 1, 6, 8, generator=g, dtype=torch.float64)
        out = tfcl(left, align_neighbors(rp, rc, rn, to_prev, to_next), disp, iteration)
        ref = oracles.tfcl(*(x[0].numpy() for x in (left, rp, rc, rn, to_prev, to_next, disp)),
                           iteration)
        worst = max(worst, float(np.abs(out[0].numpy() - ref).max()))
    dt = time.time() - t0
    verdict(1, "tfcl matches explicit loops", worst <= 1e-6 and dt < 10,
            f"max abs diff {worst:.2e} <= 1e-6, {dt:.2f}s < 10s")


def test_c2_gradient_suite():
    t0 = time.time()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(ROOT / "tests"),
         "-k", "gradcheck or gradient or motion_encode_heads", "--ignore",
         str(ROOT / "tests/test_acceptance.py")],
        capture_output=True, text=True, cwd=ROOT)
    dt = time.time() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(2, "finite-difference gradient suite", proc.returncode == 0 and dt < 300,
            f"{tail}; rel tol 1e-4, 1e-3 for full iterations; {dt:.0f}s < 300s")


def test_c3_metric_exactness():
    checks = {}
    gt = np.full((4, 5), 3.0)
    checks["epe/delta examples"] = (epe(gt, gt) == 0 and epe(gt + 2, gt) == 2
                                    and delta_npx(gt + 2, gt, 1) == 1 and delta_npx(gt + 2, gt, 3) == 0)
    two = np.array([0.0, 1.0]).reshape(2, 1, 1)
    checks["tepe examples"] = tepe(two, np.zeros_like(two)) == 1.0 and tepe(two, two) == 0.0
    g = np.random.default_rng(0)
    seq = np.round(g.uniform(0, 20, (6, 8, 8)) * 64) / 64
    bias = np.round(g.normal(scale=4, size=(8, 8)) * 64) / 64
    checks["static-bias invariance"] = (tepe(seq + bias, seq) == 0.0
                                        and delta_t_npx(seq + bias, seq, 1) == 0.0)
    mono = True
    for s in range(100):
        r = np.random.default_rng(s)
        d_gt = r.uniform(0, 20, (4, 6, 6))
        d = d_gt + r.normal(scale=2, size=d_gt.shape)
        ns = [0, 0.5, 1, 2, 3, 5]
        sp = [delta_npx(d, d_gt, n) for n in ns]
        tp = [delta_t_npx(d, d_gt, n) for n in ns]
        mono &= all(a >= b for a, b in zip(sp, sp[1:])) and all(a >= b for a, b in zip(tp, tp[1:]))
    checks["monotone on 100 fields"] = mono
    d_gt = np.random.default_rng(5).uniform(0, 9, (5, 3, 4))
    d = d_gt + np.random.default_rng(6).normal(size=d_gt.shape)
    got = tepe(d, d_gt)
    want = np.mean([oracles.tepe_pixel(d[:, y, x], d_gt[:, y, x])
                    for y in range(3) for x in range(4)])
    checks["tepe loop oracle"] = abs(got - want) <= 1e-9
    bad = [k for k, v in checks.items() if not v]
    verdict(3, "metric exactness", not bad, ", ".join(f"{k}: {'ok' if v else 'FAILED'}"
                                                     for k, v in checks.items()))


def test_c4_loss_exactness():
    gt = torch.zeros(1, 1, 2, 3, dtype=torch.float64)
    value = sequence_loss([gt + 1.0, gt - 1.0], gt).item()
    verdict(4, "gamma-weighted loss", abs(value - 1.9) <= 1e-9 and DEFAULT_GAMMA == 0.9,
            f"loss {value!r} vs 1.9, |diff| {abs(value - 1.9):.1e} <= 1e-9; gamma {DEFAULT_GAMMA}")


def test_c5_overfit_one_clip():
    res = overfit_check()
    ok = res["epe"] < 0.5 and res["steps"] <= 2000 and res["seconds"] < 900
    verdict(5, "overfit one 64x96 T=5 clip", ok,
            f"EPE {res['epe']:.3f} < 0.5 after {res['steps']} <= 2000 steps, "
            f"{res['seconds']:.0f}s < 900s")


def test_c6_directional_trends():
    cfg = SuiteConfig()
    out = ROOT / "results" / "directional" / cfg.digest()
    if not (out / "suite.json").exists():
        verdict(6, "directional trends", False, f"no suite results under {out}")
    s = summarize(out)
    runs = {p.stem for p in out.glob("*_seed*.json")}
    labels = {"alignment": "(a) alignment on <= off", "multi_multi": "(b) single-multi <= multi-multi",
              "iterations": "(c) 20 iterations <= 10", "frames": "(d) T=10 joint <= 5-frame windows"}
    parts = []
    for key, label in labels.items():
        if key in s["checks"]:
            a, b = s["checks"][key]
            parts.append(f"{label}: {a:.4f} vs {b:.4f} {'ok' if s['verdicts'][key] else 'VIOLATED'}")
        else:
            parts.append(f"{label}: missing runs")
    wall = sum(json.loads((out / f"{r}.json").read_text()).get("wall_clock_s", 0) for r in runs)
    ok = s["complete"] and all(s["verdicts"].get(k, False) for k in labels)
    verdict(6, "directional trends (TEPE seed means, 3 seeds)", ok,
            "; ".join(parts) + f"; {len(runs)}/9 runs, {wall / 3600:.1f} CPU-h")


def test_c7_cmd_train_determinism(tmp_path):
    assert cli.main(["generate", "--out", str(tmp_path / "data"), "--count", "2", "--seed", "3",
                     "--set", "frames=5", "--set", "height=32", "--set", "width=64"]) == 0
    (tmp_path / "cfg.yaml").write_text(
        "model:\n  hidden_dim: 16\n  feature_dim: 16\n  corr_dim: 16\n"
        "pipeline:\n  iterations_train: 2\n  frames_train: 3\n"
        "train:\n  steps: 5\n  crop: [32, 32]\n  log_every: 0\n")
    hashes = []
    for run in ("a", "b"):
        assert cli.main(["train", "--data", str(tmp_path / "data"), "--config",
                         str(tmp_path / "cfg.yaml"), "--out", str(tmp_path / run),
                         "--seed", "11"]) == 0
        hashes.append((tmp_path / run / "final.ckpt").read_bytes())
    same = hashes[0] == hashes[1]
    verdict(7, "cmd_train determinism", same,
            f"final checkpoints {'bit-identical' if same else 'differ'}, {len(hashes[0])} bytes")


def test_c8_format_fidelity(tmp_path):
    g = np.random.default_rng(8)
    disp = g.uniform(0, 200, (17, 23)).astype(np.float32)
    flow = g.normal(scale=5, size=(17, 23, 2)).astype(np.float32)
    arrays = {"a": disp, "b": g.integers(0, 9, (3, 4)).astype(np.int64)}
    io_formats.write_pfm(tmp_path / "d.pfm", disp)
    io_formats.write_flo(tmp_path / "f.flo", flow)
    io_formats.write_container(tmp_path / "c.bin", arrays, {"k": 1})
    io_formats.write_disp_png16(tmp_path / "d.png", disp)
    back, meta = io_formats.read_container(tmp_path / "c.bin")
    q, valid = io_formats.read_disp_png16(tmp_path / "d.png")
    qerr = float(np.abs(q[valid] - disp[valid]).max())
    checks = {
        "pfm": io_formats.read_pfm(tmp_path / "d.pfm").tobytes() == disp.tobytes(),
        "flo": io_formats.read_flo(tmp_path / "f.flo").tobytes() == flow.tobytes(),
        "container": all(back[k].tobytes() == v.tobytes() and back[k].dtype == v.dtype
                         for k, v in arrays.items()) and meta == {"k": 1},
        "png16": qerr <= 1 / 512 and valid.all(),
    }
    verdict(8, "format fidelity", all(checks.values()),
            ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
            + f"; png16 max error {qerr:.2e} <= {1 / 512:.2e}")
