"""Procedural dynamic stereo sequences with exact ground truth.

A scene is a static textured background plane at constant disparity plus
``sprite_count`` fronto-parallel textured rectangles, each at its own constant
disparity and translating with a constant velocity. The camera pair is fixed
and rectified. Images are rendered with 4x4 supersampling and a box filter.

Flow conventions (all on the left view):

* ``flow_fwd[t]`` lives on frame ``t``'s grid and points to the matching
  location in frame ``t+1``; warping frame ``t+1`` by it reconstructs frame ``t``.
* ``flow_bwd[t]`` lives on frame ``t+1``'s grid and points back into frame ``t``.

Occlusion masks are conservative: a pixel is marked occluded unless both the
pixel and the full bilinear footprint of its match are covered by one surface
only, so the photometric invariants hold on every unmarked pixel.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io_formats

SUPERSAMPLE = 4


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 96
    height: int = 64
    frames: int = 5
    sprite_count: int = 3
    disparity_range: tuple[float, float] = (2.0, 12.0)
    max_motion: float = 2.0
    texture_seed: int = 0
    baseline_focal_product: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "disparity_range", tuple(float(v) for v in self.disparity_range))
        self.validate()

    def validate(self) -> None:
        d_min, d_max = self.disparity_range
        if self.frames < 2:
            raise SceneConfigError(f"frames must be >= 2, got {self.frames}")
        if self.width % 16 or self.height % 16 or self.width <= 0 or self.height <= 0:
            raise SceneConfigError(
                f"width and height must be positive multiples of 16, got {self.width}x{self.height}")
        if not 0 <= d_min <= d_max:
            raise SceneConfigError(f"disparity_range needs 0 <= d_min <= d_max, got {self.disparity_range}")
        if not d_max < self.width / 4:
            raise SceneConfigError(
                f"disparity_range d_max={d_max} must be < width/4 = {self.width / 4}")
        if self.sprite_count < 0:
            raise SceneConfigError(f"sprite_count must be >= 0, got {self.sprite_count}")
        if self.max_motion < 0:
            raise SceneConfigError(f"max_motion must be >= 0, got {self.max_motion}")
        if self.baseline_focal_product <= 0:
            raise SceneConfigError("baseline_focal_product must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disparity_range"] = list(self.disparity_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True)
class Sprite:
    x: float
    y: float
    w: float
    h: float
    vx: float
    vy: float
    disparity: float
    texture: "Texture"


@dataclass(frozen=True)
class Texture:
    """Band-limited colour texture: a base colour plus a few plane waves."""
    base: np.ndarray            # (3,)
    freqs: np.ndarray           # (K, 2), rad/px
    phases: np.ndarray          # (K,)
    colors: np.ndarray          # (K, 3), amplitude per channel

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        arg = u[..., None] * self.freqs[:, 0] + v[..., None] * self.freqs[:, 1] + self.phases
        return self.base + np.sin(arg) @ self.colors


def _random_texture(rng: np.random.Generator, waves: int = 6) -> Texture:
    wavelengths = rng.uniform(8.0, 24.0, size=waves)
    angles = rng.uniform(0, np.pi, size=waves)
    mag = 2 * np.pi / wavelengths
    freqs = np.stack([mag * np.cos(angles), mag * np.sin(angles)], axis=1)
    colors = rng.uniform(-1.0, 1.0, size=(waves, 3))
    colors *= 0.28 / np.abs(colors).sum(axis=0, keepdims=True).clip(1e-6)
    return Texture(
        base=rng.uniform(0.3, 0.7, size=3),
        freqs=freqs,
        phases=rng.uniform(0, 2 * np.pi, size=waves),
        colors=colors,
    )


@dataclass
class GroundTruthBundle:
    left_images: np.ndarray         # (T, H, W, 3) float32
    right_images: np.ndarray        # (T, H, W, 3)
    disparity: np.ndarray           # (T, H, W)
    flow_fwd: np.ndarray            # (T-1, H, W, 2)
    flow_bwd: np.ndarray            # (T-1, H, W, 2)
    occlusion_stereo: np.ndarray    # (T, H, W) bool
    occlusion_fwd: np.ndarray       # (T-1, H, W) bool, on frame t's grid
    occlusion_bwd: np.ndarray       # (T-1, H, W) bool, on frame t+1's grid
    config: SceneConfig | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.left_images.shape[0]

    @property
    def occlusion_temporal(self) -> np.ndarray:
        """``(2, T-1, H, W)``: forward then backward temporal occlusion."""
        return np.stack([self.occlusion_fwd, self.occlusion_bwd])

    def depth(self) -> np.ndarray:
        if self.config is None:
            raise ValueError("bundle has no config; depth conversion needs baseline_focal_product")
        with np.errstate(divide="ignore"):
            return self.config.baseline_focal_product / self.disparity

    def subsequence(self, start: int, stop: int) -> "GroundTruthBundle":
        return GroundTruthBundle(
            left_images=self.left_images[start:stop],
            right_images=self.right_images[start:stop],
            disparity=self.disparity[start:stop],
            flow_fwd=self.flow_fwd[start:stop - 1],
            flow_bwd=self.flow_bwd[start:stop - 1],
            occlusion_stereo=self.occlusion_stereo[start:stop],
            occlusion_fwd=self.occlusion_fwd[start:stop - 1],
            occlusion_bwd=self.occlusion_bwd[start:stop - 1],
            config=self.config, seed=self.seed, meta=dict(self.meta),
        )

    def crop(self, y0: int, x0: int, height: int, width: int) -> "GroundTruthBundle":
        ys, xs = slice(y0, y0 + height), slice(x0, x0 + width)
        return GroundTruthBundle(
            left_images=self.left_images[:, ys, xs],
            right_images=self.right_images[:, ys, xs],
            disparity=self.disparity[:, ys, xs],
            flow_fwd=self.flow_fwd[:, ys, xs],
            flow_bwd=self.flow_bwd[:, ys, xs],
            occlusion_stereo=self.occlusion_stereo[:, ys, xs],
            occlusion_fwd=self.occlusion_fwd[:, ys, xs],
            occlusion_bwd=self.occlusion_bwd[:, ys, xs],
            config=self.config, seed=self.seed, meta=dict(self.meta),
        )


def _make_scene(config: SceneConfig, seed: int):
    rng = np.random.default_rng([config.texture_seed, seed])
    d_min, d_max = config.disparity_range
    d_bg = d_min + 0.2 * (d_max - d_min) * rng.uniform()
    background = _random_texture(rng)
    sprites = []
    for _ in range(config.sprite_count):
        w = rng.uniform(0.2, 0.45) * config.width
        h = rng.uniform(0.2, 0.45) * config.height
        speed = config.max_motion * np.sqrt(rng.uniform())
        angle = rng.uniform(0, 2 * np.pi)
        sprites.append(Sprite(
            x=rng.uniform(-0.1 * w, config.width - 0.9 * w),
            y=rng.uniform(-0.1 * h, config.height - 0.9 * h),
            w=w, h=h,
            vx=speed * np.cos(angle), vy=speed * np.sin(angle),
            disparity=rng.uniform(d_bg, d_max),
            texture=_random_texture(rng),
        ))
    # painter's order: far (small disparity) first
    sprites.sort(key=lambda s: s.disparity)
    return d_bg, background, sprites


def _render_view(config: SceneConfig, d_bg: float, background: Texture, sprites,
                 t: int, shift_sign: float):
    """Render one view at frame ``t``; ``shift_sign`` is 0 for left, 1 for right.

    Returns ``(image, majority_label, pure)`` at pixel resolution; label 0 is
    the background, label ``k+1`` sprite ``k``.
    """
    s = SUPERSAMPLE
    H, W = config.height, config.width
    sub = (np.arange(s) + 0.5) / s - 0.5
    xs = (np.arange(W)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(H)[:, None] + sub[None, :]).reshape(-1)
    X, Y = np.meshgrid(xs, ys)
    color = background(X + shift_sign * d_bg, Y)
    label = np.zeros(X.shape, dtype=np.int32)
    for k, sp in enumerate(sprites):
        u = X + shift_sign * sp.disparity - (sp.x + sp.vx * t)
        v = Y - (sp.y + sp.vy * t)
        inside = (u >= 0) & (u < sp.w) & (v >= 0) & (v < sp.h)
        color[inside] = sp.texture(u[inside], v[inside])
        label[inside] = k + 1
    image = color.reshape(H, s, W, s, 3).mean(axis=(1, 3))
    blocks = label.reshape(H, s, W, s).transpose(0, 2, 1, 3).reshape(H, W, s * s)
    pure = blocks.min(axis=-1) == blocks.max(axis=-1)
    counts = np.stack([(blocks == k).sum(axis=-1) for k in range(len(sprites) + 1)], axis=-1)
    majority = counts.argmax(axis=-1).astype(np.int32)
    return np.clip(image, 0.0, 1.0).astype(np.float32), majority, pure


def _footprint_ok(tx: np.ndarray, ty: np.ndarray, want: np.ndarray,
                  label: np.ndarray, pure: np.ndarray) -> np.ndarray:
    """True where the bilinear footprint of (tx, ty) is in-bounds, pure and labelled ``want``."""
    H, W = label.shape
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    x1 = np.where(tx > x0, x0 + 1, x0)
    y1 = np.where(ty > y0, y0 + 1, y0)
    ok = (x0 >= 0) & (y0 >= 0) & (x1 <= W - 1) & (y1 <= H - 1)
    x0, x1 = np.clip(x0, 0, W - 1), np.clip(x1, 0, W - 1)
    y0, y1 = np.clip(y0, 0, H - 1), np.clip(y1, 0, H - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= pure[yy, xx] & (label[yy, xx] == want)
    return ok


def generate_sequence(config: SceneConfig, seed: int) -> GroundTruthBundle:
    """Render a deterministic stereo clip with ground truth for ``(config, seed)``."""
    config.validate()
    d_bg, background, sprites = _make_scene(config, seed)
    T, H, W = config.frames, config.height, config.width
    disp_of = np.array([d_bg] + [sp.disparity for sp in sprites])
    vel_of = np.array([[0.0, 0.0]] + [[sp.vx, sp.vy] for sp in sprites])

    left, right, labels_l, pure_l, labels_r, pure_r = [], [], [], [], [], []
    for t in range(T):
        img, lab, pure = _render_view(config, d_bg, background, sprites, t, 0.0)
        left.append(img); labels_l.append(lab); pure_l.append(pure)
        img, lab, pure = _render_view(config, d_bg, background, sprites, t, 1.0)
        right.append(img); labels_r.append(lab); pure_r.append(pure)

    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                         indexing="ij")
    disparity = np.stack([disp_of[lab] for lab in labels_l])
    occ_stereo = np.zeros((T, H, W), dtype=bool)
    for t in range(T):
        ok = pure_l[t] & _footprint_ok(xs - disparity[t], ys, labels_l[t], labels_r[t], pure_r[t])
        occ_stereo[t] = ~ok

    flow_fwd = np.zeros((T - 1, H, W, 2))
    flow_bwd = np.zeros((T - 1, H, W, 2))
    occ_fwd = np.zeros((T - 1, H, W), dtype=bool)
    occ_bwd = np.zeros((T - 1, H, W), dtype=bool)
    for t in range(T - 1):
        vf = vel_of[labels_l[t]]
        flow_fwd[t] = vf
        ok = pure_l[t] & _footprint_ok(xs + vf[..., 0], ys + vf[..., 1], labels_l[t],
                                       labels_l[t + 1], pure_l[t + 1])
        occ_fwd[t] = ~ok
        vb = -vel_of[labels_l[t + 1]]
        flow_bwd[t] = vb
        ok = pure_l[t + 1] & _footprint_ok(xs + vb[..., 0], ys + vb[..., 1], labels_l[t + 1],
                                           labels_l[t], pure_l[t])
        occ_bwd[t] = ~ok

    return GroundTruthBundle(
        left_images=np.stack(left),
        right_images=np.stack(right),
        disparity=disparity.astype(np.float32),
        flow_fwd=flow_fwd.astype(np.float32),
        flow_bwd=flow_bwd.astype(np.float32),
        occlusion_stereo=occ_stereo,
        occlusion_fwd=occ_fwd,
        occlusion_bwd=occ_bwd,
        config=config,
        seed=int(seed),
    )


def split_dataset(n_sequences: int, seed: int, config: SceneConfig | None = None,
                  eval_fraction: float = 0.2):
    """Deterministic disjoint train/eval split of ``(config, seed)`` pairs."""
    if n_sequences < 2:
        raise ValueError(f"need at least 2 sequences to split, got {n_sequences}")
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n_sequences, replace=False)
    n_eval = min(max(1, int(round(n_sequences * eval_fraction))), n_sequences - 1)
    pairs = [(config, int(s)) for s in seeds]
    return pairs[:n_sequences - n_eval], pairs[n_sequences - n_eval:]


# ----------------------------------------------------------------------------
# On-disk layout
# ----------------------------------------------------------------------------

_FRAME_DIRS = {
    "left": ("left_images", io_formats.write_image, io_formats.read_image, ".png"),
    "right": ("right_images", io_formats.write_image, io_formats.read_image, ".png"),
    "disparity": ("disparity", io_formats.write_pfm, io_formats.read_pfm, ".pfm"),
    "flow_fwd": ("flow_fwd", io_formats.write_flo, io_formats.read_flo, ".flo"),
    "flow_bwd": ("flow_bwd", io_formats.write_flo, io_formats.read_flo, ".flo"),
    "occlusion_stereo": ("occlusion_stereo", io_formats.write_mask, io_formats.read_mask, ".png"),
    "occlusion_fwd": ("occlusion_fwd", io_formats.write_mask, io_formats.read_mask, ".png"),
    "occlusion_bwd": ("occlusion_bwd", io_formats.write_mask, io_formats.read_mask, ".png"),
}


def write_bundle(bundle: GroundTruthBundle, directory: str | os.PathLike) -> Path:
    """Persist a bundle as ``<dir>/<kind>/<frame:06d>.<ext>`` plus ``manifest.json``.

    Images are stored as 8-bit PNG, so reading back quantizes them to 1/255.
    """
    root = Path(directory)
    for sub, (attr, writer, _, ext) in _FRAME_DIRS.items():
        (root / sub).mkdir(parents=True, exist_ok=True)
        for i, arr in enumerate(getattr(bundle, attr)):
            writer(root / sub / f"{i:06d}{ext}", arr)
    manifest = {
        "format": "vidstereo-bundle",
        "version": 1,
        "frames": bundle.frames,
        "height": int(bundle.left_images.shape[1]),
        "width": int(bundle.left_images.shape[2]),
        "seed": bundle.seed,
        "scene_config": bundle.config.to_dict() if bundle.config else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_bundle(directory: str | os.PathLike) -> GroundTruthBundle:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    T = manifest["frames"]
    kw = {}
    for sub, (attr, _, reader, ext) in _FRAME_DIRS.items():
        n = T if sub in ("left", "right", "disparity", "occlusion_stereo") else T - 1
        kw[attr] = np.stack([reader(root / sub / f"{i:06d}{ext}") for i in range(n)])
    cfg = manifest.get("scene_config")
    return GroundTruthBundle(
        config=SceneConfig.from_dict(cfg) if cfg else None,
        seed=manifest.get("seed"),
        **kw,
    )
