"""Synthetic Monte Carlo scenes: ground truth plus per-pixel noise models.

Scenes stand in for a renderer. Per-pixel sample distributions are
constructed so their mean equals the ground truth exactly, which lets
estimator tests separate estimator bias from scene bias.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .images import MotionField, RadianceImage, read_pfm, write_pfm, zero_motion
from .rng import STREAM_SAMPLE_BASE, normal_grid, uniform_grid

NOISE_FAMILIES = ("gaussian-clamped", "lognormal", "two-point")
BUILTIN_SCENES = ("flat", "edge", "checker-spike", "hetero-gradient")

# gaussian-clamped draws are clipped to +-3 sigma (symmetric, so mean-exact)
_CLIP = 3.0


@dataclass
class NoiseModel:
    family: str
    scale: np.ndarray  # (H, W), >= 0, finite
    spike_prob: float = 0.05  # two-point family only

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if not np.isfinite(self.scale).all() or (self.scale < 0).any():
            raise ValueError("noise scale must be finite and non-negative")
        if not 0 < self.spike_prob <= 1:
            raise ValueError("spike probability must lie in (0, 1]")


@dataclass
class SceneSpec:
    name: str
    ground_truth: RadianceImage
    noise: NoiseModel
    albedo: RadianceImage
    motion: MotionField
    frames: int = 2

    def __post_init__(self):
        if (self.albedo.data > 1).any():
            raise ValueError("albedo must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.ground_truth.width

    @property
    def height(self) -> int:
        return self.ground_truth.height


def draw_sample(scene: SceneSpec, frame: int, seed: int, index: int) -> np.ndarray:
    """One i.i.d. radiance sample per pixel, (H, W, 3).

    Deterministic in (seed, frame, index) through per-pixel RNG streams, so a
    materialized bank and on-the-fly draws produce identical values.
    """
    gt = scene.ground_truth.data
    h, w = gt.shape[:2]
    scale = scene.noise.scale
    base = STREAM_SAMPLE_BASE + 3 * index
    fam = scene.noise.family
    if fam == "lognormal":
        out = np.empty_like(gt)
        for c in range(3):
            z = normal_grid(seed, frame, w, h, base + c)
            out[:, :, c] = gt[:, :, c] * np.exp(scale * z - 0.5 * scale * scale)
        return out
    if fam == "gaussian-clamped":
        out = np.empty_like(gt)
        for c in range(3):
            z = np.clip(normal_grid(seed, frame, w, h, base + c), -_CLIP, _CLIP)
            eff = np.minimum(scale, gt[:, :, c] / _CLIP)
            out[:, :, c] = gt[:, :, c] + eff * z
        return out
    # two-point spike: one decision per pixel, all channels fire together
    q = scene.noise.spike_prob
    u = uniform_grid(seed, frame, w, h, base)
    return np.where((u < q)[:, :, None], gt / q, 0.0)


def draw_sample_batch(scene: SceneSpec, frames: np.ndarray, seed: int,
                      index: int) -> np.ndarray:
    """draw_sample for a batch of frames at once, (K, H, W, 3)."""
    from .rng import normal_grid_batch, uniform_grid_batch

    gt = scene.ground_truth.data
    h, w = gt.shape[:2]
    k = len(frames)
    scale = scene.noise.scale
    base = STREAM_SAMPLE_BASE + 3 * index
    fam = scene.noise.family
    if fam == "lognormal":
        out = np.empty((k, h, w, 3))
        for c in range(3):
            z = normal_grid_batch(seed, frames, w, h, base + c)
            out[:, :, :, c] = gt[:, :, c] * np.exp(scale * z - 0.5 * scale * scale)
        return out
    if fam == "gaussian-clamped":
        out = np.empty((k, h, w, 3))
        for c in range(3):
            z = np.clip(normal_grid_batch(seed, frames, w, h, base + c), -_CLIP, _CLIP)
            eff = np.minimum(scale, gt[:, :, c] / _CLIP)
            out[:, :, :, c] = gt[:, :, c] + eff * z
        return out
    q = scene.noise.spike_prob
    u = uniform_grid_batch(seed, frames, w, h, base)
    return np.where((u < q)[:, :, :, None], gt / q, 0.0)


def noise_std(scene: SceneSpec) -> np.ndarray:
    """Analytic per-pixel, per-channel standard deviation of one sample."""
    gt = scene.ground_truth.data
    scale = scene.noise.scale[:, :, None]
    fam = scene.noise.family
    if fam == "lognormal":
        return gt * np.sqrt(np.expm1(scale * scale))
    if fam == "gaussian-clamped":
        eff = np.minimum(scale, gt / _CLIP)
        # variance of a +-c clipped standard normal
        var_clip = (1.0 - 2.0 * _CLIP * norm.pdf(_CLIP)
                    - 2.0 * norm.sf(_CLIP) * (1.0 - _CLIP * _CLIP))
        return eff * np.sqrt(var_clip)
    q = scene.noise.spike_prob
    return gt * np.sqrt((1.0 - q) / q)


# ---------------------------------------------------------------------------
# Built-in procedural scenes


def builtin_scene(name: str, width: int, height: int) -> SceneSpec:
    if name == "flat":
        gt = np.full((height, width, 3), 0.5)
        albedo = np.ones((height, width, 3))
        noise = NoiseModel("lognormal", np.full((height, width), 0.5))
    elif name == "edge":
        albedo = np.empty((height, width, 3))
        half = width // 2
        albedo[:, :half] = (0.15, 0.2, 0.3)
        albedo[:, half:] = (0.9, 0.8, 0.6)
        gt = albedo * 1.2
        noise = NoiseModel("lognormal", np.full((height, width), 0.4))
    elif name == "checker-spike":
        albedo = _checker(width, height, cell=max(2, min(width, height) // 16),
                          a=(0.85, 0.35, 0.25), b=(0.2, 0.45, 0.85))
        illum = np.full((height, width), 0.7)
        scale = np.full((height, width), 0.1)
        spike = _disk_mask(width, height, radius_frac=0.1)
        illum[spike] = 4.0
        scale[spike] = 1.2
        gt = albedo * illum[:, :, None]
        noise = NoiseModel("lognormal", scale)
    elif name == "hetero-gradient":
        ys = np.linspace(0.15, 0.9, height)[:, None]
        gt = np.empty((height, width, 3))
        gt[:, :, 0] = ys * 1.0
        gt[:, :, 1] = ys * 0.9
        gt[:, :, 2] = ys * 0.8
        albedo = np.clip(gt, 0.0, 1.0)
        # noise scale grows geometrically 100x from left to right edge
        xs = np.linspace(0.0, 1.0, width)[None, :]
        scale = 0.02 * np.power(100.0, xs) * np.ones((height, 1))
        noise = NoiseModel("lognormal", scale)
    else:
        raise ValueError(f"unknown scene {name!r}")
    return SceneSpec(name, RadianceImage(gt), noise, RadianceImage(albedo),
                     zero_motion(width, height))


def _checker(width, height, cell, a, b):
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    parity = ((ys // cell) + (xs // cell)) % 2
    out = np.where(parity[:, :, None] == 0, np.asarray(a), np.asarray(b))
    return out.astype(np.float64)


def _disk_mask(width, height, radius_frac):
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    cy, cx = 0.4 * height, 0.6 * width
    r = radius_frac * min(width, height)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r


# ---------------------------------------------------------------------------
# Persistence (scene directory: PFM images plus a key = value manifest)


def save_scene(scene: SceneSpec, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_pfm(scene.ground_truth, os.path.join(out_dir, "ground_truth.pfm"))
    write_pfm(scene.albedo, os.path.join(out_dir, "albedo.pfm"))
    write_pfm(RadianceImage(np.repeat(scene.noise.scale[:, :, None], 3, axis=2)),
              os.path.join(out_dir, "noise_scale.pfm"))
    with open(os.path.join(out_dir, "scene.txt"), "w") as f:
        f.write(f"name = {scene.name}\n")
        f.write(f"width = {scene.width}\n")
        f.write(f"height = {scene.height}\n")
        f.write(f"noise_family = {scene.noise.family}\n")
        f.write(f"spike_prob = {scene.noise.spike_prob!r}\n")
        f.write(f"frames = {scene.frames}\n")


def load_scene(path) -> SceneSpec:
    meta = {}
    with open(os.path.join(path, "scene.txt")) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    gt = read_pfm(os.path.join(path, "ground_truth.pfm"))
    albedo = read_pfm(os.path.join(path, "albedo.pfm"))
    scale = read_pfm(os.path.join(path, "noise_scale.pfm")).data[:, :, 0]
    noise = NoiseModel(meta["noise_family"], scale, float(meta["spike_prob"]))
    return SceneSpec(meta["name"], gt, noise, albedo,
                     zero_motion(gt.width, gt.height), int(meta["frames"]))
