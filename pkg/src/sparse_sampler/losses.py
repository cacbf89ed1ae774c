"""Training losses (masked spatial, temporal, max-combined), evaluation
metrics, and the error-versus-density robustness analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from scipy.ndimage import sobel

MASK_KINDS = ("uniform", "gradmag")
TEMPORAL_WEIGHT = 1.25


@dataclass
class MaskImage:
    """Per-pixel loss weight, non-negative, mean normalized to 1."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.isfinite(self.weights).all() or (self.weights < 0).any():
            raise ValueError("mask weights must be finite and non-negative")
        if abs(self.weights.mean() - 1.0) > 1e-6:
            raise ValueError("mask mean must be normalized to 1")


@dataclass
class LossReport:
    spatial: float
    temporal: float
    combined: float
    combined_map: np.ndarray


def make_mask(kind: str, ref: np.ndarray) -> MaskImage:
    """Perceptual masking stand-in. "uniform" weighs all pixels equally;
    "gradmag" downweights errors in high-contrast texture using a 3x3 Sobel
    gradient magnitude of the reference."""
    ref = np.asarray(ref, dtype=np.float64)
    if kind == "uniform":
        return MaskImage(np.ones(ref.shape[:2]))
    if kind == "gradmag":
        luma = ref.mean(axis=-1)
        gx = sobel(luma, axis=1, mode="nearest")
        gy = sobel(luma, axis=0, mode="nearest")
        m = 1.0 / (1.0 + np.hypot(gx, gy))
        return MaskImage(m / m.mean())
    raise ValueError(f"unknown mask kind {kind!r}")


def spatial_loss(out: np.ndarray, ref: np.ndarray,
                 mask: MaskImage) -> tuple[np.ndarray, float]:
    """Masked mean absolute error; per-pixel map and its pixel mean."""
    if out.shape != ref.shape:
        raise ValueError("spatial loss: image dimensions must match")
    per_pixel = np.abs(out - ref).mean(axis=-1) * mask.weights
    return per_pixel, float(per_pixel.mean())


def temporal_loss(out_t: np.ndarray, out_warped_prev: np.ndarray,
                  ref_t: np.ndarray, ref_warped_prev: np.ndarray,
                  validity: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Frame-to-frame inconsistency: |(out_t - warped out) - (ref_t - warped
    ref)|. Pixels with invalid warp history are excluded from the mean."""
    for arr in (out_warped_prev, ref_t, ref_warped_prev):
        if arr.shape != out_t.shape:
            raise ValueError("temporal loss: image dimensions must match")
    delta = (out_t - out_warped_prev) - (ref_t - ref_warped_prev)
    per_pixel = np.abs(delta).mean(axis=-1)
    if validity is not None:
        valid = validity >= 1.0
        per_pixel = np.where(valid, per_pixel, 0.0)
        denom = max(int(valid.sum()), 1)
        return per_pixel, float(per_pixel.sum() / denom)
    return per_pixel, float(per_pixel.mean())


def combined_loss(spatial_map: np.ndarray,
                  temporal_map: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel max of the spatial term and 1.25x the temporal term."""
    if spatial_map.shape != temporal_map.shape:
        raise ValueError("combined loss: map dimensions must match")
    per_pixel = np.maximum(TEMPORAL_WEIGHT * temporal_map, spatial_map)
    return per_pixel, float(per_pixel.mean())


def loss_report(out_t, out_warped_prev, ref_t, ref_warped_prev, mask,
                validity=None) -> LossReport:
    sp_map, sp = spatial_loss(out_t, ref_t, mask)
    tm_map, tm = temporal_loss(out_t, out_warped_prev, ref_t, ref_warped_prev, validity)
    cb_map, cb = combined_loss(sp_map, tm_map)
    return LossReport(sp, tm, cb, cb_map)


# ---------------------------------------------------------------------------
# Metrics


def mae(out: np.ndarray, ref: np.ndarray) -> float:
    if out.shape != ref.shape:
        raise ValueError("mae: image dimensions must match")
    return float(np.abs(out - ref).mean())


def psnr(out: np.ndarray, ref: np.ndarray) -> float:
    """10 * log10(1 / MSE) with unit peak; infinity for identical images."""
    if out.shape != ref.shape:
        raise ValueError("psnr: image dimensions must match")
    mse = float(((out - ref) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# Error versus sampling-ratio analysis


@dataclass
class DensityBin:
    lo: float
    hi: float
    count: int
    mae: float


def density_bins(density_spp: np.ndarray, budget: float, bins: int) -> np.ndarray:
    """Log-scale bin edges over the observed sampling-ratio range."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    ratio = density_spp / budget
    lo, hi = float(ratio.min()), float(ratio.max())
    pad = 1e-9
    return np.geomspace(lo * (1 - pad) if lo > 0 else pad, hi * (1 + pad), bins + 1)


def error_vs_density(err_map: np.ndarray, density_spp: np.ndarray,
                     budget: float, bins: int,
                     edges: np.ndarray | None = None) -> list[DensityBin]:
    """Bucket per-pixel absolute error by sampling ratio (density / budget)
    on a log scale; empty bins are reported with count 0."""
    if edges is None:
        edges = density_bins(density_spp, budget, bins)
    ratio = (density_spp / budget).ravel()
    err = err_map.ravel()
    idx = np.clip(np.searchsorted(edges, ratio, side="right") - 1, 0, len(edges) - 2)
    rows = []
    for b in range(len(edges) - 1):
        sel = idx == b
        n = int(sel.sum())
        rows.append(DensityBin(float(edges[b]), float(edges[b + 1]), n,
                               float(err[sel].mean()) if n else 0.0))
    return rows


def write_error_vs_density_csv(rows: list[DensityBin], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "pixel_count", "mae"])
        for r in rows:
            w.writerow([repr(r.lo), repr(r.hi), r.count, repr(r.mae)])
