"""Differentiable filmic tonemapping: log-space augmentations, a piecewise
toe/linear/shoulder curve with bounded derivative, and sRGB encoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import LdrImage, RadianceImage

LOG_FLOOR = 1e-8  # radiance clamp before the log


@dataclass
class TmoParams:
    exposure: float = 0.0    # additive offset in log space
    contrast: float = 1.0    # multiplicative scale, > 0
    saturation: float = 1.0  # scalar chroma gain around the log-RGB mean, > 0
    toe: float = 0.5         # shadow compression in (0, 1)
    shoulder: float = 0.5    # highlight compression in (0, 1)

    def __post_init__(self):
        if self.contrast <= 0 or self.saturation <= 0:
            raise ValueError("contrast and saturation must be positive")
        if not (0 < self.toe < 1 and 0 < self.shoulder < 1):
            raise ValueError("toe and shoulder must lie strictly inside (0, 1)")


def sample_tmo(seed: int) -> TmoParams:
    """Random operator from the augmentation ranges, deterministic per seed."""
    r = np.random.default_rng(seed)
    return TmoParams(exposure=r.uniform(-2.0, 2.0),
                     contrast=r.uniform(0.7, 1.4),
                     saturation=r.uniform(0.7, 1.3),
                     toe=r.uniform(0.1, 0.9),
                     shoulder=r.uniform(0.1, 0.9))


def log_augment(radiance: np.ndarray, p: TmoParams) -> np.ndarray:
    """Exposure/contrast/saturation in log space.

    c = log(max(L, 1e-8)); m = per-pixel channel mean of c;
    x = contrast * (m + saturation * (c - m) + exposure).
    """
    c = np.log(np.maximum(radiance, LOG_FLOOR))
    m = c.mean(axis=-1, keepdims=True)
    return p.contrast * (m + p.saturation * (c - m) + p.exposure)


def filmic(x: np.ndarray, toe: float, shoulder: float) -> np.ndarray:
    """Three-piece curve: exponential toe, linear mid, exponential shoulder.

    Continuous and C1 at both breakpoints x = toe-1 and x = 1-shoulder;
    output in (0, 1) for finite inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = x < toe - 1.0
    hi = x >= 1.0 - shoulder
    out = 0.5 * (1.0 + x)
    out = np.where(lo, 0.5 * toe * np.exp(np.minimum((x + 1.0 - toe) / toe, 0.0)), out)
    out = np.where(hi, 1.0 - 0.5 * shoulder
                   * np.exp(np.minimum(-(x + shoulder - 1.0) / shoulder, 0.0)), out)
    return out


def filmic_derivative(x: np.ndarray, toe: float, shoulder: float) -> np.ndarray:
    """dy/dx of the filmic curve; lies in (0, 1/2], hitting 1/2 only on the
    linear piece and at the joints."""
    x = np.asarray(x, dtype=np.float64)
    lo = x < toe - 1.0
    hi = x >= 1.0 - shoulder
    d = np.full(x.shape, 0.5)
    d = np.where(lo, 0.5 * np.exp(np.minimum((x + 1.0 - toe) / toe, 0.0)), d)
    d = np.where(hi, 0.5 * np.exp(np.minimum(-(x + shoulder - 1.0) / shoulder, 0.0)), d)
    return d


def srgb_encode(v: np.ndarray) -> np.ndarray:
    """Standard piecewise sRGB transfer function on [0, 1]."""
    v = np.asarray(v, dtype=np.float64)
    lin = v * 12.92
    # clip guards the fractional power against tiny negatives from upstream
    gam = 1.055 * np.power(np.clip(v, 0.0, None), 1.0 / 2.4) - 0.055
    return np.where(v <= 0.0031308, lin, gam)


def srgb_derivative(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    gam = (1.055 / 2.4) * np.power(np.clip(v, 1e-300, None), 1.0 / 2.4 - 1.0)
    return np.where(v <= 0.0031308, 12.92, gam)


def tonemap_array(radiance: np.ndarray, p: TmoParams) -> np.ndarray:
    return srgb_encode(filmic(log_augment(radiance, p), p.toe, p.shoulder))


def tonemap(radiance: RadianceImage, p: TmoParams) -> LdrImage:
    return LdrImage(tonemap_array(radiance.data, p))


def tonemap_backward(radiance: np.ndarray, p: TmoParams,
                     upstream: np.ndarray) -> np.ndarray:
    """Gradient of the tonemapped output with respect to linear radiance.

    Chains sRGB', the filmic derivative, the saturation mixing Jacobian
    (x_c couples all channels through the log mean), and the log clamp.
    """
    c = np.log(np.maximum(radiance, LOG_FLOOR))
    m = c.mean(axis=-1, keepdims=True)
    x = p.contrast * (m + p.saturation * (c - m) + p.exposure)
    y = filmic(x, p.toe, p.shoulder)

    gx = upstream * srgb_derivative(y) * filmic_derivative(x, p.toe, p.shoulder)
    # dx_c/dc_j = contrast * (saturation * delta_cj + (1 - saturation) / 3)
    gc = p.contrast * (p.saturation * gx
                       + (1.0 - p.saturation) / 3.0 * gx.sum(axis=-1, keepdims=True))
    return np.where(radiance > LOG_FLOOR, gc / np.maximum(radiance, LOG_FLOOR), 0.0)
