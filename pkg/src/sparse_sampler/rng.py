"""Counter-based deterministic RNG keyed by (seed, frame, pixel, stream).

Every random decision in the toolkit flows through this module so that runs
are reproducible under any evaluation order: the variate for a pixel depends
only on its key, never on how many variates were drawn before it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

# Stream ids. Distinct streams over the same (seed, frame, pixel) are
# decorrelated by the hash.
STREAM_ALLOC = 0
STREAM_TAKE = 1
STREAM_SAMPLE_BASE = 16  # sample j, channel c -> STREAM_SAMPLE_BASE + 3*j + c

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_INV53 = 1.0 / float(1 << 53)


@dataclass(frozen=True)
class PixelRngKey:
    seed: int
    frame: int
    x: int
    y: int
    stream: int


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; full avalanche over 64 bits, wrapping intended
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _hash_words(seed, frame, x, y, stream) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed) + _GOLD)
        for w in (frame, x, y, stream):
            h = _mix(h ^ (np.asarray(w, dtype=np.uint64) * _GOLD + _GOLD))
    return h


def pixel_uniform(key: PixelRngKey) -> float:
    """Deterministic variate in [0, 1) for one pixel key."""
    h = _hash_words(key.seed, key.frame, key.x, key.y, key.stream)
    return float(h >> np.uint64(11)) * _INV53


def uniform_grid(seed: int, frame: int, width: int, height: int, stream: int) -> np.ndarray:
    """(height, width) array of variates, one per pixel, same values as
    calling pixel_uniform on each (x, y)."""
    xs = np.arange(width, dtype=np.uint64)[None, :]
    ys = np.arange(height, dtype=np.uint64)[:, None]
    h = _hash_words(seed, frame, xs, ys, stream)
    return (h >> np.uint64(11)).astype(np.float64) * _INV53


def normal_grid(seed: int, frame: int, width: int, height: int, stream: int) -> np.ndarray:
    """Standard normal variates via the inverse CDF of a uniform grid."""
    u = uniform_grid(seed, frame, width, height, stream)
    # ndtri(0) is -inf; nudge into the open interval
    return ndtri(np.clip(u, 1e-16, 1.0 - 1e-16))


def uniform_grid_batch(seed: int, frames: np.ndarray, width: int, height: int,
                       stream: int) -> np.ndarray:
    """(K, height, width) of variates for a batch of frame indices; matches
    uniform_grid frame by frame."""
    fs = np.asarray(frames, dtype=np.uint64)[:, None, None]
    xs = np.arange(width, dtype=np.uint64)[None, None, :]
    ys = np.arange(height, dtype=np.uint64)[None, :, None]
    h = _hash_words(seed, fs, xs, ys, stream)
    return (h >> np.uint64(11)).astype(np.float64) * _INV53


def normal_grid_batch(seed: int, frames: np.ndarray, width: int, height: int,
                      stream: int) -> np.ndarray:
    u = uniform_grid_batch(seed, frames, width, height, stream)
    return ndtri(np.clip(u, 1e-16, 1.0 - 1e-16))
