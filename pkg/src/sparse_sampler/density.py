"""Sample density maps: budget-normalized densities, blue-noise dither masks,
and discretization into integer counts plus a fractional holdout decision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import write_png_gray16, read_png_gray16
from .rng import STREAM_ALLOC, uniform_grid

UNIFORM_FRACTION = 1.0 / 8.0  # share of the budget spread uniformly
MASK_SIZES = (16, 32, 64, 128)


@dataclass
class DensityMap:
    spp: np.ndarray  # (H, W) continuous samples per pixel
    budget: float

    def __post_init__(self):
        self.spp = np.asarray(self.spp, dtype=np.float64)
        if self.spp.ndim != 2:
            raise ValueError("density map must be 2-D")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        total = self.budget * self.spp.size
        if abs(self.spp.sum() - total) > 1e-4 * total:
            raise ValueError("density does not sum to the frame budget")
        if (self.spp < self.budget / 8.0 * (1 - 1e-12)).any():
            raise ValueError("density below the uniform floor budget/8")

    @property
    def width(self) -> int:
        return self.spp.shape[1]

    @property
    def height(self) -> int:
        return self.spp.shape[0]


def softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """Gradient through a frame-global softmax: w * (g - sum(w * g))."""
    inner = (weights * grad_weights).sum()
    return weights * (grad_weights - inner)


def normalize_density(scores: np.ndarray, budget: float) -> DensityMap:
    """Map unnormalized scores to densities: a uniform floor of budget/8 plus
    7/8 of the budget distributed by a frame-global softmax."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if budget <= 0:
        raise ValueError("budget must be positive")
    adaptive = (1.0 - UNIFORM_FRACTION) * budget * scores.size
    spp = UNIFORM_FRACTION * budget + adaptive * softmax(scores)
    return DensityMap(spp, budget)


def uniform_density(width: int, height: int, budget: float) -> DensityMap:
    return normalize_density(np.zeros((height, width)), budget)


# ---------------------------------------------------------------------------
# Void-and-cluster dither mask


@dataclass
class DitherMask:
    rank: np.ndarray  # (T, T) permutation of 0 .. T*T-1

    def __post_init__(self):
        self.rank = np.asarray(self.rank, dtype=np.int64)
        t = self.rank.shape[0]
        if self.rank.shape != (t, t):
            raise ValueError("dither mask must be square")
        if not np.array_equal(np.sort(self.rank.ravel()), np.arange(t * t)):
            raise ValueError("rank must be a permutation of 0 .. T*T-1")

    @property
    def size(self) -> int:
        return self.rank.shape[0]


def _energy_kernel(t: int, sigma: float = 1.5) -> np.ndarray:
    """Toroidal Gaussian stamp centered at (0, 0)."""
    d = np.arange(t, dtype=np.float64)
    d = np.minimum(d, t - d)  # wrapped distance per axis
    dist2 = d[:, None] ** 2 + d[None, :] ** 2
    return np.exp(-dist2 / (2.0 * sigma * sigma))


def void_cluster_mask(size: int, seed: int) -> DitherMask:
    """Blue-noise rank mask via the void-and-cluster procedure.

    A random initial minority pattern is relaxed by moving the tightest
    cluster point into the largest void until stable (Gaussian energy,
    sigma 1.5 texels, toroidal wrap). Ranks below the initial count come
    from iterated tightest-cluster removal; the rest from repeated
    largest-void insertion.
    """
    if size not in MASK_SIZES:
        raise ValueError(f"mask size must be one of {MASK_SIZES}")
    n = size * size
    kernel = _energy_kernel(size)

    # deterministic initial pattern: lowest hashed values become minority points
    u = uniform_grid(seed, 0, size, size, stream=0)
    ones = max(1, n // 10)
    pattern = np.zeros((size, size), dtype=bool)
    flat_order = np.argsort(u, axis=None, kind="stable")
    pattern.ravel()[flat_order[:ones]] = True

    energy = np.zeros((size, size))
    for y, x in zip(*np.nonzero(pattern)):
        energy += np.roll(kernel, (y, x), axis=(0, 1))

    def stamp(y, x, sign):
        energy.__iadd__(sign * np.roll(kernel, (y, x), axis=(0, 1)))

    # relaxation: remove tightest cluster, reinsert into largest void
    for _ in range(n):
        cy, cx = np.unravel_index(np.where(pattern, energy, -np.inf).argmax(), pattern.shape)
        pattern[cy, cx] = False
        stamp(cy, cx, -1.0)
        vy, vx = np.unravel_index(np.where(pattern, np.inf, energy).argmin(), pattern.shape)
        pattern[vy, vx] = True
        stamp(vy, vx, 1.0)
        if (vy, vx) == (cy, cx):
            break

    rank = np.empty((size, size), dtype=np.int64)

    # phase 1: rank the prototype pattern by removing tightest clusters
    work = pattern.copy()
    wenergy = energy.copy()
    for r in range(ones - 1, -1, -1):
        cy, cx = np.unravel_index(np.where(work, wenergy, -np.inf).argmax(), work.shape)
        work[cy, cx] = False
        wenergy -= np.roll(kernel, (cy, cx), axis=(0, 1))
        rank[cy, cx] = r

    # phases 2+3: insert into the largest void until full. On a torus the
    # zero-pattern energy is a constant minus the one-pattern energy, so the
    # same argmin rule covers both halves.
    work = pattern.copy()
    wenergy = energy.copy()
    for r in range(ones, n):
        vy, vx = np.unravel_index(np.where(work, np.inf, wenergy).argmin(), work.shape)
        work[vy, vx] = True
        wenergy += np.roll(kernel, (vy, vx), axis=(0, 1))
        rank[vy, vx] = r

    return DitherMask(rank)


def save_mask(mask: DitherMask, path) -> None:
    write_png_gray16(mask.rank, path)


def load_mask(path) -> DitherMask:
    return DitherMask(read_png_gray16(path))


# ---------------------------------------------------------------------------
# Discretization


TAKE_RULES = ("stochastic", "relaxed", "gumbel")


@dataclass
class SampleAllocation:
    base: np.ndarray   # floor(spp), int
    frac: np.ndarray   # fractional part in [0, 1)
    u: np.ndarray      # per-pixel variate in [0, 1)
    taken: np.ndarray  # holdout decision under the requested take-rule

    @property
    def width(self) -> int:
        return self.base.shape[1]

    @property
    def height(self) -> int:
        return self.base.shape[0]


def holdout_taken(rule: str, u: np.ndarray, frac: np.ndarray,
                  gumbel_temp: float = 1.0) -> np.ndarray:
    """Whether the fractional extra sample is computed under each rule."""
    if rule == "stochastic":
        return u < frac
    if rule == "relaxed":
        return (frac > 0) & (u >= 1.0 - frac)
    if rule == "gumbel":
        from .estimators import gumbel_gate  # local import, avoids a cycle
        return gumbel_gate(u, frac, gumbel_temp) > 1e-4
    raise ValueError(f"unknown take rule {rule!r}")


def allocate(density: DensityMap, mode: str = "stochastic",
             mask: DitherMask | None = None, frame: int = 0, seed: int = 0,
             rule: str = "stochastic", gumbel_temp: float = 1.0) -> SampleAllocation:
    """Split the density into integer counts and a holdout variate.

    mode "stochastic" draws u per pixel from the allocation stream; mode
    "dithered" derives u from the tiled rank mask, shifted per frame by a
    fixed toroidal stride so consecutive frames decorrelate.
    """
    spp = density.spp
    base = np.floor(spp).astype(np.int64)
    frac = spp - base
    if mode == "stochastic":
        u = uniform_grid(seed, frame, density.width, density.height, STREAM_ALLOC)
    elif mode == "dithered":
        if mask is None:
            raise ValueError("dithered allocation requires a mask")
        t = mask.size
        ys, xs = np.meshgrid(np.arange(density.height), np.arange(density.width),
                             indexing="ij")
        sy, sx = (frame * 7) % t, (frame * 13) % t
        u = (mask.rank[(ys + sy) % t, (xs + sx) % t] + 0.5) / (t * t)
    else:
        raise ValueError(f"unknown allocation mode {mode!r}")
    return SampleAllocation(base, frac, u, holdout_taken(rule, u, frac, gumbel_temp))
