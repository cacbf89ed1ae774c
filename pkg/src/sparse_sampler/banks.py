"""Per-pixel sample populations drawn from a scene's noise model.

A materialized SampleBank holds a power-of-two number of samples per pixel,
mirroring pre-rendered sample sets. A StreamingBank draws the same values
lazily, which is what the optimization loop uses (it rarely needs more than
a couple of samples per pixel per frame).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .images import RadianceImage, read_pfm, write_pfm
from .scenes import SceneSpec, builtin_scene, draw_sample

MAX_BANK_SAMPLES = 256


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class SampleBank:
    samples: np.ndarray  # (H, W, S, 3)
    seed: int
    scene_name: str = ""
    _csum: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 4 or self.samples.shape[3] != 3:
            raise ValueError("bank samples must have shape (H, W, S, 3)")
        if not _is_pow2(self.samples.shape[2]):
            raise ValueError("sample count must be a power of two")
        if not np.isfinite(self.samples).all() or (self.samples < 0).any():
            raise ValueError("samples must be finite and non-negative")

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def count(self) -> int:
        return self.samples.shape[2]

    @property
    def capacity(self) -> int:
        return self.count

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=2)

    def prefix_sum(self, counts: np.ndarray) -> np.ndarray:
        """Per-pixel sum of the first counts[y, x] samples, (H, W, 3)."""
        if self._csum is None:
            csum = np.zeros((self.height, self.width, self.count + 1, 3))
            np.cumsum(self.samples, axis=2, out=csum[:, :, 1:])
            self._csum = csum
        idx = np.asarray(counts, dtype=np.intp)[:, :, None, None]
        return np.take_along_axis(self._csum, idx, axis=2)[:, :, 0]

    def sample_at(self, index: np.ndarray) -> np.ndarray:
        """Per-pixel sample at position index[y, x], (H, W, 3)."""
        idx = np.asarray(index, dtype=np.intp)[:, :, None, None]
        return np.take_along_axis(self.samples, idx, axis=2)[:, :, 0]


class StreamingBank:
    """Bank view that draws samples on demand from a scene's noise model.

    Identical values to generate_bank(scene, S, seed, frame) at the same
    indices; draws are cached per index.
    """

    def __init__(self, scene: SceneSpec, seed: int, frame: int = 0,
                 capacity: int = MAX_BANK_SAMPLES):
        self.scene = scene
        self.seed = seed
        self.frame = frame
        self.capacity = capacity
        self.width = scene.width
        self.height = scene.height
        self._draws: dict[int, np.ndarray] = {}

    def _draw(self, j: int) -> np.ndarray:
        if j not in self._draws:
            if j >= self.capacity:
                raise IndexError(f"sample index {j} exceeds capacity {self.capacity}")
            self._draws[j] = draw_sample(self.scene, self.frame, self.seed, j)
        return self._draws[j]

    def prefix_sum(self, counts: np.ndarray) -> np.ndarray:
        counts = np.asarray(counts)
        out = np.zeros((self.height, self.width, 3))
        for j in range(int(counts.max(initial=0))):
            mask = counts > j
            if not mask.any():
                break
            out[mask] += self._draw(j)[mask]
        return out

    def sample_at(self, index: np.ndarray) -> np.ndarray:
        index = np.asarray(index)
        out = np.zeros((self.height, self.width, 3))
        for j in range(int(index.min(initial=0)), int(index.max(initial=0)) + 1):
            mask = index == j
            if mask.any():
                out[mask] = self._draw(j)[mask]
        return out

    def mean(self) -> np.ndarray:
        return self.scene.ground_truth.data


def generate_bank(scene: SceneSpec, count: int, seed: int, frame: int = 0) -> SampleBank:
    """Materialize `count` i.i.d. samples per pixel (count a power of two)."""
    if not _is_pow2(count) or count > MAX_BANK_SAMPLES:
        raise ValueError(f"sample count must be a power of two <= {MAX_BANK_SAMPLES}")
    samples = np.stack([draw_sample(scene, frame, seed, j) for j in range(count)], axis=2)
    return SampleBank(samples, seed, scene.name)


def take(bank: SampleBank, pixel: tuple[int, int], n: int, offset: int = 0) -> np.ndarray:
    """Samples [offset, offset + n) at pixel (x, y); disjoint ranges are
    independent draws."""
    x, y = pixel
    if offset < 0 or n < 0 or offset + n > bank.count:
        raise ValueError(f"take range [{offset}, {offset + n}) exceeds bank of {bank.count}")
    return bank.samples[y, x, offset:offset + n]


# ---------------------------------------------------------------------------
# Persistence: one PFM slice per sample index plus a manifest


def save_bank(bank: SampleBank, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for j in range(bank.count):
        write_pfm(RadianceImage(bank.samples[:, :, j]),
                  os.path.join(out_dir, f"sample_{j:04d}.pfm"))
    with open(os.path.join(out_dir, "bank.txt"), "w") as f:
        f.write(f"width = {bank.width}\n")
        f.write(f"height = {bank.height}\n")
        f.write(f"count = {bank.count}\n")
        f.write(f"seed = {bank.seed}\n")
        f.write(f"scene = {bank.scene_name}\n")


def load_bank(path) -> SampleBank:
    meta = {}
    with open(os.path.join(path, "bank.txt")) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    count = int(meta["count"])
    slices = [read_pfm(os.path.join(path, f"sample_{j:04d}.pfm")).data
              for j in range(count)]
    return SampleBank(np.stack(slices, axis=2), int(meta["seed"]), meta["scene"])
