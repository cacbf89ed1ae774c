"""HDR/LDR image containers, motion warping, and PFM/PNG file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


@dataclass
class RadianceImage:
    """Linear HDR radiance, 3 channels, finite and non-negative."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("radiance image must have shape (H, W, 3)")
        if not np.isfinite(self.data).all():
            raise ValueError("radiance values must be finite")
        if (self.data < 0).any():
            raise ValueError("radiance values must be non-negative")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class LdrImage:
    """Display-referred values in [0, 1], 3 channels."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("LDR image must have shape (H, W, 3)")
        if (self.data < 0).any() or (self.data > 1).any():
            raise ValueError("LDR values must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass
class MotionField:
    """Per-pixel displacement in pixels, current frame -> previous frame."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("motion field must have shape (H, W, 2)")
        if not np.isfinite(self.data).all():
            raise ValueError("motion values must be finite")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def zero_motion(width: int, height: int) -> MotionField:
    return MotionField(np.zeros((height, width, 2)))


# ---------------------------------------------------------------------------
# Warping


def warp_array(prev: np.ndarray, motion: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp `prev` (H, W, C) by `motion` (H, W, 2).

    Each output pixel samples prev at (x + mx, y + my) with bilinear
    interpolation. Taps outside the frame contribute zero; the returned
    validity is the in-bounds bilinear weight sum (1 fully valid, 0 fully
    disoccluded).
    """
    if prev.shape[:2] != motion.shape[:2]:
        raise ValueError("warp: image and motion dimensions must match")
    h, w = prev.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = xs + motion[:, :, 0]
    sy = ys + motion[:, :, 1]

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros(prev.shape, dtype=np.float64)
    validity = np.zeros((h, w), dtype=np.float64)
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        tx = x0 + dx
        ty = y0 + dy
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        wi = np.where(inside, wt, 0.0)
        ix = np.clip(tx, 0, w - 1).astype(np.intp)
        iy = np.clip(ty, 0, h - 1).astype(np.intp)
        out += wi[:, :, None] * prev[iy, ix]
        validity += wi
    return out, validity


def warp_backward(grad_out: np.ndarray, motion: np.ndarray) -> np.ndarray:
    """Transpose of warp_array with respect to the previous image."""
    h, w = grad_out.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = xs + motion[:, :, 0]
    sy = ys + motion[:, :, 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0

    grad_prev = np.zeros(grad_out.shape, dtype=np.float64)
    flat = grad_prev.reshape(h * w, -1)
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        tx = x0 + dx
        ty = y0 + dy
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        wi = np.where(inside, wt, 0.0)
        idx = (np.clip(ty, 0, h - 1).astype(np.intp) * w
               + np.clip(tx, 0, w - 1).astype(np.intp))
        np.add.at(flat, idx.ravel(), (wi[:, :, None] * grad_out).reshape(h * w, -1))
    return grad_prev


def warp(prev: RadianceImage, motion: MotionField) -> tuple[RadianceImage, np.ndarray]:
    """Warp a radiance image; returns (warped, validity)."""
    out, validity = warp_array(prev.data, motion.data)
    return RadianceImage(out), validity


# ---------------------------------------------------------------------------
# PFM (portable float map), 3-channel binary HDR format


def write_pfm(image: RadianceImage, path) -> None:
    """Write 3-channel PFM, little-endian, bottom-up row order."""
    data = image.data.astype("<f4")
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{image.width} {image.height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data[::-1].tobytes())


def read_pfm(path) -> RadianceImage:
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic == b"Pf":
            raise ValueError("non-3-channel PFM file (grayscale 'Pf')")
        if magic != b"PF":
            raise ValueError(f"malformed PFM header: bad magic {magic!r}")
        try:
            width = int(_read_token(f))
            height = int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as exc:
            raise ValueError(f"malformed PFM header: {exc}") from exc
        if width <= 0 or height <= 0:
            raise ValueError("malformed PFM header: non-positive dimensions")
        endian = "<" if scale < 0 else ">"
        count = width * height * 3
        payload = f.read(count * 4)
        if len(payload) != count * 4:
            raise ValueError("truncated PFM payload")
        data = np.frombuffer(payload, dtype=f"{endian}f4").reshape(height, width, 3)
    return RadianceImage(data[::-1].astype(np.float64))


def _read_token(f) -> bytes:
    # whitespace-delimited header token
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("malformed PFM header: unexpected end of file")
        if c in b" \t\r\n":
            if tok:
                return tok
            continue
        tok += c


# ---------------------------------------------------------------------------
# PNG


def write_png_srgb(image: LdrImage, path) -> None:
    """8-bit RGB PNG; v maps to round(v * 255), half away from zero."""
    quantized = np.floor(image.data * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def read_png_srgb(path) -> LdrImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return LdrImage(arr / 255.0)


def write_png_gray16(values: np.ndarray, path) -> None:
    """16-bit grayscale PNG of non-negative integers < 65536."""
    arr = np.asarray(values)
    if (arr < 0).any() or (arr > 0xFFFF).any():
        raise ValueError("values out of 16-bit range")
    Image.fromarray(arr.astype(np.uint16), mode="I;16").save(path, format="PNG")


def read_png_gray16(path) -> np.ndarray:
    img = Image.open(path)
    return np.asarray(img, dtype=np.int64)
