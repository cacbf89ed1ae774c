"""Gather-based pyramidal reconstruction filter with exact backward passes.

The filter builds a 5-level average-pooled pyramid of the noisy input,
applies per-pixel 5x5 denoise gathers at every level, 2x2 gathers for
coarse-to-fine upsampling, and a 5x5 temporal gather from the warped
previous output at full resolution. All kernel groups at a level share one
per-pixel softmax, so the reconstruction is a convex combination of its
footprint. An optional per-pixel demodulation map divides the input before
filtering and multiplies the output after.

Forward calls return a tape holding the intermediates needed for the exact
chain-rule backward (gradients for every logit, the demodulation map, and
the input images).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .images import RadianceImage

LEVELS = 5
DENOISE_TAPS = 25
UPSAMPLE_TAPS = 4
TEMPORAL_TAPS = 25
DEMOD_FLOOR = 1e-3

OFFSETS5 = [(dy, dx) for dy in range(-2, 3) for dx in range(-2, 3)]


def level_dims(width: int, height: int) -> list[tuple[int, int]]:
    dims = [(height, width)]
    for _ in range(LEVELS - 1):
        h, w = dims[-1]
        dims.append(((h + 1) // 2, (w + 1) // 2))
    return dims


def kernel_channels(level: int) -> int:
    if level == 0:
        return DENOISE_TAPS + UPSAMPLE_TAPS + TEMPORAL_TAPS
    if level < LEVELS - 1:
        return DENOISE_TAPS + UPSAMPLE_TAPS
    return DENOISE_TAPS


@dataclass
class KernelField:
    """Per-level, per-pixel kernel logits.

    Channel layout per pixel: denoise taps, then upsample taps (levels with
    a coarser neighbor), then temporal taps (full resolution only).
    """

    logits: list[np.ndarray]

    def __post_init__(self):
        if len(self.logits) != LEVELS:
            raise ValueError(f"kernel field needs {LEVELS} levels")
        self.logits = [np.asarray(l, dtype=np.float64) for l in self.logits]
        h, w = self.logits[0].shape[:2]
        for l, (dims, arr) in enumerate(zip(level_dims(w, h), self.logits)):
            expect = (dims[0], dims[1], kernel_channels(l))
            if arr.shape != expect:
                raise ValueError(f"level {l} logits must have shape {expect}, got {arr.shape}")

    @property
    def width(self) -> int:
        return self.logits[0].shape[1]

    @property
    def height(self) -> int:
        return self.logits[0].shape[0]


def zero_kernel_field(width: int, height: int) -> KernelField:
    return KernelField([np.zeros((h, w, kernel_channels(l)))
                        for l, (h, w) in enumerate(level_dims(width, height))])


@dataclass
class DemodMap:
    values: np.ndarray  # (H, W, 3), strictly positive

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all() or (self.values <= 0).any():
            raise ValueError("demodulation map must be finite and strictly positive")


def normalize_kernels(kf: KernelField, include_temporal: bool = True) -> list[np.ndarray]:
    """Joint per-pixel softmax over all kernel groups present at each level.

    With include_temporal False (no usable history), the full-resolution
    softmax spans only the denoise and upsample groups and the temporal
    weights are exactly zero.
    """
    out = []
    for l, logits in enumerate(kf.logits):
        if l == 0 and not include_temporal:
            active = logits[:, :, :DENOISE_TAPS + UPSAMPLE_TAPS]
            w = np.zeros_like(logits)
            w[:, :, :DENOISE_TAPS + UPSAMPLE_TAPS] = _softmax_lastaxis(active)
        else:
            w = _softmax_lastaxis(logits)
        out.append(w)
    return out


def _softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward_lastaxis(w: np.ndarray, gw: np.ndarray) -> np.ndarray:
    inner = (w * gw).sum(axis=-1, keepdims=True)
    return w * (gw - inner)


# ---------------------------------------------------------------------------
# Pyramid construction (iterated count-correct 2x2 average pooling)


@dataclass
class PyramidStack:
    levels: list[np.ndarray]

    @property
    def width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def height(self) -> int:
        return self.levels[0].shape[0]


def _avgpool2(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = img.shape[:2]
    hc, wc = (h + 1) // 2, (w + 1) // 2
    buf = np.zeros((2 * hc, 2 * wc) + img.shape[2:])
    buf[:h, :w] = img
    sums = buf.reshape(hc, 2, wc, 2, -1).sum(axis=(1, 3)).reshape((hc, wc) + img.shape[2:])
    ones = np.zeros((2 * hc, 2 * wc, 1))
    ones[:h, :w] = 1.0
    counts = ones.reshape(hc, 2, wc, 2, 1).sum(axis=(1, 3)).reshape(hc, wc, 1)
    return sums / counts, counts


def _avgpool2_backward(grad: np.ndarray, counts: np.ndarray, fine_shape) -> np.ndarray:
    h, w = fine_shape[:2]
    g = grad / counts
    rep = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    return rep[:h, :w]


def build_pyramid(noisy) -> PyramidStack:
    """Low-pass pyramid by average pooling; level 0 is the input."""
    data = noisy.data if isinstance(noisy, RadianceImage) else np.asarray(noisy, dtype=np.float64)
    levels = [data]
    for _ in range(LEVELS - 1):
        pooled, _ = _avgpool2(levels[-1])
        levels.append(pooled)
    return PyramidStack(levels)


# ---------------------------------------------------------------------------
# Gather primitives


def _pad2(img: np.ndarray) -> np.ndarray:
    return np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="edge")


def _gather5_padded(padded: np.ndarray, weights: np.ndarray) -> np.ndarray:
    h, w = padded.shape[0] - 4, padded.shape[1] - 4
    out = np.zeros((h, w, padded.shape[2]))
    for t, (dy, dx) in enumerate(OFFSETS5):
        out += weights[:, :, t, None] * padded[2 + dy:2 + dy + h, 2 + dx:2 + dx + w]
    return out


def gather5(image: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """5x5 gather with clamp-to-edge taps; weights (H, W, 25)."""
    return _gather5_padded(_pad2(image), weights)


def _gather5_weight_grad(gout: np.ndarray, padded: np.ndarray) -> np.ndarray:
    h, w = gout.shape[:2]
    gw = np.empty((h, w, DENOISE_TAPS))
    for t, (dy, dx) in enumerate(OFFSETS5):
        gw[:, :, t] = (gout * padded[2 + dy:2 + dy + h, 2 + dx:2 + dx + w]).sum(axis=-1)
    return gw


def _gather5_input_grad(gout: np.ndarray, weights: np.ndarray) -> np.ndarray:
    h, w, c = gout.shape
    gpad = np.zeros((h + 4, w + 4, c))
    for t, (dy, dx) in enumerate(OFFSETS5):
        gpad[2 + dy:2 + dy + h, 2 + dx:2 + dx + w] += weights[:, :, t, None] * gout
    return _fold_pad2(gpad)


def _fold_pad2(gpad: np.ndarray) -> np.ndarray:
    # transpose of edge padding: border gradients fold onto edge pixels
    gpad[:, 2] += gpad[:, 0] + gpad[:, 1]
    gpad[:, -3] += gpad[:, -1] + gpad[:, -2]
    core = gpad[:, 2:-2]
    core[2] += core[0] + core[1]
    core[-3] += core[-1] + core[-2]
    return core[2:-2].copy()


_UP_IDX_CACHE: dict[tuple[int, int, int, int], list[tuple[np.ndarray, np.ndarray]]] = {}


def _up_indices(hf, wf, hc, wc):
    key = (hf, wf, hc, wc)
    if key not in _UP_IDX_CACHE:
        ys = np.arange(hf)
        xs = np.arange(wf)
        grids = []
        for i in (0, 1):
            for j in (0, 1):
                iy = np.minimum((ys + i) // 2, hc - 1)
                ix = np.minimum((xs + j) // 2, wc - 1)
                grids.append((iy[:, None], ix[None, :]))
        _UP_IDX_CACHE[key] = grids
    return _UP_IDX_CACHE[key]


def upsample2(coarse: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """2x2 gather upsampling; weights (H_fine, W_fine, 4), clamp-to-edge."""
    hf, wf = weights.shape[:2]
    hc, wc = coarse.shape[:2]
    out = np.zeros((hf, wf, coarse.shape[2]))
    for t, (iy, ix) in enumerate(_up_indices(hf, wf, hc, wc)):
        out += weights[:, :, t, None] * coarse[iy, ix]
    return out


def _upsample2_weight_grad(gout: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    hf, wf = gout.shape[:2]
    hc, wc = coarse.shape[:2]
    gw = np.empty((hf, wf, UPSAMPLE_TAPS))
    for t, (iy, ix) in enumerate(_up_indices(hf, wf, hc, wc)):
        gw[:, :, t] = (gout * coarse[iy, ix]).sum(axis=-1)
    return gw


def _upsample2_coarse_grad(gout: np.ndarray, weights: np.ndarray, coarse_shape) -> np.ndarray:
    hf, wf, c = gout.shape
    hc, wc = coarse_shape[:2]
    gc = np.zeros((hc * wc, c))
    for t, (iy, ix) in enumerate(_up_indices(hf, wf, hc, wc)):
        lin = (iy * wc + ix).ravel()
        np.add.at(gc, lin, (weights[:, :, t, None] * gout).reshape(hf * wf, c))
    return gc.reshape(hc, wc, c)


# ---------------------------------------------------------------------------
# Full reconstruction


@dataclass
class ReconTape:
    weights: list[np.ndarray]
    pads: list[np.ndarray]
    counts: list[np.ndarray]
    level_shapes: list[tuple]
    lhats: dict[int, np.ndarray]
    include_temporal: bool
    prev_pad: np.ndarray | None
    prev_in: np.ndarray | None
    x0: np.ndarray
    out_pre: np.ndarray
    demod: np.ndarray | None
    dclamp: np.ndarray | None
    noisy: np.ndarray


@dataclass
class PyramidGrads:
    logits: list[np.ndarray] | None
    demod: np.ndarray | None
    input: np.ndarray
    prev: np.ndarray | None


def reconstruct_core(noisy: np.ndarray, kf: KernelField,
                     prev_warped: np.ndarray | None = None,
                     demod: np.ndarray | None = None) -> tuple[np.ndarray, ReconTape]:
    """Coarse-to-fine reconstruction; returns output and backward tape.

    Works on raw (H, W, C) arrays for any channel count C, which the
    optimization harness exploits to batch independent draws along the
    channel axis.
    """
    include_temporal = prev_warped is not None
    if demod is not None:
        dclamp = np.maximum(demod, DEMOD_FLOOR)
        x0 = noisy / dclamp
        prev_in = prev_warped / dclamp if include_temporal else None
    else:
        dclamp = None
        x0 = noisy
        prev_in = prev_warped

    weights = normalize_kernels(kf, include_temporal=include_temporal)

    levels = [x0]
    counts = []
    for _ in range(LEVELS - 1):
        pooled, n = _avgpool2(levels[-1])
        levels.append(pooled)
        counts.append(n)
    pads = [_pad2(lv) for lv in levels]

    lhats: dict[int, np.ndarray] = {}
    top = LEVELS - 1
    lhats[top] = _gather5_padded(pads[top], weights[top][:, :, :DENOISE_TAPS])
    for l in range(top - 1, 0, -1):
        wl = weights[l]
        lhats[l] = (_gather5_padded(pads[l], wl[:, :, :DENOISE_TAPS])
                    + upsample2(lhats[l + 1], wl[:, :, DENOISE_TAPS:DENOISE_TAPS + UPSAMPLE_TAPS]))
    w0 = weights[0]
    out = (_gather5_padded(pads[0], w0[:, :, :DENOISE_TAPS])
           + upsample2(lhats[1], w0[:, :, DENOISE_TAPS:DENOISE_TAPS + UPSAMPLE_TAPS]))
    prev_pad = None
    if include_temporal:
        prev_pad = _pad2(prev_in)
        out = out + _gather5_padded(prev_pad, w0[:, :, DENOISE_TAPS + UPSAMPLE_TAPS:])

    out_pre = out
    if demod is not None:
        out = out * dclamp

    tape = ReconTape(weights=weights, pads=pads, counts=counts,
                     level_shapes=[lv.shape for lv in levels], lhats=lhats,
                     include_temporal=include_temporal, prev_pad=prev_pad,
                     prev_in=prev_in, x0=x0, out_pre=out_pre,
                     demod=demod, dclamp=dclamp, noisy=noisy)
    return out, tape


def reconstruct(pyr: PyramidStack, kf: KernelField,
                prev_warped: RadianceImage | None = None,
                demod: DemodMap | None = None) -> RadianceImage:
    """Filter surface for callers holding a pre-built pyramid.

    With a demodulation map the pyramid is rebuilt from the demodulated
    input, so only level 0 of `pyr` is consumed.
    """
    prev = prev_warped.data if prev_warped is not None else None
    dem = demod.values if demod is not None else None
    out, _ = reconstruct_core(pyr.levels[0], kf, prev, dem)
    return RadianceImage(np.maximum(out, 0.0))


def reconstruct_backward(tape: ReconTape, upstream: np.ndarray,
                         want_param_grads: bool = True) -> PyramidGrads:
    """Exact gradients of `sum(upstream * output)` for all inputs.

    Returns gradients for the kernel logits and demodulation map (unless
    want_param_grads is False), the noisy input, and the warped previous
    image when temporal filtering was active.
    """
    w = tape.weights
    gdc = None
    if tape.demod is not None:
        gout = upstream * tape.dclamp
        gdc = (upstream * tape.out_pre).copy()
    else:
        gout = upstream

    nlv = LEVELS
    gw = [np.zeros_like(wl) for wl in w] if want_param_grads else None
    gpads = [np.zeros_like(p) for p in tape.pads]
    gprev = None

    # full resolution
    w0 = w[0]
    if want_param_grads:
        gw[0][:, :, :DENOISE_TAPS] = _gather5_weight_grad(gout, tape.pads[0])
        gw[0][:, :, DENOISE_TAPS:DENOISE_TAPS + UPSAMPLE_TAPS] = \
            _upsample2_weight_grad(gout, tape.lhats[1])
    _accum_gather5_input(gpads[0], gout, w0[:, :, :DENOISE_TAPS])
    glhat = _upsample2_coarse_grad(gout, w0[:, :, DENOISE_TAPS:DENOISE_TAPS + UPSAMPLE_TAPS],
                                   tape.lhats[1].shape)
    if tape.include_temporal:
        if want_param_grads:
            gw[0][:, :, DENOISE_TAPS + UPSAMPLE_TAPS:] = \
                _gather5_weight_grad(gout, tape.prev_pad)
        gprev_pad = np.zeros_like(tape.prev_pad)
        _accum_gather5_input(gprev_pad, gout, w0[:, :, DENOISE_TAPS + UPSAMPLE_TAPS:])
        gprev = _fold_pad2(gprev_pad)

    # intermediate levels
    for l in range(1, nlv - 1):
        wl = w[l]
        if want_param_grads:
            gw[l][:, :, :DENOISE_TAPS] = _gather5_weight_grad(glhat, tape.pads[l])
            gw[l][:, :, DENOISE_TAPS:] = _upsample2_weight_grad(glhat, tape.lhats[l + 1])
        _accum_gather5_input(gpads[l], glhat, wl[:, :, :DENOISE_TAPS])
        glhat = _upsample2_coarse_grad(glhat, wl[:, :, DENOISE_TAPS:],
                                       tape.lhats[l + 1].shape)

    # coarsest
    if want_param_grads:
        gw[nlv - 1][:, :, :] = _gather5_weight_grad(glhat, tape.pads[nlv - 1])
    _accum_gather5_input(gpads[nlv - 1], glhat, w[nlv - 1])

    # fold padded gradients and chain the pooling down to level 0
    glevel = _fold_pad2(gpads[nlv - 1])
    for l in range(nlv - 2, -1, -1):
        g = _avgpool2_backward(glevel, tape.counts[l], tape.level_shapes[l])
        g += _fold_pad2(gpads[l])
        glevel = g
    gx0 = glevel

    glogits = None
    if want_param_grads:
        glogits = []
        for l in range(nlv):
            if l == 0 and not tape.include_temporal:
                nact = DENOISE_TAPS + UPSAMPLE_TAPS
                gl = np.zeros_like(gw[0])
                gl[:, :, :nact] = _softmax_backward_lastaxis(
                    w[0][:, :, :nact], gw[0][:, :, :nact])
                glogits.append(gl)
            else:
                glogits.append(_softmax_backward_lastaxis(w[l], gw[l]))

    gdemod = None
    if tape.demod is not None:
        gnoisy = gx0 / tape.dclamp
        gdc -= gx0 * tape.x0 / tape.dclamp
        if tape.include_temporal:
            gprev_full = gprev / tape.dclamp
            gdc -= gprev * tape.prev_in / tape.dclamp
            gprev = gprev_full
        if want_param_grads:
            gdemod = np.where(tape.demod > DEMOD_FLOOR, gdc, 0.0)
    else:
        gnoisy = gx0

    return PyramidGrads(logits=glogits, demod=gdemod, input=gnoisy, prev=gprev)


def _accum_gather5_input(gpad: np.ndarray, gout: np.ndarray, weights: np.ndarray) -> None:
    h, w = gout.shape[:2]
    for t, (dy, dx) in enumerate(OFFSETS5):
        gpad[2 + dy:2 + dy + h, 2 + dx:2 + dx + w] += weights[:, :, t, None] * gout


# ---------------------------------------------------------------------------
# Persistence: text header plus raw little-endian float64 blobs per level


def save_kernel_field(kf: KernelField, path) -> None:
    with open(path, "wb") as f:
        f.write(b"kernel-field 1\n")
        f.write(f"width {kf.width}\n".encode())
        f.write(f"height {kf.height}\n".encode())
        for l, arr in enumerate(kf.logits):
            f.write(f"level {l} {arr.shape[0]} {arr.shape[1]} {arr.shape[2]}\n".encode())
        f.write(b"data\n")
        for arr in kf.logits:
            f.write(arr.astype("<f8").tobytes())


def load_kernel_field(path) -> KernelField:
    with open(path, "rb") as f:
        if f.readline().strip() != b"kernel-field 1":
            raise ValueError("not a kernel field file")
        shapes = []
        width = height = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError("truncated kernel field header")
            parts = line.split()
            if parts[0] == b"width":
                width = int(parts[1])
            elif parts[0] == b"height":
                height = int(parts[1])
            elif parts[0] == b"level":
                shapes.append(tuple(int(p) for p in parts[2:5]))
            elif parts[0] == b"data":
                break
        logits = []
        for shape in shapes:
            n = shape[0] * shape[1] * shape[2]
            blob = f.read(n * 8)
            if len(blob) != n * 8:
                raise ValueError("truncated kernel field payload")
            logits.append(np.frombuffer(blob, dtype="<f8").reshape(shape).copy())
    return KernelField(logits)
