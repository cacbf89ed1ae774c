"""Radiance estimators over a density map with per-pixel density gradients.

Five variants share one forward/backward core:

* deterministic   - nearest-integer rounding with a reference-based
                    surrogate gradient
* stochastic      - exact stochastic rounding; the extra sample is taken
                    with probability equal to the fractional density, the sum
                    is normalized by the continuous density (unbiased), and
                    the pathwise gradient keeps only the smooth terms
* relaxed         - the take/skip indicator becomes a clipped linear ramp of
                    slope lam/frac whose base sits at the take threshold; a
                    gain of 2*lam/(2*lam - 1) restores the holdout's expected
                    contribution, keeping the estimator unbiased while the
                    ramp region provides gradient
* straight-through - stochastic forward, indicator derivative replaced by 1
* gumbel-binary   - logistic relaxation of the indicator; its soft gate has
                    tails, so samples can leak into pixels that should
                    receive none

The module also provides the Monte Carlo averaged analytic gradient and a
common-random-number central-difference reference used to rank the variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityMap, SampleAllocation
from .images import RadianceImage
from .losses import make_mask
from .rng import STREAM_ALLOC, uniform_grid_batch
from .scenes import SceneSpec, draw_sample_batch
from .tonemap import TmoParams, tonemap_array, tonemap_backward

VARIANTS = ("deterministic", "stochastic", "relaxed", "straight-through", "gumbel")

_GATE_FLOOR = 1e-4
_LOGIT_CLAMP = 1e-6


@dataclass
class EstimatorConfig:
    variant: str = "relaxed"
    lam: float = 10.0          # ramp temperature, >= 1
    gumbel_temp: float = 1.0   # logistic relaxation temperature, > 0
    density_floor: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown estimator variant {self.variant!r}")
        if self.lam < 1.0:
            raise ValueError("ramp temperature must be >= 1")
        if self.gumbel_temp <= 0:
            raise ValueError("gumbel temperature must be positive")
        if self.density_floor <= 0:
            raise ValueError("density floor must be positive")


@dataclass
class EstimatorResult:
    noisy: RadianceImage
    grad_density: np.ndarray    # (H, W, 3) d noisy / d density
    holdout_contrib: np.ndarray
    samples_used: np.ndarray


def ramp_gain(lam: float) -> float:
    """Gain restoring the relaxed holdout's expected contribution."""
    return 2.0 * lam / (2.0 * lam - 1.0)


def relaxed_ramp(u: np.ndarray, frac: np.ndarray, lam: float) -> np.ndarray:
    """Clipped linear ramp replacing the take indicator; 0 where frac == 0."""
    raw = np.zeros(np.broadcast(u, frac).shape)
    np.divide(u + frac - 1.0, frac, out=raw, where=frac > 0)
    return np.clip(lam * raw, 0.0, 1.0)


def gumbel_gate(u: np.ndarray, frac: np.ndarray, temp: float) -> np.ndarray:
    """Soft take gate: sigmoid((logit(frac) + logit(u)) / temp)."""
    pc = np.clip(frac, _LOGIT_CLAMP, 1.0 - _LOGIT_CLAMP)
    uc = np.clip(u, _LOGIT_CLAMP, 1.0 - _LOGIT_CLAMP)
    z = (np.log(pc) - np.log1p(-pc) + np.log(uc) - np.log1p(-uc)) / temp
    return 1.0 / (1.0 + np.exp(-z))


def stochastic_core(variant: str, spp: np.ndarray, frac: np.ndarray,
                    u: np.ndarray, base_sum: np.ndarray, holdout: np.ndarray,
                    cfg: EstimatorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Shared forward/backward math for the stochastic variants.

    Arrays broadcast over leading axes; spp/frac/u are (..., H, W), base_sum
    and holdout are (..., H, W, 3). Returns (noisy, grad, holdout_contrib,
    extra_drawn).
    """
    s_safe = np.maximum(spp, cfg.density_floor)[..., None]
    if variant == "relaxed":
        ramp = relaxed_ramp(u, frac, cfg.lam)
        gain = ramp_gain(cfg.lam)
        drawn = (frac > 0) & (u >= 1.0 - frac)
        contrib = np.where(drawn[..., None], holdout * (gain * ramp)[..., None], 0.0)
        noisy = (base_sum + contrib) / s_safe
        # ramp slope d ramp / d frac inside the open linear region
        slope = np.zeros(np.broadcast(u, frac).shape)
        linear = drawn & (ramp < 1.0)
        np.divide(cfg.lam * (1.0 - u), frac * frac, out=slope, where=linear)
        grad = (holdout * (gain * slope)[..., None] - noisy) / s_safe
    elif variant == "stochastic":
        drawn = u < frac
        contrib = np.where(drawn[..., None], holdout, 0.0)
        noisy = (base_sum + contrib) / s_safe
        grad = -noisy / s_safe
    elif variant == "straight-through":
        taken = u < frac
        drawn = frac > 0  # the sample is needed for the gradient either way
        contrib = np.where(taken[..., None], holdout, 0.0)
        noisy = (base_sum + contrib) / s_safe
        grad = (np.where(drawn[..., None], holdout, 0.0) - noisy) / s_safe
    elif variant == "gumbel":
        gate = gumbel_gate(u, frac, cfg.gumbel_temp)
        drawn = gate > _GATE_FLOOR
        contrib = np.where(drawn[..., None], holdout * gate[..., None], 0.0)
        noisy = (base_sum + contrib) / s_safe
        pc = np.clip(frac, _LOGIT_CLAMP, 1.0 - _LOGIT_CLAMP)
        dgate = np.where((frac > _LOGIT_CLAMP) & (frac < 1.0 - _LOGIT_CLAMP),
                         gate * (1.0 - gate) / (cfg.gumbel_temp * pc * (1.0 - pc)), 0.0)
        grad = (np.where(drawn[..., None], holdout * dgate[..., None], 0.0) - noisy) / s_safe
    else:
        raise ValueError(f"{variant!r} is not a stochastic variant")
    return noisy, grad, contrib, drawn


def _bank_inputs(alloc: SampleAllocation, bank) -> tuple[np.ndarray, np.ndarray]:
    # cap at capacity so runaway densities degrade instead of crashing
    base = np.minimum(alloc.base, bank.capacity - 1)
    return bank.prefix_sum(base), bank.sample_at(base)


def _stochastic_estimate(variant: str, density: DensityMap,
                         alloc: SampleAllocation, bank,
                         cfg: EstimatorConfig) -> EstimatorResult:
    base_sum, holdout = _bank_inputs(alloc, bank)
    noisy, grad, contrib, drawn = stochastic_core(
        variant, density.spp, alloc.frac, alloc.u, base_sum, holdout, cfg)
    used = np.minimum(alloc.base, bank.capacity - 1) + drawn.astype(np.int64)
    return EstimatorResult(RadianceImage(np.maximum(noisy, 0.0)), grad, contrib, used)


def estimate_stochastic(density, alloc, bank, cfg=None) -> EstimatorResult:
    return _stochastic_estimate("stochastic", density, alloc, bank,
                                cfg or EstimatorConfig(variant="stochastic"))


def estimate_relaxed(density, alloc, bank, cfg=None) -> EstimatorResult:
    return _stochastic_estimate("relaxed", density, alloc, bank,
                                cfg or EstimatorConfig(variant="relaxed"))


def estimate_straight_through(density, alloc, bank, cfg=None) -> EstimatorResult:
    return _stochastic_estimate("straight-through", density, alloc, bank,
                                cfg or EstimatorConfig(variant="straight-through"))


def estimate_gumbel(density, alloc, bank, cfg=None) -> EstimatorResult:
    return _stochastic_estimate("gumbel", density, alloc, bank,
                                cfg or EstimatorConfig(variant="gumbel"))


def estimate_deterministic(density: DensityMap, bank,
                           ref: RadianceImage) -> EstimatorResult:
    """Nearest-integer rounding, zero output below 0.5 spp, surrogate
    gradient pulling the estimate toward the reference."""
    spp = density.spp
    counts = np.minimum(np.floor(spp + 0.5).astype(np.int64), bank.capacity)
    active = spp >= 0.5
    counts = np.where(active, counts, 0)
    sums = bank.prefix_sum(counts)
    denom = np.maximum(counts, 1)[..., None].astype(np.float64)
    noisy = np.where(active[..., None], sums / denom, 0.0)
    grad = np.where(active[..., None], (ref.data - noisy) / denom, ref.data)
    return EstimatorResult(RadianceImage(noisy), grad,
                           np.zeros_like(noisy), counts)


def estimate(variant: str, density: DensityMap, alloc: SampleAllocation | None,
             bank, cfg: EstimatorConfig, ref: RadianceImage | None = None) -> EstimatorResult:
    if variant == "deterministic":
        if ref is None:
            raise ValueError("deterministic estimator needs a reference image")
        return estimate_deterministic(density, bank, ref)
    if alloc is None:
        raise ValueError("stochastic variants need a sample allocation")
    return _stochastic_estimate(variant, density, alloc, bank, cfg)


def take_rule(variant: str) -> str:
    return {"relaxed": "relaxed", "gumbel": "gumbel"}.get(variant, "stochastic")


# ---------------------------------------------------------------------------
# Gradient comparison machinery


class EstimatorLossPipeline:
    """density -> estimate -> tonemap -> masked L1 vs tonemapped reference.

    The loss is separable per pixel (no spatial filtering), so the
    finite-difference reference can perturb all pixels at once. Seeds are
    consumed as frame indices of the per-pixel RNG, making common random
    numbers exact: the same seed always yields the same samples and take
    variates regardless of the density being evaluated.
    """

    separable = True

    def __init__(self, scene: SceneSpec, cfg: EstimatorConfig,
                 tmo: TmoParams | None = None, mask_kind: str = "uniform",
                 seed: int = 0, chunk: int = 2048):
        self.scene = scene
        self.cfg = cfg
        self.tmo = tmo or TmoParams()
        self.seed = seed
        self.chunk = chunk
        self.ref_ldr = tonemap_array(scene.ground_truth.data, self.tmo)
        self.mask = make_mask(mask_kind, self.ref_ldr).weights

    # -- single-seed interface

    def loss(self, spp: np.ndarray, frame: int) -> float:
        return float(self._contrib(spp[None], np.asarray([frame]))[0].sum())

    def loss_and_grad(self, spp: np.ndarray, frame: int) -> tuple[float, np.ndarray]:
        c, g = self._contrib_and_grad(spp[None], np.asarray([frame]))
        return float(c[0].sum()), g[0]

    # -- batched interface (seeds along the leading axis)

    def loss_contrib_batch(self, spp: np.ndarray, frames: np.ndarray) -> np.ndarray:
        out = []
        for lo in range(0, len(frames), self.chunk):
            out.append(self._contrib(spp[None], frames[lo:lo + self.chunk]))
        return np.concatenate(out, axis=0)

    def grad_batch(self, spp: np.ndarray, frames: np.ndarray) -> np.ndarray:
        out = []
        for lo in range(0, len(frames), self.chunk):
            out.append(self._contrib_and_grad(spp[None], frames[lo:lo + self.chunk])[1])
        return np.concatenate(out, axis=0)

    # -- internals

    def _forward(self, spp, frames):
        h, w = self.scene.height, self.scene.width
        k = len(frames)
        if self.cfg.variant == "deterministic":
            counts = np.where(spp[0] >= 0.5, np.floor(spp[0] + 0.5).astype(np.int64), 0)
            sums = np.zeros((k, h, w, 3))
            for j in range(int(counts.max(initial=0))):
                d = draw_sample_batch(self.scene, frames, self.seed, j)
                sums += np.where((counts > j)[..., None], d, 0.0)
            denom = np.maximum(counts, 1)[..., None].astype(np.float64)
            noisy = np.where((spp[0] >= 0.5)[..., None], sums / denom, 0.0)
            grad = np.where((spp[0] >= 0.5)[..., None],
                            (self.scene.ground_truth.data - noisy) / denom,
                            self.scene.ground_truth.data)
            return noisy, grad
        base = np.floor(spp[0]).astype(np.int64)
        frac = spp[0] - base
        u = uniform_grid_batch(self.seed, frames, w, h, STREAM_ALLOC)
        base_sum = np.zeros((k, h, w, 3))
        holdout = np.zeros((k, h, w, 3))
        for j in range(int(base.max(initial=0)) + 1):
            d = draw_sample_batch(self.scene, frames, self.seed, j)
            base_sum += np.where((base > j)[..., None], d, 0.0)
            holdout = np.where((base == j)[..., None], d, holdout)
        noisy, grad, _, _ = stochastic_core(
            self.cfg.variant, spp[0], frac, u, base_sum, holdout, self.cfg)
        return noisy, grad

    def _contrib(self, spp, frames):
        noisy, _ = self._forward(spp, frames)
        ldr = tonemap_array(np.maximum(noisy, 0.0), self.tmo)
        n = self.scene.width * self.scene.height
        return np.abs(ldr - self.ref_ldr).mean(axis=-1) * self.mask / n

    def _contrib_and_grad(self, spp, frames):
        noisy, grad_density = self._forward(spp, frames)
        pos = np.maximum(noisy, 0.0)
        ldr = tonemap_array(pos, self.tmo)
        n = self.scene.width * self.scene.height
        contrib = np.abs(ldr - self.ref_ldr).mean(axis=-1) * self.mask / n
        up_ldr = np.sign(ldr - self.ref_ldr) * self.mask[..., None] / (3.0 * n)
        up_hdr = tonemap_backward(pos, self.tmo, up_ldr) * (noisy > 0)
        grad = (up_hdr * grad_density).sum(axis=-1)
        return contrib, grad


def expected_gradient_mc(pipeline, density: DensityMap, K: int,
                         seed0: int = 0) -> np.ndarray:
    """Mean over K seeds of the pipeline's analytic density gradient."""
    if K < 1:
        raise ValueError("K must be >= 1")
    frames = np.arange(seed0, seed0 + K)
    if hasattr(pipeline, "grad_batch"):
        return pipeline.grad_batch(density.spp, frames).mean(axis=0)
    grads = [pipeline.loss_and_grad(density.spp, int(f))[1] for f in frames]
    return np.mean(grads, axis=0)


def finite_difference_gradient(pipeline, density: DensityMap, eps: float,
                               K: int, seed0: int = 0,
                               separable: bool | None = None) -> np.ndarray:
    """Central difference of the expected loss per pixel, common random
    numbers across the +/- evaluations.

    For pipelines flagged separable (per-pixel losses), both shifted maps
    are evaluated in two passes; this equals the per-pixel loop exactly and
    is validated against it in the test suite.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    spp = density.spp
    if np.any(spp + eps == spp - eps):
        import warnings
        warnings.warn("finite-difference step too small, evaluations coincide")
    if separable is None:
        separable = getattr(pipeline, "separable", False)
    frames = np.arange(seed0, seed0 + K)
    if separable and hasattr(pipeline, "loss_contrib_batch"):
        plus = pipeline.loss_contrib_batch(spp + eps, frames).mean(axis=0)
        minus = pipeline.loss_contrib_batch(np.maximum(spp - eps, 0.0), frames).mean(axis=0)
        return (plus - minus) / (2.0 * eps)
    grad = np.zeros_like(spp)
    for y in range(spp.shape[0]):
        for x in range(spp.shape[1]):
            up = spp.copy()
            up[y, x] += eps
            down = spp.copy()
            down[y, x] = max(down[y, x] - eps, 0.0)
            lp = np.mean([pipeline.loss(up, int(f)) for f in frames])
            lm = np.mean([pipeline.loss(down, int(f)) for f in frames])
            grad[y, x] = (lp - lm) / (2.0 * eps)
    return grad


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    af, bf = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(af), np.linalg.norm(bf)
    if na == 0 or nb == 0:
        return 0.0
    return float(af @ bf / (na * nb))
