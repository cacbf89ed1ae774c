"""Direct-parameter optimization of density scores, kernel logits, and the
demodulation map through the full estimate -> filter -> tonemap -> loss chain.

No networks: every per-pixel quantity is a free parameter updated by a
moment-based optimizer (decoupled weight decay on kernel logits, cosine
annealed learning rate). Each step renders a sliding window of two frames
with fresh sample draws, reconstructs both (the second with a temporal
gather from the warped first), and minimizes the per-pixel max of the
masked spatial term and the weighted temporal term.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .banks import StreamingBank
from .density import (DensityMap, allocate, normalize_density, softmax,
                      softmax_backward, uniform_density)
from .estimators import (EstimatorConfig, EstimatorLossPipeline, VARIANTS,
                         cosine_similarity, estimate, expected_gradient_mc,
                         finite_difference_gradient, take_rule)
from .images import (LdrImage, RadianceImage, warp_array, warp_backward,
                     write_pfm, write_png_srgb)
from .losses import (TEMPORAL_WEIGHT, combined_loss, make_mask, spatial_loss,
                     temporal_loss)
from .pyramid import (KernelField, reconstruct_backward, reconstruct_core,
                      zero_kernel_field)
from .scenes import SceneSpec, builtin_scene
from .tonemap import TmoParams, sample_tmo, tonemap_array, tonemap_backward

BUDGET_RANGE = (0.11, 4.0)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, initial: float):
        super().__init__(f"loss diverged at step {step}: {loss:.6g} "
                         f"exceeded 10x initial {initial:.6g} for 50 consecutive steps")
        self.step = step


@dataclass
class RunConfig:
    scene: str = "checker-spike"
    width: int = 64
    height: int = 64
    budget: float = 0.25
    variant: str = "relaxed"
    lam: float = 10.0
    gumbel_temp: float = 1.0
    steps: int = 400
    lr: float = 0.05
    score_lr_scale: float = 1.0
    score_grad_blur: float = 1.5
    mask_kind: str = "gradmag"
    tmo_seed: int | None = None  # None keeps the fixed default operator
    seed: int = 0
    eval_frames: int = 16
    weight_decay: float = 0.02
    beta1: float = 0.8
    beta2: float = 0.985
    guard_factor: float = 10.0
    guard_patience: int = 50

    def __post_init__(self):
        if not BUDGET_RANGE[0] <= self.budget <= BUDGET_RANGE[1]:
            raise ValueError(f"budget must lie in {BUDGET_RANGE}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown estimator variant {self.variant!r}")

    def tmo_params(self) -> TmoParams:
        return sample_tmo(self.tmo_seed) if self.tmo_seed is not None else TmoParams()

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(self.variant, self.lam, self.gumbel_temp)


@dataclass
class OptimState:
    params: dict[str, np.ndarray]
    moment1: dict[str, np.ndarray]
    moment2: dict[str, np.ndarray]
    step: int = 0


@dataclass
class RunResult:
    config: RunConfig
    adaptive: bool
    state: OptimState
    density: DensityMap
    loss_rows: list[tuple]
    final_hdr: RadianceImage
    final_ldr: LdrImage
    err_map: np.ndarray  # per-pixel LDR absolute error, averaged over eval frames
    metrics: dict[str, float]


def init_state(config: RunConfig) -> OptimState:
    params = {"scores": np.zeros((config.height, config.width)),
              "demod": np.zeros((config.height, config.width, 3))}
    kf = zero_kernel_field(config.width, config.height)
    for l, arr in enumerate(kf.logits):
        params[f"logits{l}"] = arr
    return OptimState(params,
                      {k: np.zeros_like(v) for k, v in params.items()},
                      {k: np.zeros_like(v) for k, v in params.items()},
                      0)


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


def adamw_update(state: OptimState, grads: dict[str, np.ndarray], lr: float,
                 beta1: float, beta2: float, weight_decay: float,
                 eps: float = 1e-8, lr_scales: dict[str, float] | None = None) -> None:
    """Moment-based update; decoupled weight decay on kernel logits only
    (density scores are invariant to constant shifts, decay there would act
    as a hidden uniformity prior).

    Density scores share one second-moment normalizer across the group:
    their per-draw gradients are heavy-tailed (rare sample hits carry the
    mean), so per-parameter normalization would track the majority sign
    instead of the mean and push density away from high-variance pixels.
    The scores are jointly softmax-normalized anyway, so a shared scale is
    the natural choice there. Kernel and demodulation gradients are dense
    and well-scaled, keeping standard per-parameter normalization.
    """
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = state.params[name]
        m = state.moment1[name]
        v = state.moment2[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        lr_g = lr * (lr_scales or {}).get(name, 1.0)
        if name.startswith("logits") and weight_decay > 0:
            p -= lr_g * weight_decay * p
        if name == "scores":
            # clip keeps the per-step move bounded like the per-parameter
            # rule while the shared denominator preserves the mean direction
            step = np.clip(mhat / (np.sqrt(vhat.mean()) + eps), -1.0, 1.0)
        else:
            step = mhat / (np.sqrt(vhat) + eps)
        p -= lr_g * step


# ---------------------------------------------------------------------------
# One optimization step: two-frame forward and full backward


def _current_density(params, config: RunConfig, adaptive: bool) -> DensityMap:
    if adaptive:
        return normalize_density(params["scores"], config.budget)
    return uniform_density(config.width, config.height, config.budget)


def _kernel_field(params) -> KernelField:
    return KernelField([params[f"logits{l}"] for l in range(5)])


@dataclass
class StepArtifacts:
    loss: float
    spatial: float
    temporal: float
    out_hdr: np.ndarray  # frame 1 reconstruction
    out_ldr: np.ndarray


def evaluate_step(params: dict[str, np.ndarray], scene: SceneSpec,
                  config: RunConfig, step_index: int, adaptive: bool,
                  ref_ldr: np.ndarray, mask, want_grads: bool = True
                  ) -> tuple[StepArtifacts, dict[str, np.ndarray] | None]:
    """Forward (and optionally backward) pass over one two-frame window."""
    density = _current_density(params, config, adaptive)
    kf = _kernel_field(params)
    demod = np.exp(params["demod"])
    cfg = config.estimator_config()
    tmo = config.tmo_params()
    motion = scene.motion.data
    gt = scene.ground_truth

    frames = (2 * step_index, 2 * step_index + 1)
    allocs, ests = [], []
    for f in frames:
        alloc = allocate(density, "stochastic", frame=f, seed=config.seed,
                         rule=take_rule(config.variant), gumbel_temp=config.gumbel_temp)
        bank = StreamingBank(scene, config.seed, frame=f)
        ests.append(estimate(config.variant, density, alloc, bank, cfg, ref=gt))
        allocs.append(alloc)

    # frame 0 has no usable history: temporal group masked out of the softmax
    out0, tape0 = reconstruct_core(ests[0].noisy.data, kf, None, demod)
    prev_w, validity = warp_array(out0, motion)
    out1, tape1 = reconstruct_core(ests[1].noisy.data, kf, prev_w, demod)

    ldr0 = tonemap_array(np.maximum(out0, 0.0), tmo)
    ldr1 = tonemap_array(np.maximum(out1, 0.0), tmo)
    ldr0_w, _ = warp_array(ldr0, motion)
    ref_w, _ = warp_array(ref_ldr, motion)

    sp_map, sp = spatial_loss(ldr1, ref_ldr, mask)
    tm_map, tm = temporal_loss(ldr1, ldr0_w, ref_ldr, ref_w, validity)
    cb_map, cb = combined_loss(sp_map, tm_map)
    arts = StepArtifacts(cb, sp, tm, out1, ldr1)
    if not want_grads:
        return arts, None

    n_pix = cb_map.size
    # branch indicator of the per-pixel max; ties go to the spatial term.
    # The temporal map is zero at warp-invalid pixels, so it never wins there.
    temporal_wins = (TEMPORAL_WEIGHT * tm_map) > sp_map
    g_sp_map = (~temporal_wins).astype(np.float64) / n_pix
    g_tm_map = np.where(temporal_wins, TEMPORAL_WEIGHT / n_pix, 0.0)

    g_ldr1 = (np.sign(ldr1 - ref_ldr) * (g_sp_map * mask.weights)[..., None] / 3.0
              + np.sign((ldr1 - ldr0_w) - (ref_ldr - ref_w)) * g_tm_map[..., None] / 3.0)
    g_ldr0_w = -np.sign((ldr1 - ldr0_w) - (ref_ldr - ref_w)) * g_tm_map[..., None] / 3.0
    g_ldr0 = warp_backward(g_ldr0_w, motion)

    g_out1 = tonemap_backward(np.maximum(out1, 0.0), tmo, g_ldr1) * (out1 > 0)
    pg1 = reconstruct_backward(tape1, g_out1)
    g_out0 = tonemap_backward(np.maximum(out0, 0.0), tmo, g_ldr0) * (out0 > 0)
    g_out0 += warp_backward(pg1.prev, motion)
    pg0 = reconstruct_backward(tape0, g_out0)

    grads = {"demod": (pg0.demod + pg1.demod) * demod}
    for l in range(5):
        grads[f"logits{l}"] = pg0.logits[l] + pg1.logits[l]
    if adaptive:
        g_spp = ((pg0.input * ests[0].grad_density).sum(axis=-1)
                 + (pg1.input * ests[1].grad_density).sum(axis=-1))
        if config.score_grad_blur > 0:
            g_spp = gaussian_filter(g_spp, config.score_grad_blur, mode="nearest")
        w = softmax(params["scores"])
        adaptive_total = (7.0 / 8.0) * config.budget * w.size
        grads["scores"] = adaptive_total * softmax_backward(w, g_spp)
    return arts, grads


# ---------------------------------------------------------------------------
# Full runs


def run(config: RunConfig, adaptive: bool = True, out_dir=None) -> RunResult:
    scene = builtin_scene(config.scene, config.width, config.height)
    tmo = config.tmo_params()
    ref_ldr = tonemap_array(scene.ground_truth.data, tmo)
    mask = make_mask(config.mask_kind, ref_ldr)

    state = init_state(config)
    rows = []
    initial_loss = None
    over_budget_streak = 0
    for step in range(config.steps):
        lr = cosine_lr(config.lr, step, config.steps)
        arts, grads = evaluate_step(state.params, scene, config, step, adaptive,
                                    ref_ldr, mask, want_grads=lr > 0)
        if initial_loss is None:
            initial_loss = arts.loss
        if arts.loss > config.guard_factor * initial_loss:
            over_budget_streak += 1
            if over_budget_streak >= config.guard_patience:
                raise DivergenceError(step, arts.loss, initial_loss)
        else:
            over_budget_streak = 0
        rows.append((step, arts.loss, arts.spatial, arts.temporal, lr))
        if grads is not None:
            adamw_update(state, grads, lr, config.beta1, config.beta2,
                         config.weight_decay,
                         lr_scales={"scores": config.score_lr_scale})

    density = _current_density(state.params, config, adaptive)
    final = evaluate_final(state.params, scene, config, adaptive, ref_ldr)
    result = RunResult(config, adaptive, state, density, rows,
                       RadianceImage(np.maximum(final["hdr"], 0.0)),
                       LdrImage(np.clip(final["ldr"], 0.0, 1.0)),
                       final["err_map"],
                       {"mae": final["mae"], "psnr": final["psnr"],
                        "final_loss": rows[-1][1]})
    if out_dir is not None:
        save_run(result, out_dir)
    return result


def uniform_baseline(config: RunConfig, out_dir=None) -> RunResult:
    """Same pipeline and seeds with the density frozen at uniform; kernels
    and demodulation still optimized."""
    return run(config, adaptive=False, out_dir=out_dir)


def evaluate_final(params, scene, config: RunConfig, adaptive: bool,
                   ref_ldr: np.ndarray) -> dict:
    """Error of the converged parameters, averaged over fresh eval frames to
    damp single-draw Monte Carlo noise. Frames are disjoint from training."""
    density = _current_density(params, config, adaptive)
    kf = _kernel_field(params)
    demod = np.exp(params["demod"])
    cfg = config.estimator_config()
    tmo = config.tmo_params()
    base = 2 * config.steps + 16

    err = np.zeros(ref_ldr.shape[:2])
    m = np.zeros(ref_ldr.shape[:2])
    last_hdr = last_ldr = None
    for i in range(config.eval_frames):
        f = base + i
        alloc = allocate(density, "stochastic", frame=f, seed=config.seed,
                         rule=take_rule(config.variant), gumbel_temp=config.gumbel_temp)
        bank = StreamingBank(scene, config.seed, frame=f)
        est = estimate(config.variant, density, alloc, bank, cfg,
                       ref=scene.ground_truth)
        out, _ = reconstruct_core(est.noisy.data, kf, None, demod)
        ldr = tonemap_array(np.maximum(out, 0.0), tmo)
        err += np.abs(ldr - ref_ldr).mean(axis=-1)
        m += ((ldr - ref_ldr) ** 2).mean(axis=-1)
        last_hdr, last_ldr = out, ldr
    err /= config.eval_frames
    mse = float(m.mean() / config.eval_frames)
    return {"hdr": last_hdr, "ldr": last_ldr, "err_map": err,
            "mae": float(err.mean()),
            "psnr": math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)}


# ---------------------------------------------------------------------------
# Artifacts


def save_run(result: RunResult, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "loss.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "spatial", "temporal", "lr"])
        for row in result.loss_rows:
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
    spp3 = np.repeat(result.density.spp[:, :, None], 3, axis=2)
    write_pfm(RadianceImage(spp3), os.path.join(out_dir, "density.pfm"))
    write_pfm(result.final_hdr, os.path.join(out_dir, "final.pfm"))
    write_png_srgb(result.final_ldr, os.path.join(out_dir, "final.png"))
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for k in sorted(result.metrics):
            w.writerow([k, repr(result.metrics[k])])
    write_config(result.config, os.path.join(out_dir, "config.txt"),
                 extra={"adaptive": str(result.adaptive)})


def write_config(config: RunConfig, path, extra: dict | None = None) -> None:
    with open(path, "w") as f:
        for k, v in vars(config).items():
            f.write(f"{k} = {v!r}\n")
        for k, v in (extra or {}).items():
            f.write(f"{k} = {v}\n")


def read_config(path) -> tuple[RunConfig, dict]:
    raw = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line or "=" not in line:
                continue
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    fields = {}
    extras = {}
    defaults = RunConfig()
    for k, v in raw.items():
        if not hasattr(defaults, k):
            extras[k] = v
            continue
        cur = getattr(defaults, k)
        if k == "tmo_seed":
            fields[k] = None if v in ("None", "") else int(v)
        elif isinstance(cur, bool):
            fields[k] = v in ("True", "true", "1")
        elif isinstance(cur, int):
            fields[k] = int(v)
        elif isinstance(cur, float):
            fields[k] = float(v)
        else:
            fields[k] = v.strip("'\"")
    return replace(defaults, **fields), extras


# ---------------------------------------------------------------------------
# Batched full-chain evaluation (for gradient verification)
#
# Independent Monte Carlo draws are stacked along the channel axis, so one
# pyramid pass evaluates every seed at once. Covers the single-frame chain:
# density -> estimator -> demod/filter -> tonemap -> masked spatial loss.


def _chain_forward_batch(params, scene: SceneSpec, config: RunConfig,
                         frames: np.ndarray, adaptive: bool, ref_ldr, mask):
    from .estimators import stochastic_core
    from .rng import STREAM_ALLOC, uniform_grid_batch
    from .scenes import draw_sample_batch

    h, w = config.height, config.width
    k = len(frames)
    density = _current_density(params, config, adaptive)
    spp = density.spp
    base = np.floor(spp).astype(np.int64)
    frac = spp - base
    cfg = config.estimator_config()

    u = uniform_grid_batch(config.seed, frames, w, h, STREAM_ALLOC)
    base_sum = np.zeros((k, h, w, 3))
    holdout = np.zeros((k, h, w, 3))
    for j in range(int(base.max(initial=0)) + 1):
        d = draw_sample_batch(scene, frames, config.seed, j)
        base_sum += np.where((base > j)[..., None], d, 0.0)
        holdout = np.where((base == j)[..., None], d, holdout)
    noisy, grad_density, _, _ = stochastic_core(
        config.variant, spp, frac, u, base_sum, holdout, cfg)

    stacked = np.ascontiguousarray(noisy.transpose(1, 2, 0, 3)).reshape(h, w, 3 * k)
    kf = _kernel_field(params)
    demod = np.exp(params["demod"])
    demod_stack = np.tile(demod, (1, 1, k))
    out, tape = reconstruct_core(stacked, kf, None, demod_stack)
    pos = np.maximum(out, 0.0).reshape(h, w, k, 3)

    tmo = config.tmo_params()
    ldr = tonemap_array(pos, tmo)
    resid = ldr - ref_ldr[:, :, None, :]
    losses = (np.abs(resid).mean(axis=-1) * mask.weights[:, :, None]).mean(axis=(0, 1))
    return {"losses": losses, "ldr": ldr, "resid": resid, "pos": pos, "out": out,
            "tape": tape, "grad_density": grad_density, "tmo": tmo,
            "density": density, "k": k}


def chain_loss_batch(params, scene, config: RunConfig, frames: np.ndarray,
                     adaptive: bool, ref_ldr, mask) -> np.ndarray:
    """Per-seed scalar losses of the single-frame chain, (K,)."""
    return _chain_forward_batch(params, scene, config, frames, adaptive,
                                ref_ldr, mask)["losses"]


def chain_score_grad(params, scene, config: RunConfig, frames: np.ndarray,
                     ref_ldr, mask) -> np.ndarray:
    """Mean over seeds of the analytic gradient of the chain loss with
    respect to the density scores, (H, W)."""
    fw = _chain_forward_batch(params, scene, config, frames, True, ref_ldr, mask)
    h, w, k = config.height, config.width, fw["k"]
    n_pix = h * w
    up_ldr = (np.sign(fw["resid"]) * mask.weights[:, :, None, None]
              / (3.0 * n_pix * k))
    up_hdr = tonemap_backward(fw["pos"], fw["tmo"], up_ldr) * (fw["pos"] > 0)
    up_stacked = up_hdr.reshape(h, w, 3 * k)
    pg = reconstruct_backward(fw["tape"], up_stacked, want_param_grads=False)
    g_noisy = pg.input.reshape(h, w, k, 3).transpose(2, 0, 1, 3)
    g_spp = (g_noisy * fw["grad_density"]).sum(axis=(0, 3))
    weights = softmax(params["scores"])
    adaptive_total = (7.0 / 8.0) * config.budget * weights.size
    return adaptive_total * softmax_backward(weights, g_spp)


def chain_score_fd(params, scene, config: RunConfig, frames: np.ndarray,
                   ref_ldr, mask, pixels: list[tuple[int, int]],
                   eps: float = 0.1) -> np.ndarray:
    """Common-random-number central differences of the mean chain loss with
    respect to selected density scores."""
    out = np.zeros(len(pixels))
    for i, (y, x) in enumerate(pixels):
        vals = []
        for sign in (1.0, -1.0):
            p2 = dict(params)
            scores = params["scores"].copy()
            scores[y, x] += sign * eps
            p2["scores"] = scores
            vals.append(chain_loss_batch(p2, scene, config, frames, True,
                                         ref_ldr, mask).mean())
        out[i] = (vals[0] - vals[1]) / (2.0 * eps)
    return out


# ---------------------------------------------------------------------------
# Estimator comparison experiments


@dataclass
class VariantReport:
    variant: str
    cosine_vs_fd: float
    final_loss: float
    divergences: int


def gradient_similarity(scene_name: str, size: int, budget: float,
                        variant: str, lam: float = 10.0,
                        grad_samples: int = 10_000, fd_eps: float = 0.05,
                        seed: int = 0) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine similarity between a variant's analytic Monte Carlo gradient
    and the finite-difference reference on the exact stochastic forward."""
    scene = builtin_scene(scene_name, size, size)
    density = uniform_density(size, size, budget)
    ref_pipe = EstimatorLossPipeline(scene, EstimatorConfig("stochastic"), seed=seed)
    fd = finite_difference_gradient(ref_pipe, density, fd_eps, grad_samples)
    cfg = EstimatorConfig(variant, lam=lam)
    pipe = EstimatorLossPipeline(scene, cfg, seed=seed)
    mc = expected_gradient_mc(pipe, density, grad_samples)
    return cosine_similarity(mc, fd), mc, fd


def compare_estimators(config: RunConfig, variants: list[str],
                       grad_samples: int = 10_000, fd_eps: float = 0.05,
                       grad_size: int = 16, run_seeds: int = 5) -> list[VariantReport]:
    """Gradient fidelity plus small-run stability for each variant."""
    if len(variants) < 2:
        raise ValueError("need at least 2 variants to compare")
    reports = []
    for variant in variants:
        cos, _, _ = gradient_similarity(config.scene, grad_size, config.budget,
                                        variant, config.lam, grad_samples,
                                        fd_eps, config.seed)
        losses = []
        div = 0
        for s in range(run_seeds):
            cfg = replace(config, variant=variant, seed=config.seed + s)
            try:
                losses.append(run(cfg).metrics["final_loss"])
            except DivergenceError:
                div += 1
        reports.append(VariantReport(variant, cos,
                                     float(np.mean(losses)) if losses else math.nan,
                                     div))
    return reports


def write_variant_reports(reports: list[VariantReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "cosine_vs_fd", "final_loss", "divergences"])
        for r in reports:
            w.writerow([r.variant, repr(r.cosine_vs_fd), repr(r.final_loss),
                        r.divergences])
