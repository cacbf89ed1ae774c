"""Command-line entry point. Thin adapters only; all numerics live in the
library modules so every subcommand is reproducible from (flags, seed)."""

from __future__ import annotations

import os
import sys

# honor the thread cap before any numerical library spins up its pools
_threads = os.environ.get("SPARSE_SAMPLER_THREADS")
if _threads and _threads != "0":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
from dataclasses import replace

import numpy as np


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparse-sampler",
                                description="Sparse adaptive sampling toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write a built-in procedural scene")
    g.add_argument("--name", required=True)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--out", required=True)

    g = sub.add_parser("gen-bank", help="materialize per-pixel sample sets")
    g.add_argument("--scene", required=True, help="built-in scene name or scene directory")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--count", type=int, default=16, help="samples per pixel, power of two")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    g = sub.add_parser("dither-mask", help="void-and-cluster blue noise rank mask")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    g = sub.add_parser("estimate", help="run one estimator over a sample bank")
    g.add_argument("--bank", required=True)
    g.add_argument("--density", help="density PFM; omit for uniform at --budget")
    g.add_argument("--budget", type=float, default=1.0)
    g.add_argument("--variant", default="relaxed")
    g.add_argument("--lam", type=float, default=10.0)
    g.add_argument("--gumbel-temp", type=float, default=1.0)
    g.add_argument("--mask", help="dither mask PNG for blue-noise allocation")
    g.add_argument("--frame", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-noisy", required=True)
    g.add_argument("--out-grad")

    g = sub.add_parser("filter", help="apply a saved kernel field to a PFM image")
    g.add_argument("input")
    g.add_argument("kernels")
    g.add_argument("output")
    g.add_argument("--prev", help="warped previous output PFM (enables temporal taps)")
    g.add_argument("--demod", help="demodulation map PFM")

    g = sub.add_parser("tonemap", help="tonemap a PFM to an sRGB PNG")
    g.add_argument("input")
    g.add_argument("output")
    g.add_argument("--k", type=float, default=0.0, help="exposure offset in log space")
    g.add_argument("--alpha", type=float, default=1.0, help="contrast")
    g.add_argument("--beta", type=float, default=1.0, help="saturation")
    g.add_argument("--toe", type=float, default=0.5)
    g.add_argument("--shoulder", type=float, default=0.5)
    g.add_argument("--sample-tmo", type=int, metavar="SEED",
                   help="draw all parameters from the augmentation ranges")

    for name, help_text in (("optimize", "optimize density, kernels, and demodulation"),
                            ("baseline", "same pipeline with density frozen uniform")):
        g = sub.add_parser(name, help=help_text)
        g.add_argument("--config", help="key = value run configuration file")
        g.add_argument("--out", required=True)
        g.add_argument("--seed", type=int)
        g.add_argument("--scene")
        g.add_argument("--size", type=int)
        g.add_argument("--budget", type=float)
        g.add_argument("--steps", type=int)
        g.add_argument("--variant")
        g.add_argument("--lr", type=float)
        g.add_argument("--mask-kind")

    g = sub.add_parser("compare-grads", help="estimator gradient fidelity table")
    g.add_argument("--scene", default="hetero-gradient")
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--budget", type=float, default=0.7)
    g.add_argument("--variants", default="relaxed,deterministic,straight-through,gumbel,stochastic")
    g.add_argument("--grad-samples", type=int, default=10_000)
    g.add_argument("--fd-eps", type=float, default=0.05)
    g.add_argument("--steps", type=int, default=120)
    g.add_argument("--run-size", type=int, default=16)
    g.add_argument("--run-seeds", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    g = sub.add_parser("analyze", help="error-vs-density table for an adaptive/baseline pair")
    g.add_argument("--adaptive", required=True)
    g.add_argument("--baseline", required=True)
    g.add_argument("--bins", type=int, default=12)
    g.add_argument("--eval-frames", type=int, default=16)
    g.add_argument("--out", required=True)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    import sparse_sampler.banks as banks
    import sparse_sampler.density as density
    import sparse_sampler.images as images
    import sparse_sampler.optimize as optimize
    import sparse_sampler.pyramid as pyramid
    import sparse_sampler.scenes as scenes
    import sparse_sampler.tonemap as tonemap

    if args.command == "gen-scene":
        scene = scenes.builtin_scene(args.name, args.width, args.height)
        scenes.save_scene(scene, args.out)

    elif args.command == "gen-bank":
        scene = _load_scene_arg(args.scene, args.width, args.height)
        bank = banks.generate_bank(scene, args.count, args.seed)
        banks.save_bank(bank, args.out)

    elif args.command == "dither-mask":
        mask = density.void_cluster_mask(args.size, args.seed)
        density.save_mask(mask, args.out)

    elif args.command == "estimate":
        return _cmd_estimate(args)

    elif args.command == "filter":
        kf = pyramid.load_kernel_field(args.kernels)
        noisy = images.read_pfm(args.input)
        prev = images.read_pfm(args.prev) if args.prev else None
        demod = pyramid.DemodMap(images.read_pfm(args.demod).data) if args.demod else None
        out = pyramid.reconstruct(pyramid.build_pyramid(noisy), kf,
                                  prev_warped=prev, demod=demod)
        images.write_pfm(out, args.output)

    elif args.command == "tonemap":
        if args.sample_tmo is not None:
            params = tonemap.sample_tmo(args.sample_tmo)
        else:
            params = tonemap.TmoParams(args.k, args.alpha, args.beta,
                                       args.toe, args.shoulder)
        img = images.read_pfm(args.input)
        images.write_png_srgb(tonemap.tonemap(img, params), args.output)

    elif args.command in ("optimize", "baseline"):
        config = _run_config_from_args(args, optimize)
        result = optimize.run(config, adaptive=args.command == "optimize",
                              out_dir=args.out)
        print(f"final mae = {result.metrics['mae']:.6g}  "
              f"psnr = {result.metrics['psnr']:.4g} dB")

    elif args.command == "compare-grads":
        config = optimize.RunConfig(scene=args.scene, width=args.run_size,
                                    height=args.run_size, budget=args.budget,
                                    steps=args.steps, seed=args.seed)
        reports = optimize.compare_estimators(
            config, args.variants.split(","), grad_samples=args.grad_samples,
            fd_eps=args.fd_eps, grad_size=args.size, run_seeds=args.run_seeds)
        optimize.write_variant_reports(reports, args.out)
        for r in reports:
            print(f"{r.variant:>16}: cos={r.cosine_vs_fd:.4f} "
                  f"loss={r.final_loss:.5g} div={r.divergences}")

    elif args.command == "analyze":
        _cmd_analyze(args)

    return 0


def _load_scene_arg(spec: str, width: int, height: int):
    from . import scenes
    if os.path.isdir(spec):
        return scenes.load_scene(spec)
    return scenes.builtin_scene(spec, width, height)


def _cmd_estimate(args) -> int:
    from . import banks, density, estimators, images, scenes

    bank = banks.load_bank(args.bank)
    if args.density:
        spp = images.read_pfm(args.density).data[:, :, 0]
        dmap = density.DensityMap(spp, float(spp.mean()))
    else:
        dmap = density.uniform_density(bank.width, bank.height, args.budget)
    cfg = estimators.EstimatorConfig(args.variant, args.lam, args.gumbel_temp)
    scene = scenes.builtin_scene(bank.scene_name, bank.width, bank.height) \
        if bank.scene_name else None
    ref = scene.ground_truth if scene else None
    if args.variant == "deterministic":
        result = estimators.estimate_deterministic(dmap, bank, ref)
    else:
        mask = density.load_mask(args.mask) if args.mask else None
        alloc = density.allocate(dmap, "dithered" if args.mask else "stochastic",
                                 mask=mask, frame=args.frame, seed=args.seed,
                                 rule=estimators.take_rule(args.variant),
                                 gumbel_temp=args.gumbel_temp)
        result = estimators.estimate(args.variant, dmap, alloc, bank, cfg, ref=ref)
    images.write_pfm(result.noisy, args.out_noisy)
    if args.out_grad:
        grad = result.grad_density
        # PFM stores non-negative data; shift-encode the gradient sign
        images.write_pfm(images.RadianceImage(np.abs(grad)), args.out_grad)
    print(f"samples used: {int(result.samples_used.sum())}")
    return 0


def _run_config_from_args(args, optimize):
    if args.config:
        config, _ = optimize.read_config(args.config)
    else:
        config = optimize.RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.scene:
        overrides["scene"] = args.scene
    if args.size:
        overrides["width"] = args.size
        overrides["height"] = args.size
    if args.budget is not None:
        overrides["budget"] = args.budget
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.variant:
        overrides["variant"] = args.variant
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.mask_kind:
        overrides["mask_kind"] = args.mask_kind
    return replace(config, **overrides)


def _cmd_analyze(args) -> None:
    import sparse_sampler.images as images
    import sparse_sampler.losses as losses
    import sparse_sampler.optimize as optimize
    import sparse_sampler.scenes as scenes
    import sparse_sampler.tonemap as tonemap
    from .density import DensityMap

    adaptive_cfg, _ = optimize.read_config(os.path.join(args.adaptive, "config.txt"))
    spp = images.read_pfm(os.path.join(args.adaptive, "density.pfm")).data[:, :, 0]
    dmap = DensityMap(spp, adaptive_cfg.budget)

    scene = scenes.builtin_scene(adaptive_cfg.scene, adaptive_cfg.width,
                                 adaptive_cfg.height)
    tmo = adaptive_cfg.tmo_params()
    ref_ldr = tonemap.tonemap_array(scene.ground_truth.data, tmo)

    rows_by_run = {}
    edges = losses.density_bins(spp, adaptive_cfg.budget, args.bins)
    for label, run_dir in (("adaptive", args.adaptive), ("baseline", args.baseline)):
        cfg, _ = optimize.read_config(os.path.join(run_dir, "config.txt"))
        ldr = tonemap.tonemap_array(
            images.read_pfm(os.path.join(run_dir, "final.pfm")).data, tmo)
        err = np.abs(ldr - ref_ldr).mean(axis=-1)
        rows_by_run[label] = losses.error_vs_density(err, spp, adaptive_cfg.budget,
                                                     args.bins, edges=edges)

    import csv
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "pixel_count", "mae_adaptive", "mae_baseline"])
        for ra, rb in zip(rows_by_run["adaptive"], rows_by_run["baseline"]):
            w.writerow([repr(ra.lo), repr(ra.hi), ra.count, repr(ra.mae), repr(rb.mae)])


if __name__ == "__main__":
    sys.exit(main())
