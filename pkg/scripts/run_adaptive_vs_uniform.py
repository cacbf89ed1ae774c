#!/usr/bin/env python3
"""Desk experiment: adaptive density against the uniform baseline.

Runs both optimizations with identical seeds, prints the headline MAE
comparison, and writes the error-versus-sampling-ratio table next to the
run directories.
"""

import argparse
import os
import sys

import numpy as np

from sparse_sampler.losses import (density_bins, error_vs_density,
                                   write_error_vs_density_csv)
from sparse_sampler.optimize import RunConfig, run, uniform_baseline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="checker-spike")
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--budget", type=float, default=0.25)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--bins", type=int, default=12)
    ap.add_argument("--out", default="runs/adaptive_vs_uniform")
    args = ap.parse_args()

    cfg = RunConfig(scene=args.scene, width=args.size, height=args.size,
                    budget=args.budget, steps=args.steps, seed=args.seed)
    print(f"adaptive run: {args.scene} {args.size}x{args.size} "
          f"@ {args.budget} spp, {args.steps} steps")
    adaptive = run(cfg, out_dir=os.path.join(args.out, "adaptive"))
    print(f"  mae {adaptive.metrics['mae']:.6f}  psnr {adaptive.metrics['psnr']:.3f} dB")
    baseline = uniform_baseline(cfg, out_dir=os.path.join(args.out, "baseline"))
    print(f"baseline mae {baseline.metrics['mae']:.6f}  "
          f"psnr {baseline.metrics['psnr']:.3f} dB")
    gain = 1.0 - adaptive.metrics["mae"] / baseline.metrics["mae"]
    print(f"adaptive improves MAE by {gain * 100:.1f}%")

    edges = density_bins(adaptive.density.spp, cfg.budget, args.bins)
    rows_a = error_vs_density(adaptive.err_map, adaptive.density.spp,
                              cfg.budget, args.bins, edges)
    rows_b = error_vs_density(baseline.err_map, adaptive.density.spp,
                              cfg.budget, args.bins, edges)
    write_error_vs_density_csv(rows_a, os.path.join(args.out, "bins_adaptive.csv"))
    write_error_vs_density_csv(rows_b, os.path.join(args.out, "bins_baseline.csv"))
    print(f"{'ratio bin':>22} {'pixels':>8} {'adaptive':>10} {'baseline':>10}")
    for a, b in zip(rows_a, rows_b):
        if a.count:
            print(f"[{a.lo:8.3f}, {a.hi:8.3f}] {a.count:8d} {a.mae:10.5f} {b.mae:10.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
