#!/usr/bin/env python3
"""Estimator gradient fidelity table.

For each variant, compares the Monte Carlo averaged analytic gradient
against a common-random-number finite-difference reference computed on the
exact stochastic forward, then runs short optimizations over several seeds
to count divergences.
"""

import argparse
import sys

from sparse_sampler.optimize import (RunConfig, compare_estimators,
                                     write_variant_reports)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene", default="hetero-gradient")
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--budget", type=float, default=0.7)
    ap.add_argument("--grad-samples", type=int, default=10_000)
    ap.add_argument("--fd-eps", type=float, default=0.05)
    ap.add_argument("--steps", type=int, default=120)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants",
                    default="relaxed,deterministic,straight-through,gumbel,stochastic")
    ap.add_argument("--out", default="runs/gradient_comparison.csv")
    args = ap.parse_args()

    cfg = RunConfig(scene=args.scene, width=args.size, height=args.size,
                    budget=args.budget, steps=args.steps, seed=0)
    reports = compare_estimators(cfg, args.variants.split(","),
                                 grad_samples=args.grad_samples,
                                 fd_eps=args.fd_eps, grad_size=args.size,
                                 run_seeds=args.seeds)
    write_variant_reports(reports, args.out)
    print(f"{'variant':>18} {'cos(FD)':>8} {'final loss':>11} {'div':>4}")
    for r in reports:
        print(f"{r.variant:>18} {r.cosine_vs_fd:8.4f} {r.final_loss:11.5g} "
              f"{r.divergences:4d}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
