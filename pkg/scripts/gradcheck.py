"""Finite-difference check of the PA-BCE gradient through the full model over many seeds.

    python scripts/gradcheck.py --seeds 20 --group-size 5 --d-k 8
"""

import argparse
import time

from riskrank.pipeline import model_gradient_check


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--group-size", type=int, default=5)
    parser.add_argument("--d-k", type=int, default=8)
    parser.add_argument("--eps", type=float, default=1e-5)
    args = parser.parse_args()

    started = time.perf_counter()
    worst = 0.0
    for seed in range(args.seeds):
        err = model_gradient_check(seed, group_size=args.group_size, d_k=args.d_k, eps=args.eps)
        worst = max(worst, err)
        print(f"seed {seed:>3}: {err:.3e}")
    print(f"max relative error {worst:.3e} ({time.perf_counter() - started:.0f}s)")


if __name__ == "__main__":
    main()
