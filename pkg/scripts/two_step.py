"""Second-step classifier with and without the ranker's scores as an extra feature.

    python scripts/two_step.py --seeds 0 1 2 [--unbalanced]
"""

import argparse

from riskrank.pipeline import ExperimentConfig, prepare_synthetic, run_loss_comparison, run_two_step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--unbalanced", action="store_true", help="plain instead of class-balanced weights")
    parser.add_argument("--top", type=int, default=5, help="features to list by importance")
    args = parser.parse_args()

    cfg = ExperimentConfig()
    for seed in args.seeds:
        data = prepare_synthetic(seed, cfg)
        model = run_loss_comparison(seed, cfg, ("pa-bce",), data)["pa-bce"].model
        c = run_two_step(model, data, seed, balanced=not args.unbalanced)
        b, a = c.baseline, c.augmented
        print(f"seed {seed}: F1 {b.f1:.4f} -> {a.f1:.4f} ({c.f1_delta:+.4f})  "
              f"P&L {b.pnl:.0f} -> {a.pnl:.0f} ({c.pnl_delta:+.0f})  threshold {b.threshold} -> {a.threshold}")
        for name, drop in a.ascending_importance()[-args.top:][::-1]:
            print(f"    {name:<22} {drop:+.4f}")


if __name__ == "__main__":
    main()
