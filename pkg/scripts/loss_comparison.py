"""Train PA-BCE and BCE rankers on planted-signal synthetic data and compare test metrics.

    python scripts/loss_comparison.py --seeds 0 1 2 [--losses pa-bce bce w-bce logsoftmax]
"""

import argparse
import json
import time

from riskrank.pipeline import ExperimentConfig, prepare_synthetic, run_loss_comparison


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--losses", nargs="+", default=["pa-bce", "bce"])
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--json", help="write all reports to this file")
    args = parser.parse_args()

    cfg = ExperimentConfig()
    if args.epochs:
        cfg.finetune_epochs = args.epochs
    if args.lr:
        cfg.lr = args.lr
    out = []
    print(f"{'seed':>4} {'loss':<11} {'NDCG@10':>8} {'MRR':>7} {'P&L prior':>11} {'F1 prior':>9} {'F1 no-prior':>12}")
    for seed in args.seeds:
        started = time.perf_counter()
        runs = run_loss_comparison(seed, cfg, args.losses, prepare_synthetic(seed, cfg))
        for loss, r in runs.items():
            w, wo = r.with_prior, r.without_prior
            print(f"{seed:>4} {loss:<11} {w.ndcg10:8.3f} {w.mrr:7.3f} {w.pnl:11.0f} {w.f1:9.4f} {wo.f1:12.4f}")
            out.append({"seed": seed, "loss": loss, "with_prior": vars(w), "without_prior": vars(wo)})
        print(f"     ({time.perf_counter() - started:.0f}s)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"config_hash": cfg.hash(), "runs": out}, fh, indent=2, default=str)


if __name__ == "__main__":
    main()
