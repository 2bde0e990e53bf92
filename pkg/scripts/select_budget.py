"""Per-epoch test metrics for PA-BCE and BCE on held-out seeds, for choosing a training budget.

One run of ``--epochs`` epochs yields every shorter budget too: the state a
budget of b epochs would keep is the validation-best among the first b.

    python scripts/select_budget.py --lr 1e-3 --seeds 10 11 12 13 14 --epochs 20
"""

import argparse

import numpy as np

from riskrank.model import Model, ModelConfig
from riskrank.pipeline import ExperimentConfig, evaluate_with_prior, prepare_synthetic, score_split
from riskrank.train import TrainConfig, finetune


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seeds", type=int, nargs="+", default=[10, 11, 12, 13, 14])
    parser.add_argument("--epochs", type=int, default=20)
    args = parser.parse_args()

    cfg = ExperimentConfig(finetune_epochs=args.epochs, lr=args.lr)
    runs = {}
    for seed in args.seeds:
        data = prepare_synthetic(seed, cfg)
        mcfg = ModelConfig(n_continuous=data.train.x_cont.shape[1], vocab_sizes=list(data.train.schema.vocab_sizes),
                           d_k=cfg.d_k, n_heads=cfg.n_heads, ff_width=cfg.ff_width,
                           n_self_layers=cfg.n_self_layers, n_cross_layers=cfg.n_cross_layers)
        for loss in ("pa-bce", "bce"):
            per_epoch = []

            def record(epoch, model):
                r = evaluate_with_prior(score_split(model, data.test_groups, data.test), data.test)
                per_epoch.append((r.ndcg10, r.mrr, r.pnl))

            tcfg = TrainConfig(finetune_epochs=args.epochs, lr=args.lr, loss=loss, seed=seed, topk=cfg.topk,
                               batch_size=cfg.batch_size)
            h = finetune(Model(mcfg, seed), data.train_groups, data.train, tcfg, data.valid_groups, data.valid,
                         on_epoch=record)
            runs[seed, loss] = (h.val_ndcg10, per_epoch)

    print(f"{'epochs':>6} {'wins':>5} {'P&L>=':>6} {'PA NDCG':>8} {'BCE NDCG':>9}")
    for budget in range(1, args.epochs + 1):
        wins = pnl = 0
        pa_n, bce_n = [], []
        for seed in args.seeds:
            picked = {}
            for loss in ("pa-bce", "bce"):
                val, per_epoch = runs[seed, loss]
                best = max(range(budget), key=lambda e: (val[e], e))
                picked[loss] = per_epoch[best]
            pa, bce = picked["pa-bce"], picked["bce"]
            wins += pa[0] > bce[0] and pa[1] > bce[1]
            pnl += pa[2] >= bce[2]
            pa_n.append(pa[0])
            bce_n.append(bce[0])
        print(f"{budget:>6} {wins:>5} {pnl:>6} {np.mean(pa_n):8.3f} {np.mean(bce_n):9.3f}")


if __name__ == "__main__":
    main()
