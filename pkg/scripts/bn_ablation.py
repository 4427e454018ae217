#!/usr/bin/env python3
"""Time-specific normalization ablation.

Trains a model normally, then scores it twice: once with its per-(site, t)
statistics and once with statistics forcibly pooled across time steps.
Sharing statistics across time generally hurts, since activation moments
drift as the recurrence deepens.

    python3 scripts/bn_ablation.py --data DIR --seeds 0,1,2
"""

import argparse

from unrollnet import trainer
from unrollnet.presets import preset
from unrollnet.store import forced_time_shared_stats

DESK_SCHEDULE = ((1, 5, 0.05), (6, 6, 0.005))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--preset", default="fullrec_2state")
    ap.add_argument("--t", type=int, default=3)
    ap.add_argument("--widths", default="8,8")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--subset-train", type=int, default=1500)
    ap.add_argument("--subset-test", type=int, default=400)
    args = ap.parse_args()

    widths = tuple(int(w) for w in args.widths.split(","))
    train_set, test_set = trainer.load_cifar10(
        args.data, args.subset_train, args.subset_test)

    print("seed,per_t_error,shared_t_error")
    for seed in (int(s) for s in args.seeds.split(",")):
        p = preset(args.preset, t=args.t, widths=widths)
        cfg = trainer.TrainConfig(epochs=args.epochs, batch_size=64,
                                  lr_schedule=DESK_SCHEDULE, seed=seed,
                                  augment=False)
        store, metrics = trainer.train(p.graph, p.sharing, p.io, args.t, cfg,
                                       train_set, test_set)
        per_t = metrics[-1]["test_error"]
        shared = trainer.evaluate(forced_time_shared_stats(store), p.graph,
                                  p.sharing, p.io, args.t, test_set)
        print(f"{seed},{per_t:.4f},{shared:.4f}", flush=True)


if __name__ == "__main__":
    main()
