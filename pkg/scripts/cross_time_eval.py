#!/usr/bin/env python3
"""Cross-time generalization: train at one readout time, score at others.

Time-shared weights mean the same parameters define the computation at
every horizon, so a model trained at t=10 can be read out earlier or
later. Normalization statistics for horizons the model never saw are
collected with one pass over the training images.

    python3 scripts/cross_time_eval.py --data DIR \
        --preset adjacent_3state --train-t 10 --eval-t 8,9,10,11,12
"""

import argparse

from unrollnet import trainer
from unrollnet.presets import preset

DESK_SCHEDULE = ((1, 4, 0.05), (5, 5, 0.005))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--preset", default="adjacent_3state")
    ap.add_argument("--train-t", type=int, default=10)
    ap.add_argument("--eval-t", default="8,9,10,11,12")
    ap.add_argument("--widths", default="8,16,32")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--subset-train", type=int, default=1500)
    ap.add_argument("--subset-test", type=int, default=400)
    args = ap.parse_args()

    widths = tuple(int(w) for w in args.widths.split(","))
    train_set, test_set = trainer.load_cifar10(
        args.data, args.subset_train, args.subset_test)

    p = preset(args.preset, t=args.train_t, widths=widths)
    cfg = trainer.TrainConfig(epochs=args.epochs, batch_size=64,
                              lr_schedule=DESK_SCHEDULE, seed=args.seed,
                              augment=False)
    store, metrics = trainer.train(p.graph, p.sharing, p.io, args.train_t, cfg,
                                   train_set, test_set)
    print(f"trained at t={args.train_t}, error {metrics[-1]['test_error']:.4f}")

    print("t,test_error")
    for t in (int(x) for x in args.eval_t.split(",")):
        dup = store.clone()
        if t != args.train_t:
            trainer.collect_bn_stats(dup, p.graph, p.sharing, p.io, t,
                                     train_set.images)
        err = trainer.evaluate(dup, p.graph, p.sharing, p.io, t, test_set)
        print(f"{t},{err:.4f}", flush=True)


if __name__ == "__main__":
    main()
