#!/usr/bin/env python3
"""Readout-time sweep: train one model per t, report params and test error.

Desk-scale reproduction of the accuracy-improves-with-t effect: deeper
unrollings of the same recurrent description (same weight count once
all transitions contribute) score better.

    python3 scripts/readout_sweep.py --data DIR --out sweep.csv \
        --preset fullrec_2state --t-list 2,3,5 --seeds 0,1,2
"""

import argparse
import csv

from unrollnet import trainer
from unrollnet.presets import preset
from unrollnet.unroll import param_count, unroll

DESK_SCHEDULE = ((1, 5, 0.05), (6, 6, 0.005))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="sweep.csv")
    ap.add_argument("--preset", default="fullrec_2state")
    ap.add_argument("--t-list", default="2,3,5")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--widths", default="8,8", help="per-state channel counts")
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--subset-train", type=int, default=1500)
    ap.add_argument("--subset-test", type=int, default=400)
    args = ap.parse_args()

    widths = tuple(int(w) for w in args.widths.split(","))
    train_set, test_set = trainer.load_cifar10(
        args.data, args.subset_train, args.subset_test)

    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for t in (int(x) for x in args.t_list.split(",")):
            p = preset(args.preset, t=t, widths=widths)
            cfg = trainer.TrainConfig(epochs=args.epochs, batch_size=64,
                                      lr_schedule=DESK_SCHEDULE, seed=seed,
                                      augment=False)
            store, metrics = trainer.train(p.graph, p.sharing, p.io, t, cfg,
                                           train_set, test_set)
            n = param_count(unroll(p.graph, p.sharing, p.io, t))
            err = metrics[-1]["test_error"]
            rows.append({"seed": seed, "t": t, "params": n, "test_error": err})
            print(f"seed={seed} t={t} params={n} test_error={err:.4f}", flush=True)

    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["seed", "t", "params", "test_error"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
