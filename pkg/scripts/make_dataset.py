#!/usr/bin/env python3
"""Generate a synthetic dataset in the binary batch layout.

The files are drop-in replacements for the real 32x32 color image
batches: 10 shape classes, mirror-symmetric glyphs, learnable by a
small model in a few epochs. Useful for desk-scale experiments and CI
where the real dataset is unavailable.
"""

import argparse

from unrollnet import synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--n-train", type=int, default=4000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    synth.make_dataset(args.out, args.n_train, args.n_test, args.seed)
    print(f"wrote data_batch_1.bin ({args.n_train} records) and "
          f"test_batch.bin ({args.n_test} records) to {args.out}")


if __name__ == "__main__":
    main()
