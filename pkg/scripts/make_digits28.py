#!/usr/bin/env python3
"""Materialize the digits28 corpus (MNIST-shaped IDX files) under a data root."""

import argparse

from splitbd.datagen import TEST_COUNT, TRAIN_COUNT, generate_digits28


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="data",
                    help="directory that will hold the digits28/ folder (default: data)")
    ap.add_argument("--train-count", type=int, default=TRAIN_COUNT)
    ap.add_argument("--test-count", type=int, default=TEST_COUNT)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = generate_digits28(args.root, args.train_count, args.test_count, seed=args.seed)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
