#!/usr/bin/env python3
"""Build IDX-format MNIST subset files from the digits bundled in the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships ~10k MNIST digits as
JSON arrays of intensities in [0, 1] rounded to three decimals. This script maps
them back to bytes and writes the standard IDX file names so the Rust loader can
consume them like the original distribution.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package data/mnist --train 4000 --test 1000
"""
import argparse
import json
import os
import random
import struct


def write_idx(path, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, len(dims)))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=4000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        with open(os.path.join(args.package_dir, "src", "digits", f"{digit}.json")) as f:
            data = json.load(f)["data"]
        for i in range(len(data) // 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            samples.append((pixels, digit))

    random.Random(args.seed).shuffle(samples)
    if args.train + args.test > len(samples):
        raise SystemExit(f"only {len(samples)} digits available")
    train = samples[: args.train]
    test = samples[args.train: args.train + args.test]

    os.makedirs(args.out_dir, exist_ok=True)
    for prefix, subset in (("train", train), ("t10k", test)):
        images = [p for pixels, _ in subset for p in pixels]
        labels = [label for _, label in subset]
        write_idx(os.path.join(args.out_dir, f"{prefix}-images-idx3-ubyte"), [len(subset), 28, 28], images)
        write_idx(os.path.join(args.out_dir, f"{prefix}-labels-idx1-ubyte"), [len(subset)], labels)


if __name__ == "__main__":
    main()
