#!/usr/bin/env python3
"""Convert the digit JSON files of the `mnist` npm package to IDX files.

The package ships 10,000 images as per-digit arrays of intensities in [0, 1]
rounded to three decimals. Each digit is shuffled with a fixed seed and split
into train and test parts; the outputs use the standard MNIST file names.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist
"""

import argparse
import json
import random
import struct
from pathlib import Path

PIXELS = 28 * 28


def load_digit(path):
    values = json.loads(path.read_text())["data"]
    if len(values) % PIXELS:
        raise SystemExit(f"{path}: {len(values)} values is not a whole number of images")
    raw = bytes(max(0, min(255, round(v * 255))) for v in values)
    return [raw[i : i + PIXELS] for i in range(0, len(raw), PIXELS)]


def write_idx(out, stem, images, labels):
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.writelines(images)
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("digits", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    train, test = [], []
    for digit in range(10):
        images = load_digit(args.digits / f"{digit}.json")
        rng.shuffle(images)
        n_test = round(len(images) * args.test_fraction)
        test += [(img, digit) for img in images[:n_test]]
        train += [(img, digit) for img in images[n_test:]]
    rng.shuffle(train)
    rng.shuffle(test)

    args.out.mkdir(parents=True, exist_ok=True)
    for stem, pairs in (("train", train), ("t10k", test)):
        write_idx(args.out, stem, [p[0] for p in pairs], [p[1] for p in pairs])
        print(f"{stem}: {len(pairs)} images")


if __name__ == "__main__":
    main()
