#!/usr/bin/env python3
"""Build the desk-scale digits subset in IDX format.

Source: the 5,000-sample MNIST extract bundled in the `mlxtend` wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 samples per class, 784 pixels + label).

Takes the first 200 samples of each class (in file order) for training and the
next 100 for testing, then writes MNIST-style IDX files:

    data/digits/train-images-idx3-ubyte   (2000 x 28 x 28)
    data/digits/train-labels-idx1-ubyte
    data/digits/test-images-idx3-ubyte    (1000 x 28 x 28)
    data/digits/test-labels-idx1-ubyte

Usage:
    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_digits_idx.py /tmp/mlx/mlxtend-*.whl data/digits
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 100


def write_idx(prefix: Path, images, labels):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")
    by_class = {c: [] for c in range(10)}
    for row in rows:
        vals = [int(float(v)) for v in row.split(",")]
        by_class[vals[-1]].append(vals[:-1])
    train, test = [], []
    for c in range(10):
        samples = by_class[c]
        train += [(img, c) for img in samples[:TRAIN_PER_CLASS]]
        test += [(img, c) for img in samples[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS]]
    # interleave classes so every prefix of a file stays balanced
    for name, split in (("train", train), ("test", test)):
        order = sorted(range(len(split)), key=lambda i: (i % (len(split) // 10), split[i][1]))
        split = [split[i] for i in order]
        write_idx(out / name, [s[0] for s in split], [s[1] for s in split])


if __name__ == "__main__":
    main()
