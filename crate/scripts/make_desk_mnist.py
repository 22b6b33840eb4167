#!/usr/bin/env python3
"""Build the desk-scale MNIST subset (IDX files) from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships 10,000 MNIST
digits as JSON arrays of pixel intensities in [0, 1] rounded to three decimals.
This script restores the original bytes, shuffles with a fixed seed, and
writes a 6000-sample training split and a 1000-sample validation split in the
standard IDX layout expected by `load_mnist`.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_desk_mnist.py package data/mnist-desk
"""
import json
import random
import struct
import sys
from pathlib import Path

N_TRAIN = 6000
N_VAL = 1000
SEED = 20210607


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src = Path(sys.argv[1])
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        raw = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
        assert len(raw) % 784 == 0
        for k in range(len(raw) // 784):
            px = [min(255, max(0, round(v * 255))) for v in raw[k * 784:(k + 1) * 784]]
            samples.append((px, digit))
    random.Random(SEED).shuffle(samples)
    train = samples[:N_TRAIN]
    val = samples[N_TRAIN:N_TRAIN + N_VAL]
    write_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[0] for s in val])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in val])
    print(f"wrote {len(train)} train / {len(val)} validation samples to {out}")


if __name__ == "__main__":
    main()
