#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST subset shipped in the `mnist` npm package
into gzip-compressed IDX files.

Usage: mnist_subset.py <package-dir> <output-dir>

The package stores each digit class as a JSON array of 784-value rows scaled
to [0, 1]; values are mapped back to bytes with round(v * 255). Samples are
interleaved by a fixed permutation so that class order is not contiguous.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main() -> None:
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for start in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[start:start + 784])
            samples.append((pixels, digit))
    random.Random(20210101).shuffle(samples)
    n = len(samples)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
