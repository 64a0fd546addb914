#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/

Writes gzip-compressed `mnist10k-images-idx3-ubyte.gz` and
`mnist10k-labels-idx1-ubyte.gz`. Samples are shuffled with a fixed seed so
the order is reproducible.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(flat) // 784):
            pixels = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
            samples.append((pixels, digit))
    random.Random(20210401).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
