#!/usr/bin/env python3
"""Build MNIST IDX files from the digits bundled in the `mnist` npm package.

The package ships 10,000 MNIST digits as JSON arrays of intensities in [0, 1]
(rounded to three decimals). They are converted back to bytes, shuffled with a
fixed seed and written as an 8,000-image training file and a 2,000-image test
file in the standard big-endian IDX layout.

Usage: python3 scripts/fetch_mnist.py [OUT_DIR]   (default: data/mnist)
"""

import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
SIDE = 28
TRAIN = 8000
SEED = 20240501


def fetch_digits(workdir: Path):
    subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True, stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tar:
        tar.extractall(workdir, filter="data")
    samples = []
    for label in range(10):
        raw = json.loads((workdir / "package" / "src" / "digits" / f"{label}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            pixels = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((bytes(min(255, max(0, round(v * 255))) for v in pixels), label))
    return samples


def write_idx(path_images: Path, path_labels: Path, samples):
    with open(path_images, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), SIDE, SIDE))
        for pixels, _ in samples:
            f.write(pixels)
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        samples = fetch_digits(Path(tmp))
    random.Random(SEED).shuffle(samples)
    write_idx(out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte", samples[:TRAIN])
    write_idx(out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte", samples[TRAIN:])
    print(f"wrote {TRAIN} training and {len(samples) - TRAIN} test digits to {out}")


if __name__ == "__main__":
    main()
