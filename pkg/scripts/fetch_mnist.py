#!/usr/bin/env python3
"""Download the four MNIST IDX files for the native-resolution experiments.

Fetches the gzipped archives from the public S3 mirror, decompresses them
into the target directory, and sanity-checks each file by decoding it.
Needs general network access, which sandboxed environments may not have —
in that case obtain the files elsewhere and point PRFLOW_MNIST_DIR (or
--dest) at them.

Usage:
    python3 scripts/fetch_mnist.py [--dest data/mnist]
"""

import argparse
import gzip
import sys
import urllib.request
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from prflow.data import load_idx

MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"
FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dest", default="data/mnist")
    args = ap.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)

    for name in FILES:
        target = dest / name
        if target.exists():
            print(f"{target} already present, skipping download")
            continue
        url = MIRROR + name + ".gz"
        print(f"fetching {url}")
        with urllib.request.urlopen(url) as resp:
            target.write_bytes(gzip.decompress(resp.read()))

    train = load_idx(dest / FILES[0], dest / FILES[1])
    test = load_idx(dest / FILES[2], dest / FILES[3])
    print(f"ok: {train.images.shape[0]} train / {test.images.shape[0]} test images "
          f"of shape {train.images.shape[1:]} at {dest}")
    print(f"export PRFLOW_MNIST_DIR={dest.resolve()}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
