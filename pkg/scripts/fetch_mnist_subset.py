#!/usr/bin/env python3
"""Build IDX files from the 5,000-image MNIST subset shipped inside the mlxtend wheel.

The MNIST mirrors are often unreachable from sandboxed machines while PyPI is
not, so this pulls the mlxtend wheel with pip, extracts ``mnist_5k.csv.gz``
(500 images per digit, raw 0-255 pixels) and re-encodes it in the IDX format
read by :func:`reconbound.data.parse_idx`.

Usage::

    python scripts/fetch_mnist_subset.py data/mnist5k

If you have the full MNIST IDX files, point the CLI at them directly instead.
"""

import argparse
import gzip
import io
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path: Path, array: np.ndarray, magic: int) -> None:
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--version", default="0.24.0", help="mlxtend wheel version")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-d", tmp,
             f"mlxtend=={args.version}"],
            check=True,
        )
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            raw = gzip.decompress(zf.read(MEMBER))

    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images, 0x00000803)
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels, 0x00000801)
    print(f"wrote {len(labels)} images to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
