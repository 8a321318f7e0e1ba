#!/usr/bin/env python3
"""Write a 5000-digit MNIST subset as gzipped IDX files.

The digits come from the mnist_5k.csv.gz table bundled with the mlxtend
wheel (500 training digits per class). The wheel is fetched with
`pip download` when no local copy is given.
"""
import argparse
import gzip
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def locate_csv(wheel_dir: pathlib.Path) -> pathlib.Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend==0.24.0",
                    "--no-deps", "-d", str(wheel_dir)], check=True)
    wheel = next(wheel_dir.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        zf.extract("mlxtend/data/data/mnist_5k.csv.gz", wheel_dir)
    return wheel_dir / "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path: pathlib.Path, array: np.ndarray) -> None:
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--csv", type=pathlib.Path, help="existing mnist_5k.csv.gz")
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        csv = args.csv or locate_csv(pathlib.Path(tmp))
        table = np.genfromtxt(csv, delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "mnist5k-images-idx3-ubyte.gz", images)
    write_idx(args.out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} digits to {args.out}")


if __name__ == "__main__":
    main()
