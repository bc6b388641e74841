#!/usr/bin/env python3
"""Build the Tiny-MNIST IDX files (1000 train / 200 test) used by the
MNIST experiment.

The images come from the 5000-sample MNIST subset bundled with the
`mlxtend` wheel, so only a PyPI mirror is needed.

    python3 scripts/make_tiny_mnist.py [out_dir]
"""
import glob
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

N_TRAIN = 1000
N_TEST = 200
SEED = 20240601


def load_subset():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "mlxtend==0.24.0"],
            check=True,
        )
        wheel = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]
        raw = gzip.decompress(
            zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    return images, labels


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.tobytes())


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/tiny-mnist"
    os.makedirs(out, exist_ok=True)
    images, labels = load_subset()
    order = np.random.default_rng(SEED).permutation(len(labels))
    train, test = order[:N_TRAIN], order[N_TRAIN:N_TRAIN + N_TEST]
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte"), images[train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte"), labels[train])
    write_idx_images(os.path.join(out, "t10k-images-idx3-ubyte"), images[test])
    write_idx_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), labels[test])
    print("train label counts:", np.bincount(labels[train], minlength=10))
    print("test label counts:", np.bincount(labels[test], minlength=10))


if __name__ == "__main__":
    main()
