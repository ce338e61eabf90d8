#!/usr/bin/env python3
"""Convert the 5000-digit MNIST sample bundled in the mlxtend wheel to IDX.

Usage: make_mnist_subset.py <mnist_5k.csv.gz> <out_dir>

Writes mnist5k-images-idx3-ubyte.gz and mnist5k-labels-idx1-ubyte.gz.
Rows are ordered as in the source file (784 pixel bytes, then the label).
"""
import gzip
import struct
import sys

import numpy as np


def main():
    src, out_dir = sys.argv[1], sys.argv[2]
    rows = np.loadtxt(gzip.open(src), delimiter=",").astype(np.uint8)
    images, labels = rows[:, :-1], rows[:, -1]
    n = images.shape[0]
    with gzip.GzipFile(f"{out_dir}/mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(f"{out_dir}/mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main()
