"""Write the 5000-sample MNIST subset bundled with mlxtend as gzipped IDX files.

Usage:
    python tools/make_mnist_subset.py path/to/mlxtend-*.whl data/mnist5k

The subset is sorted by class; each class is split 400 train / 100 test and
each split is shuffled with a fixed seed so every prefix is class-mixed.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(CSV_MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)

    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    rng = np.random.default_rng(0)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.asarray(idx))
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", pixels[idx].reshape(-1, 28, 28), 0x803)
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", labels[idx], 0x801)
        print(prefix, len(idx))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
