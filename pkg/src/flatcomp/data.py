"""Datasets: IDX (MNIST-format) files and small synthetic generators."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConsistencyError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index, source: Optional[str] = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.split,
                       source if source is not None else self.source)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))), f"{self.source}[:{n}]")

    def with_classes(self, classes: Sequence[int]) -> "Dataset":
        keep = np.flatnonzero(np.isin(self.labels, list(classes)))
        tag = ",".join(str(c) for c in classes)
        return self.subset(keep, f"{self.source}{{{tag}}}")


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream") from exc
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "train",
                   source: Optional[str] = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), split, source or Path(images_path).name)


def idx_pair(data_dir, split: str = "train"):
    """Standard MNIST file names inside ``data_dir`` (``.gz`` preferred when present)."""
    prefix = "train" if split == "train" else "t10k"
    d = Path(data_dir)
    paths = []
    for kind in ("images-idx3", "labels-idx1"):
        base = d / f"{prefix}-{kind}-ubyte"
        gz = base.with_name(base.name + ".gz")
        paths.append(gz if gz.exists() else base)
    return tuple(paths)


def load_mnist_dir(data_dir, split: str = "train") -> Dataset:
    images, labels = idx_pair(data_dir, split)
    return load_mnist_idx(images, labels, split, source=f"mnist:{Path(data_dir).name}:{split}")


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as an (uncompressed) IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def synth_dataset(kind: str, n: int, classes: int, noise: float, seed: int,
                  features: int = 2, split: str = "train") -> Dataset:
    """Deterministic toy data shaped ``n x 1 x 1 x features``, rescaled into [0, 1].

    ``blobs``: Gaussian clusters (std ``noise``) around seeded centres.
    ``spiral``: ``classes`` interleaved arms in the plane (``features`` must be 2).
    Labels cycle ``0..classes-1`` so class counts differ by at most one.
    """
    if n < classes or classes < 1:
        raise ValueError(f"need n >= classes >= 1, got n={n}, classes={classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    if kind == "blobs":
        centers = rng.uniform(-5.0, 5.0, size=(classes, features))
        pts = centers[labels] + noise * rng.standard_normal((n, features))
    elif kind == "spiral":
        if features != 2:
            raise ValueError("spiral data is two-dimensional")
        r = np.empty(n)
        for c in range(classes):
            idx = np.flatnonzero(labels == c)
            r[idx] = np.linspace(0.05, 1.0, len(idx))
        theta = r * 4.0 + labels * (2 * np.pi / classes) + noise * rng.standard_normal(n)
        pts = np.stack([r * np.sin(theta), r * np.cos(theta)], axis=1)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    lo, hi = pts.min(), pts.max()
    pts = (pts - lo) / (hi - lo) if hi > lo else np.zeros_like(pts)
    return Dataset(pts.reshape(n, 1, 1, features), labels, split,
                   f"synth:{kind}:n={n}:k={classes}:noise={noise}:seed={seed}")
