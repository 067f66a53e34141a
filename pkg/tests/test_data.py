import gzip
from pathlib import Path

import numpy as np
import pytest

from flatcomp.data import (IMAGES_MAGIC, LABELS_MAGIC, idx_pair, load_mnist_dir, load_mnist_idx,
                           synth_dataset, write_idx)
from flatcomp.errors import ConsistencyError, FormatError

FULL_MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist"


@pytest.fixture
def four_images(tmp_path):
    pixels = np.arange(4 * 28 * 28, dtype=np.uint64).reshape(4, 28, 28) % 256
    write_idx(tmp_path / "img", pixels, IMAGES_MAGIC)
    write_idx(tmp_path / "lab", np.array([3, 1, 4, 1]), LABELS_MAGIC)
    return tmp_path, pixels


def test_four_image_fixture(four_images):
    d, pixels = four_images
    ds = load_mnist_idx(d / "img", d / "lab")
    assert ds.images.shape == (4, 1, 28, 28) and ds.images.dtype == np.float64
    np.testing.assert_array_equal(ds.labels, [3, 1, 4, 1])
    np.testing.assert_array_equal(ds.images[:, 0] * 255.0, pixels)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_gzip_reads_the_same(four_images):
    d, _ = four_images
    for name in ("img", "lab"):
        (d / f"{name}.gz").write_bytes(gzip.compress((d / name).read_bytes()))
    a = load_mnist_idx(d / "img", d / "lab")
    b = load_mnist_idx(d / "img.gz", d / "lab.gz")
    np.testing.assert_array_equal(a.images, b.images)


def test_truncated_payload(four_images):
    d, _ = four_images
    raw = (d / "img").read_bytes()
    (d / "img").write_bytes(raw[:-100])
    with pytest.raises(FormatError):
        load_mnist_idx(d / "img", d / "lab")
    (d / "img").write_bytes(raw[:10])
    with pytest.raises(FormatError):
        load_mnist_idx(d / "img", d / "lab")


def test_bad_magic(four_images):
    d, _ = four_images
    with pytest.raises(FormatError):
        load_mnist_idx(d / "lab", d / "img")


def test_count_mismatch(four_images):
    d, _ = four_images
    write_idx(d / "lab", np.array([3, 1, 4]), LABELS_MAGIC)
    with pytest.raises(ConsistencyError):
        load_mnist_idx(d / "img", d / "lab")


def test_bundled_subset(mnist_train, mnist_test):
    assert len(mnist_train) == 4000 and len(mnist_test) == 1000
    assert mnist_train.num_classes == 10
    assert set(np.unique(mnist_test.labels)) == set(range(10))


@pytest.mark.skipif(not FULL_MNIST.exists(), reason="full MNIST not present")
def test_full_mnist_histogram():
    ds = load_mnist_dir(FULL_MNIST, "train")
    assert len(ds) == 60000
    np.testing.assert_array_equal(np.bincount(ds.labels),
                                  [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949])


def test_idx_pair_prefers_gzip(tmp_path):
    (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(b"")
    img, lab = idx_pair(tmp_path, "test")
    assert img.name.endswith(".gz") and not lab.name.endswith(".gz")


def test_blobs_noise_zero_nearest_centre():
    ds = synth_dataset("blobs", 300, 3, 0.0, seed=1)
    pts = ds.images.reshape(300, -1)
    centres = np.stack([pts[ds.labels == c].mean(axis=0) for c in range(3)])
    nearest = np.argmin(((pts[:, None] - centres[None]) ** 2).sum(-1), axis=1)
    assert (nearest == ds.labels).all()


def test_synthetic_determinism():
    for kind in ("blobs", "spiral"):
        a = synth_dataset(kind, 90, 3, 0.1, seed=4)
        b = synth_dataset(kind, 90, 3, 0.1, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(synth_dataset("blobs", 90, 3, 0.1, 4).images,
                              synth_dataset("blobs", 90, 3, 0.1, 5).images)


def test_balanced_classes():
    ds = synth_dataset("spiral", 600, 3, 0.2, seed=0)
    np.testing.assert_array_equal(np.bincount(ds.labels), [200, 200, 200])
    assert ds.images.shape == (600, 1, 1, 2)


def test_bad_synthetic_arguments():
    with pytest.raises(ValueError):
        synth_dataset("moons", 10, 2, 0.1, 0)
    with pytest.raises(ValueError):
        synth_dataset("spiral", 10, 2, 0.1, 0, features=3)
    with pytest.raises(ValueError):
        synth_dataset("blobs", 2, 3, 0.1, 0)


def test_subset_and_classes(mnist_test):
    odd = mnist_test.with_classes([1, 3])
    assert set(np.unique(odd.labels)) == {1, 3}
    assert len(mnist_test.head(10)) == 10
