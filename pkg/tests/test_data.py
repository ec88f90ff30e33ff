"""IDX parsing, batching determinism, Gaussian init, synthetic corpus."""

import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advopt.data import (Dataset, batches, gaussian_perturb, load_dir, load_idx, save_idx,
                         subset, IMAGES_MAGIC, LABELS_MAGIC)
from advopt.errors import DataFormatError, ShapeMismatchError
from advopt.synth import glyph_bank, make_dataset, write_corpus


def write_pair(tmp_path, images, labels, *, magic_img=IMAGES_MAGIC, magic_lab=LABELS_MAGIC,
               truncate=0):
    n, h, w = images.shape
    img_path = tmp_path / "imgs"
    lab_path = tmp_path / "labs"
    blob = struct.pack(">IIII", magic_img, n, h, w) + images.astype(np.uint8).tobytes()
    if truncate:
        blob = blob[:-truncate]
    img_path.write_bytes(blob)
    lab_path.write_bytes(struct.pack(">II", magic_lab, len(labels)) + bytes(labels))
    return img_path, lab_path


def test_load_idx_scales_and_shapes(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, (5, 4, 6), dtype=np.uint8)
    img, lab = write_pair(tmp_path, raw, [0, 1, 2, 3, 4])
    ds = load_idx(img, lab)
    assert ds.images.shape == (5, 1, 4, 6)
    assert ds.images.max() <= 1.0 and ds.images.min() >= 0.0
    assert np.array_equal(ds.images[2, 0], raw[2] / 255.0)
    assert list(ds.labels) == [0, 1, 2, 3, 4]


def test_load_idx_wrong_magic(tmp_path):
    img, lab = write_pair(tmp_path, np.zeros((2, 3, 3), dtype=np.uint8), [0, 1],
                          magic_img=0x00000801)
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(img, lab)


def test_load_idx_count_mismatch(tmp_path):
    img, lab = write_pair(tmp_path, np.zeros((10, 3, 3), dtype=np.uint8), list(range(9)))
    with pytest.raises(DataFormatError, match="mismatch"):
        load_idx(img, lab)


def test_load_idx_truncated(tmp_path):
    img, lab = write_pair(tmp_path, np.zeros((4, 3, 3), dtype=np.uint8), [0, 1, 2, 3], truncate=5)
    with pytest.raises(DataFormatError):
        load_idx(img, lab)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    raw = rng.integers(0, 256, (7, 5, 5), dtype=np.uint8)
    img, lab = write_pair(tmp_path, raw, list(range(7)))
    ds = load_idx(img, lab)
    save_idx(ds, tmp_path / "img2", tmp_path / "lab2")
    assert (tmp_path / "img2").read_bytes() == img.read_bytes()
    assert (tmp_path / "lab2").read_bytes() == lab.read_bytes()


@pytest.mark.skipif(not os.environ.get("ADVOPT_MNIST_DIR"),
                    reason="set ADVOPT_MNIST_DIR to a directory with the canonical IDX files")
def test_canonical_corpus_shape():
    ds = load_dir(os.environ["ADVOPT_MNIST_DIR"], "train")
    assert len(ds) == 60000
    assert ds.images.shape[1:] == (1, 28, 28)
    assert set(np.unique(ds.labels)) == set(range(10))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def small_dataset(n=5):
    rng = np.random.default_rng(2)
    return Dataset(rng.uniform(0, 1, (n, 1, 2, 2)), rng.integers(0, 3, n).astype(np.int64))


def test_batch_sizes_partition():
    got = [len(b.y) for b in batches(small_dataset(5), 2, seed=0)]
    assert got == [2, 2, 1]


def test_batches_deterministic_and_exhaustive():
    ds = small_dataset(11)
    b1 = batches(ds, 3, seed=42)
    b2 = batches(ds, 3, seed=42)
    for a, b in zip(b1, b2):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    # every example appears exactly once per epoch
    seen = np.concatenate([b.x.reshape(len(b.y), -1) for b in b1])
    want = ds.images.reshape(11, -1)
    assert sorted(map(tuple, seen)) == sorted(map(tuple, want))


def test_different_seeds_differ():
    ds = small_dataset(16)
    base = np.concatenate([b.y for b in batches(ds, 4, seed=0)])
    assert any(
        not np.array_equal(base, np.concatenate([b.y for b in batches(ds, 4, seed=s)]))
        for s in range(1, 101)
    )


def test_empty_dataset_rejected():
    ds = Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=np.int64))
    with pytest.raises(DataFormatError):
        batches(ds, 2, seed=0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), b=st.integers(1, 13), seed=st.integers(0, 10))
def test_batch_union_property(n, b, seed):
    ds = Dataset(np.linspace(0, 1, n).reshape(n, 1, 1, 1), np.zeros(n, dtype=np.int64))
    got = np.sort(np.concatenate([bt.x.reshape(-1) for bt in batches(ds, b, seed)]))
    assert np.array_equal(got, ds.images.reshape(-1))


def test_subset_is_seeded_prefix_of_shuffle():
    ds = small_dataset(20)
    s1 = subset(ds, 8, seed=5)
    s2 = subset(ds, 8, seed=5)
    assert np.array_equal(s1.images, s2.images)
    assert len(s1) == 8
    assert len(subset(ds, 50, seed=5)) == 20  # larger than the dataset: unchanged


# ---------------------------------------------------------------------------
# gaussian initialization
# ---------------------------------------------------------------------------


def test_gaussian_perturb_scale():
    x = np.zeros((1000, 1, 10, 10))  # 1e5 coordinates
    z = gaussian_perturb(x, seed=0) - x
    assert np.std(z) == pytest.approx(0.001, rel=0.2)


def test_gaussian_perturb_deterministic():
    x = np.random.default_rng(3).uniform(0, 1, (2, 1, 4, 4))
    assert np.array_equal(gaussian_perturb(x, seed=9), gaussian_perturb(x, seed=9))
    assert not np.array_equal(gaussian_perturb(x, seed=9), gaussian_perturb(x, seed=10))


def test_gaussian_perturb_not_clamped():
    # points at the pixel-range boundary may leave [0, 1]; projection later
    # restores feasibility
    x = np.zeros((200, 1, 5, 5))
    z = gaussian_perturb(x, seed=1)
    assert z.min() < 0.0


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def test_glyphs_are_distinct():
    bank = glyph_bank()
    flat = bank[:, 0].reshape(10, -1)
    for i in range(10):
        for j in range(i + 1, 10):
            assert np.abs(flat[i] - flat[j]).max() > 0.5


def test_make_dataset_contract():
    ds = make_dataset(64, seed=0)
    assert ds.images.shape == (64, 1, 28, 28)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.labels)) <= set(range(10))
    ds2 = make_dataset(64, seed=0)
    assert np.array_equal(ds.images, ds2.images)
    # quantized to the byte grid so IDX round-trips exactly
    assert np.array_equal(ds.images, np.rint(ds.images * 255) / 255)


def test_write_corpus_round_trip(tmp_path):
    write_corpus(tmp_path, 30, 10, seed=1)
    train = load_dir(tmp_path, "train")
    test = load_dir(tmp_path, "test")
    assert len(train) == 30 and len(test) == 10
    direct = make_dataset(30, seed=(1, 0))
    assert np.array_equal(train.images, direct.images)
    assert np.array_equal(train.labels, direct.labels)
