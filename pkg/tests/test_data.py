import os
import struct

import numpy as np
import pytest

import datagen
from seqattack import data


@pytest.fixture()
def idx_pair(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 5, 5] = 128
    labels = np.array([3, 7], dtype=np.uint8)
    return datagen.write_idx(str(tmp_path), images, labels, "mini")


def test_load_idx_decodes_header_and_pixels(idx_pair):
    samples = data.load_idx(*idx_pair)
    assert len(samples) == 2
    assert samples[0].label == 3 and samples[1].label == 7
    assert samples[0].pixels[0, 0] == pytest.approx(1.0)
    assert samples[0].pixels[1, 1] == pytest.approx(-1.0)
    assert samples[0].pixels.shape == (28, 28)


def test_load_idx_rejects_wrong_magic(idx_pair, tmp_path):
    img_path, lab_path = idx_pair
    # label magic where the image magic belongs
    swapped = tmp_path / "swapped-images"
    raw = bytearray(open(img_path, "rb").read())
    raw[:4] = struct.pack(">i", 2049)
    swapped.write_bytes(bytes(raw))
    with pytest.raises(data.IdxFormatError, match="magic"):
        data.load_idx(str(swapped), lab_path)
    # image magic in the labels slot
    with pytest.raises(data.IdxFormatError, match="magic"):
        data.load_idx(img_path, img_path)


@pytest.mark.parametrize("byte_offset", [0, 1, 2, 3])
def test_load_idx_rejects_corrupted_magic(idx_pair, tmp_path, byte_offset):
    img_path, lab_path = idx_pair
    raw = bytearray(open(img_path, "rb").read())
    raw[byte_offset] ^= 0x41
    bad = tmp_path / "bad-images"
    bad.write_bytes(bytes(raw))
    with pytest.raises(data.IdxFormatError):
        data.load_idx(str(bad), lab_path)


def test_load_idx_rejects_truncated_payload(idx_pair, tmp_path):
    img_path, lab_path = idx_pair
    raw = open(img_path, "rb").read()
    bad = tmp_path / "short-images"
    bad.write_bytes(raw[:-10])
    with pytest.raises(data.IdxFormatError, match="payload"):
        data.load_idx(str(bad), lab_path)


def test_load_idx_rejects_count_mismatch(idx_pair, tmp_path):
    img_path, _ = idx_pair
    lab = tmp_path / "labels-wrong-count"
    lab.write_bytes(struct.pack(">ii", 2049, 3) + bytes([1, 2, 3]))
    with pytest.raises(data.IdxFormatError, match="labels"):
        data.load_idx(img_path, str(lab))


def test_normalize_endpoints():
    assert data.normalize(0) == pytest.approx(-1.0)
    assert data.normalize(255) == pytest.approx(1.0)


def test_denormalize_endpoints_and_rounding():
    assert data.denormalize(np.array([-1.0]))[0] == 0
    assert data.denormalize(np.array([1.0]))[0] == 255
    assert data.denormalize(np.array([0.0]))[0] == 128  # half rounds up
    assert data.denormalize(np.array([1.01]))[0] == 255
    assert data.denormalize(np.array([-2.0]))[0] == 0


def test_denormalize_roundtrip_is_identity_on_all_bytes():
    bytes_in = np.arange(256, dtype=np.uint8)
    out = data.denormalize(data.normalize(bytes_in))
    assert np.array_equal(out, bytes_in)


def test_layout_fits_canvas():
    for k in range(data.MIN_SEQ_LEN, data.MAX_SEQ_LEN + 1):
        size, width = data._layout(k)
        assert size <= 24
        assert width == k * size + (k - 1)
        assert width <= data.SEQ_COLS


@pytest.fixture(scope="module")
def mini_mnist():
    images, labels = datagen.make_corpus(60, 123)
    return [data.ImageSample(data.normalize(i), int(l)) for i, l in zip(images, labels)]


def test_synth_seqmnist_deterministic(mini_mnist):
    a = data.synth_seqmnist(mini_mnist, 5, seed=7)
    b = data.synth_seqmnist(mini_mnist, 5, seed=7)
    for s, t in zip(a, b):
        assert np.array_equal(s.pixels, t.pixels) and s.label == t.label
    c = data.synth_seqmnist(mini_mnist, 5, seed=8)
    assert any(not np.array_equal(s.pixels, t.pixels) for s, t in zip(a, c))


def test_synth_seqmnist_shapes_and_ranges(mini_mnist):
    out = data.synth_seqmnist(mini_mnist, 20, seed=1)
    assert len(out) == 20
    for s in out:
        assert s.pixels.shape == (32, 100)
        assert data.MIN_SEQ_LEN <= len(s.label) <= data.MAX_SEQ_LEN
        assert all(0 <= d <= 9 for d in s.label)
        assert s.pixels.min() >= -1.0 and s.pixels.max() <= 1.0


def test_synth_seqmnist_digits_have_background_gaps(mini_mnist):
    # the 1-px gap columns between digits stay at background level
    out = data.synth_seqmnist(mini_mnist, 10, seed=3)
    for s in out:
        k = len(s.label)
        size, width = data._layout(k)
        cols = np.where((s.pixels > -0.999).any(axis=0))[0]
        assert cols.size > 0
        margin = cols[0]
        for j in range(1, k):
            gap_col = margin + j * (size + 1) - 1
            assert (s.pixels[:, gap_col] <= -0.999).all()


def test_synth_from_disjoint_splits_shares_nothing(mini_mnist):
    train_src = mini_mnist[:30]
    test_src = mini_mnist[30:]
    tr = data.synth_seqmnist(train_src, 5, seed=1)
    te = data.synth_seqmnist(test_src, 5, seed=1)
    assert all(isinstance(s, data.SeqSample) for s in tr + te)


def test_pgm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(32, 100)).astype(np.uint8)
    path = tmp_path / "img.pgm"
    data.write_pgm(str(path), img)
    back = data.read_pgm(str(path))
    assert np.array_equal(img, back)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n100 32\n255\n")


def test_read_pgm_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n2 2\n255\n")
    with pytest.raises(ValueError):
        data.read_pgm(str(p))
    p.write_bytes(b"P5\n2 2\n255\n\x00\x01")
    with pytest.raises(ValueError, match="truncated"):
        data.read_pgm(str(p))
