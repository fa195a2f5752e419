"""Dataset ingestion and synthesis.

IDX is the classic big-endian MNIST container: images carry magic 2051 and
dims (n, 28, 28) with one byte per pixel, labels carry magic 2049 and dims
(n,).  Pixels are normalized to [-1, 1] at ingestion (p / 127.5 - 1) so the
whole valid input domain is covered by a tanh reparameterization downstream.

Sequence samples are synthesized by concatenating digit images onto a
32 x 100 canvas with a -1 background; labels are digit strings of length
3 to 6.  PGM (P5, maxval 255, binary) is the dump format for images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

SEQ_ROWS, SEQ_COLS = 32, 100
MIN_SEQ_LEN, MAX_SEQ_LEN = 3, 6


class IdxFormatError(ValueError):
    """Malformed IDX container (magic, dims, or payload size)."""


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray   # (28, 28) float64 in [-1, 1]
    label: int           # 0..9


@dataclass(frozen=True)
class SeqSample:
    pixels: np.ndarray   # (32, 100) float64 in [-1, 1]
    label: tuple[int, ...]   # 3..6 digits, each 0..9


def normalize(byte_pixels) -> np.ndarray:
    """Map bytes 0..255 onto [-1, 1]."""
    return np.asarray(byte_pixels, dtype=np.float64) / 127.5 - 1.0


def denormalize(x) -> np.ndarray:
    """Map [-1, 1] reals back to bytes: round((x+1)*127.5), half rounds up."""
    x = np.asarray(x, dtype=np.float64)
    b = np.floor((x + 1.0) * 127.5 + 0.5)
    return np.clip(b, 0, 255).astype(np.uint8)


def load_idx(images_path, labels_path) -> list[ImageSample]:
    """Decode an MNIST-style IDX image/label pair into normalized samples."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxFormatError("image file truncated before header end")
        magic, n, rows, cols = struct.unpack(">iiii", head)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic {magic}, expected {IMAGE_MAGIC}")
        if rows != 28 or cols != 28:
            raise IdxFormatError(f"expected 28x28 images, got {rows}x{cols}")
        payload = f.read()
    if len(payload) != n * rows * cols:
        raise IdxFormatError(
            f"image payload holds {len(payload)} bytes, expected {n * rows * cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)

    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxFormatError("label file truncated before header end")
        magic, n_lab = struct.unpack(">ii", head)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic {magic}, expected {LABEL_MAGIC}")
        lab_payload = f.read()
    if len(lab_payload) != n_lab:
        raise IdxFormatError(
            f"label payload holds {len(lab_payload)} bytes, expected {n_lab}")
    if n_lab != n:
        raise IdxFormatError(f"{n} images but {n_lab} labels")
    labels = np.frombuffer(lab_payload, dtype=np.uint8)
    if labels.size and labels.max() > 9:
        raise IdxFormatError("labels outside 0..9")

    return [ImageSample(normalize(images[i]), int(labels[i])) for i in range(n)]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample at pixel centers; deterministic, pure numpy."""
    in_h, in_w = img.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = img[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
    b = img[np.ix_(y0, x1)] * (1 - wy) * wx
    c = img[np.ix_(y1, x0)] * wy * (1 - wx)
    d = img[np.ix_(y1, x1)] * wy * wx
    return a + b + c + d


def _layout(k: int) -> tuple[int, int]:
    """Digit box size and strip width for k digits: height 24 with 1-px gaps,
    shrunk uniformly when the strip would overflow the 100-column canvas."""
    size = 24
    width = k * size + (k - 1)
    if width > SEQ_COLS:
        size = (SEQ_COLS - (k - 1)) // k
        width = k * size + (k - 1)
    return size, width


def synth_seqmnist(mnist: list[ImageSample], count: int, seed: int) -> list[SeqSample]:
    """Concatenate digit images into 32x100 sequence samples.

    Per sample: length k in {3..6} uniform, k digits drawn uniformly from
    ``mnist``, each scaled to the layout box, laid left to right with 1-pixel
    gaps at a uniform left margin, centered vertically on a -1 background.
    Deterministic per seed.  Draw train and test synthesis from disjoint
    source splits to keep the underlying images disjoint.
    """
    if not mnist:
        raise ValueError("empty source dataset")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        k = int(rng.integers(MIN_SEQ_LEN, MAX_SEQ_LEN + 1))
        picks = rng.integers(0, len(mnist), size=k)
        size, width = _layout(k)
        canvas = np.full((SEQ_ROWS, SEQ_COLS), -1.0)
        margin = int(rng.integers(0, SEQ_COLS - width + 1))
        top = (SEQ_ROWS - size) // 2
        label = []
        col = margin
        for idx in picks:
            src = mnist[int(idx)]
            digit = _resize_bilinear(src.pixels, size, size)
            canvas[top:top + size, col:col + size] = np.maximum(
                canvas[top:top + size, col:col + size], digit)
            label.append(src.label)
            col += size + 1
        out.append(SeqSample(np.clip(canvas, -1.0, 1.0), tuple(label)))
    return out


# ----------------------------------------------------------------------
# PGM


def write_pgm(path, byte_image: np.ndarray) -> None:
    """Binary P5, maxval 255."""
    img = np.asarray(byte_image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"expected 2-d image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1
    pixels = data[pos:pos + w * h]
    if len(pixels) != w * h:
        raise ValueError("PGM payload truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
