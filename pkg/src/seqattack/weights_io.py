"""Bit-exact, dependency-free weight persistence.

Layout (all integers little-endian):

    magic       8 bytes  b"SEQATKW1"
    version     u32      currently 1
    kind        u32 length + utf-8 bytes ("classifier" or "seqnet")
    count       u32      number of tensors
    per tensor: u32 name length, name bytes, u32 rank, rank x u64 dims,
                raw float64 little-endian data
    crc32       u32      of every preceding byte

Tensors are stored in the model's canonical order, so save -> load -> save
reproduces identical bytes.  Loading verifies the checksum first (a
truncated file fails there), then the version, the kind tag, and that the
tensor names and shapes are exactly the expected set for the kind.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .models import Model, weight_specs

MAGIC = b"SEQATKW1"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


class ChecksumError(WeightsFormatError):
    pass


class VersionError(WeightsFormatError):
    pass


class KindError(WeightsFormatError):
    pass


def save(model: Model, path) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    kind_b = model.kind.encode("utf-8")
    parts.append(struct.pack("<I", len(kind_b)))
    parts.append(kind_b)
    specs = weight_specs(model.kind)
    parts.append(struct.pack("<I", len(specs)))
    for name, shape in specs:
        w = np.ascontiguousarray(model.weights[name], dtype="<f8")
        if w.shape != shape:
            raise WeightsFormatError(f"tensor {name!r} has shape {w.shape}, expected {shape}")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<I", w.ndim))
        parts.append(struct.pack(f"<{w.ndim}Q", *w.shape))
        parts.append(w.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightsFormatError("unexpected end of weights payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path, expect_kind: str | None = None) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4:
        raise ChecksumError("file too short to hold a checksum")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(blob) != crc:
        raise ChecksumError("checksum mismatch (truncated or corrupted file)")
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise WeightsFormatError("bad magic string")
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    kind = r.take(r.u32()).decode("utf-8")
    if expect_kind is not None and kind != expect_kind:
        raise KindError(f"weights are for kind {kind!r}, expected {expect_kind!r}")
    try:
        specs = dict(weight_specs(kind))
    except KeyError:
        raise KindError(f"unknown model kind {kind!r}") from None
    count = r.u32()
    if count != len(specs):
        raise WeightsFormatError(f"{count} tensors, expected {len(specs)}")
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        if name not in specs:
            raise WeightsFormatError(f"unknown tensor name {name!r} for kind {kind!r}")
        if name in weights:
            raise WeightsFormatError(f"duplicate tensor {name!r}")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        if tuple(dims) != specs[name]:
            raise WeightsFormatError(
                f"tensor {name!r} has dims {dims}, expected {specs[name]}")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        w = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims)
        weights[name] = np.ascontiguousarray(w, dtype=np.float64)
    if r.pos != len(blob):
        raise WeightsFormatError("trailing bytes after last tensor")
    # canonical order for byte-identical re-save
    ordered = {name: weights[name] for name, _ in weight_specs(kind)}
    return Model(kind, ordered)
