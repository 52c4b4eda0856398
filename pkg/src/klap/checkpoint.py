"""Binary checkpoint and attribution-score files.

Checkpoint layout (all integers little-endian u32)::

    b"KLAPCKPT" | version | layer count
    per layer: name length | UTF-8 name | rank | dims...
    all values as little-endian float32, in layer order
    optional: b"MASK" | mask count | per mask: name length | name |
              kernel count | packed bitset (little bit order)

Score files: ``b"FAIGSCOR" | kernel count | float64 scores``.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

CKPT_MAGIC = b"KLAPCKPT"
MASK_MAGIC = b"MASK"
SCORE_MAGIC = b"FAIGSCOR"
VERSION = 1


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: bad layer name") from exc

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def write_checkpoint(path, layers: list[tuple[str, np.ndarray]],
                     masks: dict[str, np.ndarray] | None = None) -> None:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<II", VERSION, len(layers)))
    for name, arr in layers:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in layers:
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if masks:
        out.write(MASK_MAGIC)
        out.write(struct.pack("<I", len(masks)))
        for name, bits in masks.items():
            raw = name.encode("utf-8")
            bits = np.asarray(bits, dtype=bool)
            out.write(struct.pack("<I", len(raw)) + raw)
            out.write(struct.pack("<I", bits.size))
            out.write(np.packbits(bits, bitorder="little").tobytes())
    _atomic_write(path, out.getvalue())


def read_checkpoint(path) -> tuple[list[tuple[str, np.ndarray]], dict[str, np.ndarray]]:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version = rd.u32()
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    count = rd.u32()
    header = []
    for _ in range(count):
        name = rd.name()
        rank = rd.u32()
        shape = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        header.append((name, shape))
    layers = []
    for name, shape in header:
        size = int(np.prod(shape))
        arr = np.frombuffer(rd.take(4 * size), dtype="<f4").astype(np.float32)
        layers.append((name, arr.reshape(shape)))
    masks = {}
    if rd.remaining:
        if rd.take(4) != MASK_MAGIC:
            raise FormatError(f"{path}: unexpected trailing data")
        for _ in range(rd.u32()):
            name = rd.name()
            nbits = rd.u32()
            packed = np.frombuffer(rd.take((nbits + 7) // 8), dtype=np.uint8)
            masks[name] = np.unpackbits(packed, count=nbits, bitorder="little").astype(bool)
        if rd.remaining:
            raise FormatError(f"{path}: unexpected trailing data")
    return layers, masks


def write_scores(path, scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype="<f8")
    _atomic_write(path, SCORE_MAGIC + struct.pack("<I", scores.size) + scores.tobytes())


def read_scores(path) -> np.ndarray:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(8) != SCORE_MAGIC:
        raise FormatError(f"{path}: not a score file")
    n = rd.u32()
    data = rd.take(8 * n)
    if rd.remaining:
        raise FormatError(f"{path}: unexpected trailing data")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)
