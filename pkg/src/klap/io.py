"""16-bit PGM/PPM image files and JSON sidecars."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .cfa import CfaKind, RawImage
from .errors import FormatError

MAXVAL = 65535


def _to_u16(data: np.ndarray) -> np.ndarray:
    return np.round(np.clip(data, 0.0, 1.0) * MAXVAL).astype(">u2")


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header")
    return buf[start:pos], pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    pos = 0
    tok, pos = _read_token(buf, pos)
    if tok != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, got {tok[:8]!r}")
    try:
        fields = []
        for _ in range(3):
            tok, pos = _read_token(buf, pos)
            fields.append(int(tok))
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    width, height, maxval = fields
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * channels
    nbytes = count * np.dtype(dtype).itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return arr.astype(np.float64).reshape(height, width, channels) / maxval


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_pgm(path, data: np.ndarray) -> None:
    h, w = data.shape
    _atomic_write(path, f"P5\n{w} {h}\n{MAXVAL}\n".encode() + _to_u16(data).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)[..., 0]


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a ``(3, H, W)`` image."""
    _, h, w = rgb.shape
    pix = _to_u16(np.moveaxis(rgb, 0, -1))
    _atomic_write(path, f"P6\n{w} {h}\n{MAXVAL}\n".encode() + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    return np.moveaxis(_read_netpbm(path, b"P6", 3), -1, 0)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_raw(path, raw: RawImage) -> None:
    write_pgm(path, raw.data)
    meta = {"cfa": raw.kind.value,
            "gamma": float(raw.meta.get("gamma", 2.2)),
            "noise_gamma": float(raw.meta.get("noise_gamma", 0.0)),
            "noise_sigma": float(raw.meta.get("noise_sigma", 0.0)),
            "seed": int(raw.meta.get("seed", 0))}
    _atomic_write(meta_path(path), json.dumps(meta, indent=2).encode())


def read_raw(path, kind: CfaKind | str | None = None) -> RawImage:
    """Load a raw frame; the CFA comes from ``kind`` or else the sidecar."""
    data = read_pgm(path)
    meta = {}
    side = meta_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    if kind is None:
        if "cfa" not in meta:
            raise FormatError(f"{path}: CFA kind unknown (no sidecar, none given)")
        kind = meta["cfa"]
    return RawImage(data, CfaKind.parse(kind), meta=meta)
