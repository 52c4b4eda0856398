"""Color-filter-array geometry: Bayer, Quad, Nona and QxQ layouts.

All four patterns share one 2x2 base arrangement of homogeneous units::

    Gr R
    B  Gb

and differ only in the side length ``s`` of a unit (1, 2, 3 or 4 pixels).
Pixel ``(r, c)`` therefore carries the base color at
``(r // s % 2, c // s % 2)``.

RGB images are ``(3, H, W)`` float arrays, channel order R, G, B.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BinningError, DimensionError

R, G, B = 0, 1, 2
CHANNEL_NAMES = ("R", "G", "B")

# (row parity, col parity) -> channel
_BASE = np.array([[G, R], [B, G]], dtype=np.int64)


class CfaKind(enum.Enum):
    BAYER = "bayer"
    QUAD = "quad"
    NONA = "nona"
    QXQ = "qxq"

    @property
    def unit_size(self) -> int:
        return _UNIT[self]

    @property
    def period(self) -> int:
        return 2 * _UNIT[self]

    @classmethod
    def parse(cls, name: "str | CfaKind") -> "CfaKind":
        if isinstance(name, CfaKind):
            return name
        key = name.strip().lower().replace("×", "x")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown CFA kind {name!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


_UNIT = {CfaKind.BAYER: 1, CfaKind.QUAD: 2, CfaKind.NONA: 3, CfaKind.QXQ: 4}

ALL_KINDS = (CfaKind.BAYER, CfaKind.QUAD, CfaKind.NONA, CfaKind.QXQ)

# Allowed binning transitions (source -> targets).
BIN_TARGETS = {
    CfaKind.QXQ: (CfaKind.QUAD, CfaKind.BAYER),
    CfaKind.QUAD: (CfaKind.BAYER,),
    CfaKind.NONA: (CfaKind.BAYER,),
    CfaKind.BAYER: (),
}

# Least common multiple of all pattern periods.
PERIOD_LCM = 24


@dataclass
class RawImage:
    """Single-channel mosaic frame with values in [0, 1]."""

    data: np.ndarray
    kind: CfaKind
    bit_depth_hint: int = 16
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = CfaKind.parse(self.kind)
        if self.data.ndim != 2:
            raise DimensionError(f"raw data must be 2-D, got shape {self.data.shape}")
        check_dims(self.data.shape, self.kind.period)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def check_dims(shape, multiple: int) -> None:
    h, w = shape[-2:]
    if h == 0 or w == 0 or h % multiple or w % multiple:
        raise DimensionError(f"image size {h}x{w} is not a positive multiple of {multiple}")


def cfa_color_at(kind: CfaKind, row: int, col: int) -> int:
    """Channel index (R=0, G=1, B=2) sampled at pixel ``(row, col)``."""
    s = CfaKind.parse(kind).unit_size
    return int(_BASE[(row // s) % 2, (col // s) % 2])


def color_map(kind: CfaKind, height: int, width: int) -> np.ndarray:
    """``(H, W)`` int array of channel indices for the given pattern."""
    s = CfaKind.parse(kind).unit_size
    rows = (np.arange(height) // s) % 2
    cols = (np.arange(width) // s) % 2
    return _BASE[rows[:, None], cols[None, :]]


def channel_masks(kind: CfaKind, height: int, width: int) -> np.ndarray:
    """``(3, H, W)`` boolean one-hot masks of the pattern."""
    cmap = color_map(kind, height, width)
    return np.stack([cmap == ch for ch in range(3)])


def mosaic(rgb: np.ndarray, kind: CfaKind) -> RawImage:
    """Sample an RGB image through the CFA of ``kind``."""
    kind = CfaKind.parse(kind)
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W) image, got {rgb.shape}")
    check_dims(rgb.shape, kind.period)
    _, h, w = rgb.shape
    cmap = color_map(kind, h, w)
    data = np.take_along_axis(rgb, cmap[None], axis=0)[0]
    return RawImage(data, kind)


def replicate_to_rgb(raw: RawImage) -> np.ndarray:
    """Place each raw sample into its own channel and copy it to the other two.

    Crude "demosaic" used for debugging; ``mosaic`` of the result gives
    back the raw exactly.
    """
    return np.repeat(raw.data[None], 3, axis=0)


def pixel_bin(raw: RawImage, to_kind: CfaKind) -> RawImage:
    """Average non-overlapping ``f x f`` blocks, turning ``raw.kind`` into ``to_kind``.

    ``f = raw.kind.unit_size / to_kind.unit_size``; block boundaries line up
    with unit boundaries so every block averages a single color.
    """
    to_kind = CfaKind.parse(to_kind)
    src = raw.kind
    if src is CfaKind.BAYER:
        raise BinningError("pixel binning does not exist for the Bayer pattern")
    if to_kind not in BIN_TARGETS[src]:
        raise BinningError(f"cannot bin {src.value} into {to_kind.value}")
    f, rem = divmod(src.unit_size, to_kind.unit_size)
    if rem or f < 2:
        raise BinningError(f"non-integer binning factor {src.unit_size}/{to_kind.unit_size}")
    binned = bin_array(raw.data, f)
    return RawImage(binned, to_kind, raw.bit_depth_hint)


def bin_array(data: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean over the last two axes."""
    *lead, h, w = data.shape
    blocks = data.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


def binning_factor(src: CfaKind, dst: CfaKind) -> int:
    return CfaKind.parse(src).unit_size // CfaKind.parse(dst).unit_size


def _bilinear_axis(n_in: int, factor: int):
    pos = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    wt = pos - lo
    return lo, hi, wt


def upsample_bilinear(img: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling of the last two axes, half-pixel centers, clamped borders."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    img = np.asarray(img)
    if factor == 1:
        return img.copy()
    h, w = img.shape[-2:]
    r0, r1, rw = _bilinear_axis(h, factor)
    c0, c1, cw = _bilinear_axis(w, factor)
    if np.issubdtype(img.dtype, np.floating):
        rw, cw = rw.astype(img.dtype), cw.astype(img.dtype)
    rows = img[..., r0, :] * (1 - rw)[:, None] + img[..., r1, :] * rw[:, None]
    return rows[..., c0] * (1 - cw) + rows[..., c1] * cw
