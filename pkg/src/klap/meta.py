"""Test-time adaptation of the active CFA's adaptive kernels.

Each iteration masks one Noise2Self partition ``J`` (every masked pixel is
refilled from same-color neighbours), then minimizes::

    l_pix * |G(x_Jc; theta) - U(G(m(x_Jc); theta'))|  +  l_n2s * |G(x_Jc; theta)_J - x_J|

where ``m`` is pixel binning, ``U`` bilinear upsampling and ``theta'`` the
frozen starting parameters for the binned pattern. Only the active CFA's
masked kernels move.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adp import AdpModel, compose
from .cfa import (BIN_TARGETS, CfaKind, RawImage, bin_array, binning_factor, color_map,
                  upsample_bilinear)
from .errors import BinningError, DimensionError, IsolationError, ShapeError
from .net import backward, forward, predict
from .optim import AdamState, adam_step

ITERS_SYNTHETIC = 10
ITERS_REAL = 45


@dataclass
class MetaConfig:
    lambda_pix: float = 1.0
    lambda_n2s: float = 0.02
    iterations: int = ITERS_SYNTHETIC
    lr: float = 1e-4
    bin_target: str = "quad"   # used by QxQ input; Quad and Nona always bin to Bayer

    def __post_init__(self):
        if self.lambda_pix < 0 or self.lambda_n2s < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if CfaKind.parse(self.bin_target) not in (CfaKind.QUAD, CfaKind.BAYER):
            raise ValueError("bin_target must be quad or bayer")


def bin_target_for(kind: CfaKind, preferred: str | CfaKind = "quad") -> CfaKind | None:
    """Binning destination for ``kind``; ``None`` for Bayer (no binning)."""
    targets = BIN_TARGETS[CfaKind.parse(kind)]
    if not targets:
        return None
    preferred = CfaKind.parse(preferred)
    return preferred if preferred in targets else targets[-1]


# ---------------------------------------------------------------- masking scheme

@dataclass
class N2sPartition:
    window: int
    kernel: int
    masks: list            # bool (H, W), one per partition

    def __len__(self) -> int:
        return len(self.masks)


def n2s_partition(height: int, width: int, kind: CfaKind) -> N2sPartition:
    """One pixel per ``w x w`` window per partition (w = 6 for Bayer, else 4)."""
    kind = CfaKind.parse(kind)
    window, kernel = (6, 5) if kind is CfaKind.BAYER else (4, 3)
    if height % window or width % window or height == 0 or width == 0:
        raise DimensionError(f"{height}x{width} is not a multiple of the {window}x{window} window")
    rr = np.arange(height)[:, None] % window
    cc = np.arange(width)[None, :] % window
    masks = [(rr == p // window) & (cc == p % window) for p in range(window * window)]
    return N2sPartition(window, kernel, masks)


def n2s_interpolate(raw: RawImage, mask: np.ndarray, kernel: int | None = None) -> RawImage:
    """Replace pixels in ``mask`` by the mean of same-color, unmasked neighbours."""
    kind = raw.kind
    if kernel is None:
        kernel = 5 if kind is CfaKind.BAYER else 3
    data = raw.data
    h, w = data.shape
    if mask.shape != data.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match raw {data.shape}")
    cmap = color_map(kind, h, w)
    rad = kernel // 2
    pad = ((rad, rad), (rad, rad))
    vals = np.pad(data.astype(np.float64), pad)
    cols = np.pad(cmap, pad, constant_values=-1)
    ok = np.pad(~mask, pad, constant_values=False)
    total = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    for dy in range(kernel):
        for dx in range(kernel):
            sl = (slice(dy, dy + h), slice(dx, dx + w))
            use = ok[sl] & (cols[sl] == cmap)
            total += np.where(use, vals[sl], 0.0)
            count += use
    if np.any(count[mask] == 0):
        raise IsolationError("a masked pixel has no same-color unmasked neighbour")
    out = data.copy()
    out[mask] = (total[mask] / count[mask]).astype(data.dtype)
    return RawImage(out, kind, raw.bit_depth_hint, dict(raw.meta))


# ---------------------------------------------------------------- losses

def loss_n2s(pred: np.ndarray, raw: RawImage, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``|pred[cfa channel] - raw|`` over masked pixels, with its gradient."""
    if pred.shape != (3,) + raw.shape or mask.shape != raw.shape:
        raise ShapeError(f"prediction {pred.shape} / mask {mask.shape} vs raw {raw.shape}")
    cmap = color_map(raw.kind, *raw.shape)
    rows, cols = np.nonzero(mask)
    ch = cmap[rows, cols]
    diff = pred[ch, rows, cols] - raw.data[rows, cols]
    grad = np.zeros_like(pred)
    if diff.size == 0:
        return 0.0, grad
    grad[ch, rows, cols] = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), grad


def binned_reference(frozen: AdpModel, x_masked: RawImage, bin_target: CfaKind) -> np.ndarray:
    """``U(G(m(x), theta'))`` computed with the frozen model for the binned pattern."""
    f = binning_factor(x_masked.kind, bin_target)
    binned = bin_array(x_masked.data, f)
    small, _ = forward(compose(frozen, bin_target), binned)
    return upsample_bilinear(small, f)


def _l1_to(pred: np.ndarray, ref: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - ref
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_pixbin(adp: AdpModel, frozen: AdpModel, x_masked: RawImage, bin_target: CfaKind | None,
                active: CfaKind | None = None) -> tuple[float, np.ndarray]:
    """Pixel-binning consistency loss and its gradient w.r.t. the active CFA's delta.

    The gradient is restricted to the active mask; the binned branch is a
    constant target. Bayer input (no binning) yields ``(0, zeros)``.
    """
    active = CfaKind.parse(active or x_masked.kind)
    zero = np.zeros_like(adp.um.values)
    if bin_target is None or x_masked.kind is CfaKind.BAYER:
        return 0.0, zero
    bin_target = CfaKind.parse(bin_target)
    if bin_target not in BIN_TARGETS[x_masked.kind]:
        raise BinningError(f"cannot bin {x_masked.kind.value} into {bin_target.value}")
    ref = binned_reference(frozen, x_masked, bin_target)
    params = compose(adp, active)
    out, trace = forward(params, x_masked.data)
    value, g = _l1_to(out, ref)
    grads, _ = backward(trace, g)
    if active in adp.masks:
        idx = adp.indices(active)
        zero[idx] = grads[idx]
    return value, zero


# ---------------------------------------------------------------- adaptation loop

def meta_test(model: AdpModel, raw: RawImage, config: MetaConfig = MetaConfig(),
              log_rows: list | None = None) -> tuple[np.ndarray, AdpModel]:
    """Adapt a copy of ``model`` to one frame; returns (clamped RGB, adapted copy).

    ``model`` itself is never modified.
    """
    kind = raw.kind
    adapted = model.copy()
    if config.iterations and kind in adapted.masks and adapted.indices(kind).size:
        frozen = model
        idx = adapted.indices(kind)
        target = bin_target_for(kind, config.bin_target)
        parts = n2s_partition(*raw.shape, kind)
        state = AdamState.create(adapted.um.values.size, config.iterations, lr0=config.lr,
                                 cosine=False)
        delta = adapted.deltas[kind]
        for it in range(config.iterations):
            mask = parts.masks[it % len(parts)]
            x_masked = n2s_interpolate(raw, mask, parts.kernel)
            params = compose(adapted, kind)
            out, trace = forward(params, x_masked.data)
            upstream = np.zeros_like(out)
            loss_pix = 0.0
            if target is not None and config.lambda_pix > 0:
                ref = binned_reference(frozen, x_masked, target)
                loss_pix, g = _l1_to(out, ref)
                upstream += config.lambda_pix * g
            loss_n, g = loss_n2s(out, raw, mask)
            if config.lambda_n2s > 0:
                upstream += config.lambda_n2s * g
            grads, _ = backward(trace, upstream)
            adam_step(delta, grads, state, index=idx)
            if log_rows is not None:
                log_rows.append({"iter": it, "loss_pix": loss_pix, "loss_n2s": loss_n,
                                 "loss": config.lambda_pix * loss_pix
                                 + config.lambda_n2s * loss_n})
    return predict(compose(adapted, kind), raw.data), adapted
