"""Reverse and forward color mapping (r-CM / CM) and sensor noise synthesis.

r-CM turns a display-referred sRGB image into a linear, sensor-like label
image: tone degradation -> inverse gamma -> inverse CCM -> inverse AWB.
CM undoes it in the opposite order and is only used for visualization.
Every stage clamps to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cfa import CfaKind, RawImage, mosaic, check_dims, PERIOD_LCM
from .errors import DimensionError, SingularMatrixError

DEFAULT_CCM = ((1.66, -0.53, -0.13),
               (-0.24, 1.46, -0.22),
               (0.02, -0.62, 1.60))
DEFAULT_AWB = (2.0, 1.0, 1.6)

FORWARD = "forward"
INVERSE = "inverse"


@dataclass
class SynthConfig:
    gamma: float = 2.2
    ccm: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_CCM))
    awb_gains: tuple = DEFAULT_AWB
    tone_enabled: bool = True

    def __post_init__(self):
        self.ccm = np.asarray(self.ccm, dtype=np.float64)
        if self.ccm.shape != (3, 3):
            raise ValueError(f"ccm must be 3x3, got {self.ccm.shape}")
        if abs(np.linalg.det(self.ccm)) <= 1e-8:
            raise SingularMatrixError("color correction matrix is singular")
        self.awb_gains = tuple(float(g) for g in self.awb_gains)
        if len(self.awb_gains) != 3 or min(self.awb_gains) <= 0:
            raise ValueError("awb_gains must be three positive numbers")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        self.ccm_inv = np.linalg.inv(self.ccm)

    @classmethod
    def identity(cls) -> "SynthConfig":
        return cls(gamma=1.0, ccm=np.eye(3), awb_gains=(1.0, 1.0, 1.0), tone_enabled=False)

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "ccm": self.ccm.tolist(),
                "awb_gains": list(self.awb_gains), "tone_enabled": self.tone_enabled}


@dataclass(frozen=True)
class NoiseParams:
    gamma_gain: float = 0.01
    sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.gamma_gain < 0 or self.sigma < 0:
            raise ValueError("noise parameters must be non-negative")

    def scaled(self, factor: float) -> "NoiseParams":
        return NoiseParams(self.gamma_gain * factor, self.sigma * factor, self.seed)


TRAIN_NOISE = NoiseParams(0.01, 0.02)
STRONG_NOISE = NoiseParams(0.04, 0.08)


def rng_stream(seed: int, *index: int) -> np.random.Generator:
    """Counter-based generator keyed on ``(seed, *index)``.

    Streams for different indices are independent, so images can be
    synthesized in any order and still get identical noise.
    """
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(i) for i in index]])
    return np.random.Generator(np.random.Philox(ss))


def _clamp(v):
    return np.clip(v, 0.0, 1.0)


def tone_map(v, direction: str = FORWARD):
    """Smoothstep tone curve (forward) and its inverse on [0, 1]."""
    v = _clamp(np.asarray(v, dtype=np.float64))
    if direction == FORWARD:
        return 3.0 * v**2 - 2.0 * v**3
    if direction == INVERSE:
        return 0.5 - np.sin(np.arcsin(1.0 - 2.0 * v) / 3.0)
    raise ValueError(f"bad direction {direction!r}")


def gamma_map(v, direction: str = FORWARD, gamma: float = 2.2):
    v = _clamp(np.asarray(v, dtype=np.float64))
    if direction == FORWARD:
        return v ** (1.0 / gamma)
    if direction == INVERSE:
        return v ** gamma
    raise ValueError(f"bad direction {direction!r}")


def ccm_apply(rgb: np.ndarray, config: SynthConfig, direction: str = FORWARD) -> np.ndarray:
    if direction not in (FORWARD, INVERSE):
        raise ValueError(f"bad direction {direction!r}")
    mat = config.ccm if direction == FORWARD else config.ccm_inv
    out = np.einsum("ij,j...->i...", mat, np.asarray(rgb, dtype=np.float64))
    return _clamp(out)


def awb_apply(rgb: np.ndarray, config: SynthConfig, direction: str = FORWARD) -> np.ndarray:
    gains = np.asarray(config.awb_gains, dtype=np.float64)
    gains = gains.reshape((3,) + (1,) * (np.ndim(rgb) - 1))
    if direction == FORWARD:
        return _clamp(np.asarray(rgb, dtype=np.float64) * gains)
    if direction == INVERSE:
        return _clamp(np.asarray(rgb, dtype=np.float64) / gains)
    raise ValueError(f"bad direction {direction!r}")


def r_cm(rgb: np.ndarray, config: SynthConfig) -> np.ndarray:
    """sRGB -> linear sensor-referred label space."""
    x = _clamp(np.asarray(rgb, dtype=np.float64))
    if config.tone_enabled:
        x = tone_map(x, INVERSE)
    x = gamma_map(x, INVERSE, config.gamma)
    x = ccm_apply(x, config, INVERSE)
    return awb_apply(x, config, INVERSE)


def cm(rgb: np.ndarray, config: SynthConfig) -> np.ndarray:
    """Linear label space -> display sRGB (exact reverse of :func:`r_cm`)."""
    x = awb_apply(rgb, config, FORWARD)
    x = ccm_apply(x, config, FORWARD)
    x = gamma_map(x, FORWARD, config.gamma)
    if config.tone_enabled:
        x = tone_map(x, FORWARD)
    return x


def add_noise(img: np.ndarray, params: NoiseParams, rng: np.random.Generator,
              clip: bool = True) -> np.ndarray:
    """Mixed Poisson-Gaussian noise: ``gamma * Poisson(y / gamma) + N(0, sigma^2)``.

    Mean is ``y`` and variance ``gamma * y + sigma^2`` before clamping.
    ``gamma_gain == 0`` drops the shot-noise term.
    """
    y = np.asarray(img, dtype=np.float64)
    if params.gamma_gain > 0:
        lam = np.clip(y, 0.0, None) / params.gamma_gain
        x = params.gamma_gain * rng.poisson(lam).astype(np.float64)
    else:
        x = y.copy()
    if params.sigma > 0:
        x = x + rng.normal(0.0, params.sigma, size=y.shape)
    return _clamp(x) if clip else x


def synth_pair(srgb: np.ndarray, config: SynthConfig, noise: NoiseParams, kind: CfaKind,
               rng: np.random.Generator) -> tuple[RawImage, np.ndarray]:
    """Build one ``(noisy mosaic, clean label)`` training pair from an sRGB image."""
    kind = CfaKind.parse(kind)
    srgb = np.asarray(srgb)
    if srgb.ndim != 3 or srgb.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W) image, got {srgb.shape}")
    check_dims(srgb.shape, PERIOD_LCM)
    gt = r_cm(srgb, config)
    noisy = add_noise(gt, noise, rng)
    raw = mosaic(noisy, kind)
    raw.meta.update({"gamma": config.gamma, "noise_gamma": noise.gamma_gain,
                     "noise_sigma": noise.sigma, "seed": noise.seed})
    return raw, gt
