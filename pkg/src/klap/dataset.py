"""Paired (raw, label) datasets: procedural toy images, synthesis, manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .cfa import ALL_KINDS, PERIOD_LCM, CfaKind, RawImage
from .errors import EmptyDatasetError, FormatError
from .isp import NoiseParams, SynthConfig, rng_stream, synth_pair

SPLITS = ("train", "val", "test")


def _toy_layer(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    kind = rng.integers(5)
    c0, c1 = rng.random(3), rng.random(3)
    if kind == 0:  # linear color gradient
        ang = rng.uniform(0, 2 * np.pi)
        t = np.cos(ang) * xx + np.sin(ang) * yy
        t = (t - t.min()) / (np.ptp(t) + 1e-9)
    elif kind == 1:  # checkerboard
        period = rng.integers(3, 13)
        t = ((np.floor(xx * size / period) + np.floor(yy * size / period)) % 2)
    elif kind == 2:  # oriented stripes
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(2, 14)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy))
    elif kind == 3:  # disks
        t = np.zeros((size, size))
        for _ in range(rng.integers(1, 5)):
            cy, cx, r = rng.random(), rng.random(), rng.uniform(0.08, 0.35)
            t = np.maximum(t, ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r).astype(float))
    else:  # smoothed noise
        t = ndimage.gaussian_filter(rng.random((size, size)), rng.uniform(1.0, 4.0), mode="wrap")
        t = (t - t.min()) / (np.ptp(t) + 1e-9)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def toy_image(rng: np.random.Generator, size: int = 48) -> np.ndarray:
    """Procedural sRGB test card: blended gradients, checkers, stripes, disks, noise."""
    img = _toy_layer(rng, size)
    for _ in range(rng.integers(1, 3)):
        alpha = rng.uniform(0.3, 0.7)
        img = (1 - alpha) * img + alpha * _toy_layer(rng, size)
    return np.clip(img, 0.0, 1.0)


@dataclass
class PairedSet:
    """Labels ``(N, 3, H, W)`` and, per CFA kind, noisy raws ``(N, H, W)``."""

    gts: np.ndarray
    raws: dict = field(default_factory=dict)
    noise: NoiseParams | None = None
    names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.gts)

    @property
    def kinds(self) -> tuple[CfaKind, ...]:
        return tuple(k for k in ALL_KINDS if k in self.raws)

    def raw(self, kind: CfaKind, i: int) -> RawImage:
        return RawImage(self.raws[kind][i], kind)

    def subset(self, idx) -> "PairedSet":
        idx = np.asarray(idx, dtype=np.intp)
        return PairedSet(self.gts[idx], {k: v[idx] for k, v in self.raws.items()},
                         self.noise, [self.names[i] for i in idx] if self.names else [])

    def require(self, kind: CfaKind) -> None:
        if len(self) == 0 or kind not in self.raws:
            raise EmptyDatasetError(f"dataset has no {CfaKind.parse(kind).value} pairs")


def synthesize(srgb_images, config: SynthConfig, noise: NoiseParams,
               kinds=ALL_KINDS, seed: int = 0, names=None) -> PairedSet:
    """Build a paired set; image ``i`` of kind ``k`` uses noise stream ``(seed, i, k)``."""
    gts, raws = [], {CfaKind.parse(k): [] for k in kinds}
    for i, img in enumerate(srgb_images):
        for kind in raws:
            raw, gt = synth_pair(img, config, noise, kind,
                                 rng_stream(seed, i, ALL_KINDS.index(kind)))
            raws[kind].append(raw.data.astype(np.float32))
        gts.append(gt.astype(np.float32))
    if not gts:
        raise EmptyDatasetError("no source images")
    names = list(names) if names is not None else [f"img{i:04d}" for i in range(len(gts))]
    return PairedSet(np.stack(gts), {k: np.stack(v) for k, v in raws.items()},
                     NoiseParams(noise.gamma_gain, noise.sigma, seed), names)


def toy_sources(count: int, seed: int, size: int = 48) -> list[np.ndarray]:
    return [toy_image(rng_stream(seed, 1_000_003, i), size) for i in range(count)]


def toy_dataset(count: int, seed: int, noise: NoiseParams, size: int = 48,
                config: SynthConfig | None = None, image_seed: int | None = None) -> PairedSet:
    """Procedural paired set. ``image_seed`` picks the pictures, ``seed`` the noise."""
    config = config or SynthConfig()
    srcs = toy_sources(count, seed if image_seed is None else image_seed, size)
    return synthesize(srcs, config, noise, seed=seed)


def crop_to_multiple(img: np.ndarray, multiple: int = PERIOD_LCM) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., : h - h % multiple, : w - w % multiple]


# ---------------------------------------------------------------- on-disk form

def write_dataset(out_dir, data: PairedSet, split: str, config: SynthConfig) -> Path:
    """Write PGM raws, PPM labels and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    noise = data.noise or NoiseParams(0.0, 0.0)
    for i, name in enumerate(data.names or [f"img{i:04d}" for i in range(len(data))]):
        gt_path = out / f"{name}_gt.ppm"
        io.write_ppm(gt_path, data.gts[i])
        for kind in data.kinds:
            raw = data.raw(kind, i)
            raw.meta.update({"gamma": config.gamma, "noise_gamma": noise.gamma_gain,
                             "noise_sigma": noise.sigma, "seed": noise.seed})
            in_path = out / f"{name}_{kind.value}.pgm"
            io.write_raw(in_path, raw)
            entries.append({"input_path": in_path.name, "gt_path": gt_path.name,
                            "cfa": kind.value,
                            "noise_params": {"gamma": noise.gamma_gain, "sigma": noise.sigma,
                                             "seed": noise.seed}})
    manifest = {"split": split, "synth": config.to_dict(), "entries": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> PairedSet:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("split") not in SPLITS:
        raise FormatError(f"{path}: split must be one of {SPLITS}")
    root = path.parent
    gt_order, gts, raws = {}, [], {}
    noise = None
    for entry in manifest.get("entries", []):
        kind = CfaKind.parse(entry["cfa"])
        for key in ("input_path", "gt_path"):
            if not (root / entry[key]).exists():
                raise FormatError(f"{path}: missing file {entry[key]}")
        if entry["gt_path"] not in gt_order:
            gt_order[entry["gt_path"]] = len(gts)
            gts.append(io.read_ppm(root / entry["gt_path"]).astype(np.float32))
        i = gt_order[entry["gt_path"]]
        raws.setdefault(kind, {})[i] = io.read_raw(root / entry["input_path"], kind).data
        np_ = entry.get("noise_params", {})
        noise = NoiseParams(np_.get("gamma", 0.0), np_.get("sigma", 0.0), np_.get("seed", 0))
    if not gts:
        raise EmptyDatasetError(f"{path}: manifest has no entries")
    stacked = {}
    for kind, by_idx in raws.items():
        if len(by_idx) != len(gts):
            raise FormatError(f"{path}: {kind.value} entries do not cover every label")
        stacked[kind] = np.stack([by_idx[i] for i in range(len(gts))]).astype(np.float32)
    names = [Path(p).stem.removesuffix("_gt") for p in gt_order]
    return PairedSet(np.stack(gts), stacked, noise, names)
