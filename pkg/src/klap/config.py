"""Run configuration: one JSON file, validated at load, overridable from the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .isp import NoiseParams, STRONG_NOISE, SynthConfig
from .meta import MetaConfig
from .net import NetSpec
from .pipeline import RecipeConfig
from .tkl import TrainConfig

REQUIRED = ("seed",)


@dataclass
class RecipeSteps:
    n_train: int = 128
    n_test: int = 32
    image_size: int = 48
    im_steps: int = 6000
    kc_steps: int = 6000
    ke_steps: int = 3000
    adp_steps: int = 3000
    adp_lr: float = 2e-4
    faig_steps: int = 100
    calib_size: int = 16
    q: float = 1.0
    sweep_ratios: tuple = (0.0, 0.5, 1.0, 3.0, 5.0)
    random_ratios: tuple = (1.0, 3.0)
    run_meta: bool = True

    def __post_init__(self):
        self.sweep_ratios = tuple(float(r) for r in self.sweep_ratios)
        self.random_ratios = tuple(float(r) for r in self.random_ratios)
        for name in ("n_train", "n_test", "image_size", "faig_steps", "calib_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("im_steps", "kc_steps", "ke_steps", "adp_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.image_size % 24:
            raise ValueError("image_size must be a multiple of 24")
        if not all(0 <= r <= 100 for r in (self.q, *self.sweep_ratios, *self.random_ratios)):
            raise ValueError("mask ratios must lie in [0, 100]")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    data_dir: str | None = None
    net: NetSpec = field(default_factory=NetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    noise: NoiseParams = field(default_factory=NoiseParams)
    strong_noise: NoiseParams = STRONG_NOISE
    recipe: RecipeSteps = field(default_factory=RecipeSteps)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out_dir": self.out_dir, "data_dir": self.data_dir}
        for name in ("net", "train", "meta", "recipe"):
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        out["synth"] = self.synth.to_dict()
        out["noise"] = {"gamma_gain": self.noise.gamma_gain, "sigma": self.noise.sigma}
        out["strong_noise"] = {"gamma_gain": self.strong_noise.gamma_gain,
                               "sigma": self.strong_noise.sigma}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def recipe_config(self) -> RecipeConfig:
        r = self.recipe
        return RecipeConfig(
            seed=self.seed, net=self.net, train=self.train, n_train=r.n_train,
            n_test=r.n_test, image_size=r.image_size, im_steps=r.im_steps,
            kc_steps=r.kc_steps, ke_steps=r.ke_steps, adp_steps=r.adp_steps,
            adp_lr=r.adp_lr, faig_steps=r.faig_steps, calib_size=r.calib_size, q=r.q,
            sweep_ratios=r.sweep_ratios, random_ratios=r.random_ratios, meta=self.meta,
            noise=self.noise, strong_noise=self.strong_noise, run_meta=r.run_meta,
            synth=self.synth)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


_SECTIONS = {
    "net": NetSpec,
    "train": TrainConfig,
    "meta": MetaConfig,
    "synth": SynthConfig,
    "noise": NoiseParams,
    "strong_noise": NoiseParams,
    "recipe": RecipeSteps,
}
_SCALARS = {"seed": int, "out_dir": str, "data_dir": (str, type(None))}


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    if cls is NoiseParams:
        known.pop("seed", None)
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown key")
    for key, value in raw.items():
        if isinstance(value, bool) and known[key].type not in ("bool", bool):
            raise ConfigError(f"{path}.{key}", "expected a number, got a boolean")
    try:
        return cls(**raw)
    except (TypeError, ValueError, ArithmeticError) as exc:
        raise ConfigError(_culprit(cls, raw, path), str(exc)) from exc


def _culprit(cls, raw: dict, path: str) -> str:
    # the first key that fails on its own (other fields at their defaults)
    for key, value in raw.items():
        try:
            cls(**{key: value})
        except (TypeError, ValueError, ArithmeticError):
            return f"{path}.{key}"
    return path


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded JSON object; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected an object")
    for key in raw:
        if key not in _SECTIONS and key not in _SCALARS:
            raise ConfigError(key, "unknown key")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(key, "missing required field")
    kw = {}
    for key, kind in _SCALARS.items():
        if key in raw:
            value = raw[key]
            if isinstance(value, bool) or not isinstance(value, kind):
                raise ConfigError(key, f"invalid value {value!r}")
            kw[key] = value
    if kw["seed"] < 0:
        raise ConfigError("seed", "must be non-negative")
    for key, cls in _SECTIONS.items():
        if key in raw:
            kw[key] = _build(cls, raw[key], key)
    cfg = RunConfig(**kw)
    if base_dir is not None:
        cfg.out_dir = str((base_dir / cfg.out_dir).resolve())
        if cfg.data_dir is not None:
            cfg.data_dir = str((base_dir / cfg.data_dir).resolve())
    return cfg


def validate_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from exc
    return parse_config(raw, path.parent)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Flag overrides, keyed by dotted path (``"train.steps"``); flags win over the file."""
    raw = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return parse_config(raw)


def toy_config(seed: int = 0) -> RunConfig:
    """Small recipe used by the acceptance runs; finishes in minutes on one core."""
    return parse_config({"seed": seed, **TOY_OVERRIDES})


TOY_OVERRIDES = {
    "net": {"width": 16, "blocks": 4},
    "train": {"batch_size": 8, "patch_size": 48, "lr0": 1e-3},
    "recipe": {"im_steps": 300, "kc_steps": 500, "ke_steps": 200, "adp_steps": 400,
               "adp_lr": 1e-3},
}
