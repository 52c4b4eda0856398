"""Filter attribution (FAIG), kernel masks and per-CFA adaptive kernels.

The adapted parameters for CFA ``c`` are::

    theta_adp = theta_um + sum_k alpha_k * (theta_k * M_k)

with ``alpha_c = 1`` for the active CFA and 0 otherwise. ``M_k`` selects
whole kernels (filter weights plus bias).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cfa import ALL_KINDS, CfaKind
from .checkpoint import read_checkpoint, write_checkpoint
from .dataset import PairedSet
from .errors import FormatError, LayoutMismatchError
from .isp import rng_stream
from .net import (NetSpec, ParamStore, backward, forward, l1_loss, param_layers,
                  params_from_layers, predict)
from .optim import AdamState, adam_step
from .tkl import BatchSampler, TrainConfig

DEFAULT_Q = 1.0
FAIG_STEPS = 100


# ---------------------------------------------------------------- attribution

@dataclass
class FaigScores:
    scores: np.ndarray
    kind: CfaKind | None = None
    n_steps: int = FAIG_STEPS
    calib_size: int = 0


def integrated_kernel_gradients(theta_from: np.ndarray, theta_to: np.ndarray, grad_fn,
                                kernel_slices, n_steps: int = FAIG_STEPS) -> np.ndarray:
    """Discretized path-integrated gradients summed per kernel.

    Along ``rho(b) = b * theta_from + (1 - b) * theta_to`` at ``b_t = t / N``,
    ``t = 0..N-1``, accumulates ``grad_fn(rho(b_t))`` and returns for every
    kernel ``j`` the magnitude ``|(1/N) <(theta_from - theta_to)_j, sum_t grad_j>|``.
    ``grad_fn`` maps a flat parameter vector to the flat loss gradient.
    """
    theta_from = np.asarray(theta_from, dtype=np.float64)
    theta_to = np.asarray(theta_to, dtype=np.float64)
    if theta_from.shape != theta_to.shape:
        raise LayoutMismatchError("parameter vectors have different shapes")
    total = np.zeros_like(theta_from)
    for t in range(n_steps):
        beta = t / n_steps
        total += np.asarray(grad_fn(beta * theta_from + (1.0 - beta) * theta_to), np.float64)
    contrib = (theta_from - theta_to) * total / n_steps
    return np.array([abs(contrib[idx].sum()) for idx in kernel_slices])


def faig_scores(theta_um: ParamStore, theta_i: ParamStore, calib_raws: np.ndarray,
                calib_gts: np.ndarray, n_steps: int = FAIG_STEPS,
                kind: CfaKind | None = None) -> FaigScores:
    """Per-kernel attribution of the unified vs. one independent model.

    The loss is the mean L1 between the interpolated model's output and the
    label over the whole calibration set (one batch).
    """
    if theta_um.spec != theta_i.spec:
        raise LayoutMismatchError(f"layouts differ: {theta_um.spec} vs {theta_i.spec}")
    spec = theta_um.spec
    x = np.asarray(calib_raws, dtype=np.float32)
    y = np.asarray(calib_gts, dtype=np.float32)

    def grad_fn(values):
        params = ParamStore(spec, values.astype(np.float32))
        out, trace = forward(params, x)
        _, g = l1_loss(out, y)
        return backward(trace, g)[0]

    scores = integrated_kernel_gradients(theta_um.values, theta_i.values, grad_fn,
                                         spec.kernel_slices, n_steps)
    return FaigScores(scores, CfaKind.parse(kind) if kind else None, n_steps, len(x))


# ---------------------------------------------------------------- masks

def mask_count(kernel_count: int, q: float) -> int:
    if not 0 <= q <= 100:
        raise ValueError(f"ratio q must lie in [0, 100], got {q}")
    return int(math.floor(q / 100.0 * kernel_count + 0.5))


def select_top_q(scores, q: float = DEFAULT_Q) -> np.ndarray:
    """Boolean kernel mask of the ``round(q% * K)`` highest scores; ties go to lower ids."""
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    n = mask_count(scores.size, q)
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:n]] = True
    return mask


def select_random(kernel_count: int, q: float, seed: int) -> np.ndarray:
    n = mask_count(kernel_count, q)
    rng = rng_stream(seed, 0x5E1EC7)
    mask = np.zeros(kernel_count, dtype=bool)
    mask[rng.choice(kernel_count, size=n, replace=False)] = True
    return mask


def mask_indices(spec: NetSpec, kernel_mask: np.ndarray) -> np.ndarray:
    """Flat parameter indices covered by the selected kernels (sorted)."""
    kernel_mask = np.asarray(kernel_mask, dtype=bool)
    if kernel_mask.size != spec.kernel_count:
        raise LayoutMismatchError(f"mask has {kernel_mask.size} kernels, "
                                  f"network has {spec.kernel_count}")
    return np.flatnonzero(kernel_mask[spec.kernel_ids])


# ---------------------------------------------------------------- composition

@dataclass
class AdpModel:
    um: ParamStore
    masks: dict = field(default_factory=dict)     # CfaKind -> bool[K]
    deltas: dict = field(default_factory=dict)    # CfaKind -> flat float array

    @classmethod
    def from_masks(cls, um: ParamStore, masks: dict) -> "AdpModel":
        masks = {CfaKind.parse(k): np.asarray(v, dtype=bool) for k, v in masks.items()}
        deltas = {k: np.zeros_like(um.values) for k in masks}
        return cls(um, masks, deltas)

    def copy(self) -> "AdpModel":
        return AdpModel(self.um.copy(), {k: v.copy() for k, v in self.masks.items()},
                        {k: v.copy() for k, v in self.deltas.items()})

    def indices(self, kind: CfaKind) -> np.ndarray:
        return mask_indices(self.um.spec, self.masks[CfaKind.parse(kind)])

    def adaptive_param_count(self) -> int:
        return int(sum(self.indices(k).size for k in self.masks))

    def param_count(self) -> int:
        return self.um.values.size + self.adaptive_param_count()


def compose(model: AdpModel, active: CfaKind | None) -> ParamStore:
    """Parameters for one CFA; ``None`` (all alphas 0) returns ``theta_um`` unchanged."""
    if active is None:
        return model.um.copy()
    active = CfaKind.parse(active)
    if active not in model.masks:
        return model.um.copy()
    values = model.um.values.copy()
    idx = model.indices(active)
    delta = model.deltas[active][idx]
    # leave entries with a zero delta untouched so -0.0 weights stay bit-exact
    values[idx] = np.where(delta != 0, values[idx] + delta, values[idx])
    return ParamStore(model.um.spec, values)


def adp_predictor(model: AdpModel):
    cache = {}

    def run(kind, raws):
        kind = CfaKind.parse(kind)
        if kind not in cache:
            cache[kind] = compose(model, kind)
        return predict(cache[kind], raws)
    return run


def train_adp(um: ParamStore, masks: dict, data: PairedSet, cfg: TrainConfig,
              kinds=None, log_rows=None) -> AdpModel:
    """Fine-tune only the masked per-CFA kernels; ``theta_um`` stays frozen.

    Batches cycle through the CFAs; each CFA has its own Adam state whose
    cosine schedule spans that CFA's share of ``cfg.steps``.
    """
    model = AdpModel.from_masks(um, masks)
    kinds = tuple(CfaKind.parse(k) for k in (kinds or [k for k in ALL_KINDS if k in model.masks]))
    active = [k for k in kinds if model.indices(k).size]
    if cfg.steps == 0 or not active:
        return model
    sampler = BatchSampler(data, active, cfg.batch_size, cfg.patch_size, cfg.seed, cfg.augment)
    per_kind = -(-cfg.steps // len(active))
    states = {k: AdamState.create(um.values.size, per_kind, lr0=cfg.lr0, lr_min=cfg.lr_min)
              for k in active}
    index = {k: model.indices(k) for k in active}
    for step in range(cfg.steps):
        kind, x, gt = sampler.batch(step)
        params = compose(model, kind)
        out, trace = forward(params, x)
        loss, g = l1_loss(out, gt)
        grads, _ = backward(trace, g)
        adam_step(model.deltas[kind], grads, states[kind], index=index[kind])
        if log_rows is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log_rows.append({"step": step, "lr": states[kind].lr, "cfa": kind.value,
                             "loss": loss, "loss_gt": loss})
    return model


def overhead_formula(spec: NetSpec, q: float, k: int = 4) -> float:
    """Nominal adaptive parameter count ``k * q% * |theta|``."""
    return k * q / 100.0 * spec.param_count()


# ---------------------------------------------------------------- persistence

def save_adp(model: AdpModel, path) -> None:
    layers = param_layers(model.um)
    masks = {}
    for kind, mask in model.masks.items():
        delta = model.um.with_values(model.deltas[kind])
        layers += param_layers(delta, prefix=f"adp.{kind.value}/")
        masks[kind.value] = mask
    write_checkpoint(path, layers, masks)


def load_model(path):
    """Load either a plain checkpoint (``ParamStore``) or an ADP model."""
    layers, masks = read_checkpoint(path)
    um = params_from_layers(layers)
    if not masks:
        return um
    model = AdpModel(um)
    for name, mask in masks.items():
        kind = CfaKind.parse(name)
        delta = params_from_layers(layers, prefix=f"adp.{kind.value}/")
        if delta.spec != um.spec:
            raise FormatError(f"{path}: adaptive layers for {name} do not match the base")
        model.masks[kind] = mask
        model.deltas[kind] = delta.values
    return model
