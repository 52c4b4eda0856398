"""Independent per-CFA models and two-stage knowledge learning of the unified model.

Stage order: ``train_im`` for every CFA (teachers), then ``train_kc``
(student distils from the teacher matching each batch's CFA), then
``train_ke`` (student alone, labels only).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict

import numpy as np

from .cfa import ALL_KINDS, PERIOD_LCM, CfaKind, color_map
from .dataset import PairedSet
from .errors import EmptyDatasetError, SpecMismatchError
from .isp import add_noise, rng_stream
from .net import NetSpec, ParamStore, backward, forward, l1_loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 6000
    batch_size: int = 8
    patch_size: int = 48
    seed: int = 0
    lr0: float = 2e-4
    lr_min: float = 1e-6
    lambda_gt: float = 1.0
    lambda_kd: float = 0.5
    lambda_feat: float = 0.1
    log_every: int = 50
    augment: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.patch_size <= 0:
            raise ValueError("steps, batch_size and patch_size must be positive")
        if min(self.lambda_gt, self.lambda_kd, self.lambda_feat) < 0:
            raise ValueError("loss weights must be non-negative")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


def init_params(spec: NetSpec, seed: int) -> ParamStore:
    """Initial weights; every model of one run starts from the same point."""
    return ParamStore.init(spec, rng_stream(seed, 0x1A17))


def _dihedral(img: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 flips/transposes of the trailing two axes."""
    if code & 4:
        img = np.swapaxes(img, -1, -2)
    if code & 2:
        img = img[..., ::-1, :]
    if code & 1:
        img = img[..., :, ::-1]
    return img


class BatchSampler:
    """Deterministic batches: step ``s`` uses CFA ``kinds[s % k]`` and stream ``(seed, s)``.

    With ``augment`` (and known noise parameters) each label crop gets a random
    flip/transpose and is re-mosaicked with fresh noise, so a small set does not
    pin the model to one noise realization. Otherwise the stored raws are used.
    """

    def __init__(self, data: PairedSet, kinds, batch_size: int, patch_size: int, seed: int,
                 augment: bool = False):
        self.kinds = tuple(CfaKind.parse(k) for k in kinds)
        for kind in self.kinds:
            data.require(kind)
        self.data, self.batch_size, self.patch_size, self.seed = data, batch_size, patch_size, seed
        self.augment = augment and data.noise is not None
        _, _, h, w = data.gts.shape
        if h < patch_size or w < patch_size:
            raise ValueError(f"patch size {patch_size} exceeds image size {h}x{w}")
        if self.augment and patch_size % PERIOD_LCM:
            raise ValueError(f"augmented patches must be a multiple of {PERIOD_LCM}")

    def kind_at(self, step: int) -> CfaKind:
        return self.kinds[step % len(self.kinds)]

    def batch(self, step: int):
        kind = self.kind_at(step)
        rng = rng_stream(self.seed, 0xBA7C, step)
        idx = rng.integers(len(self.data), size=self.batch_size)
        _, _, h, w = self.data.gts.shape
        p, grid = self.patch_size, PERIOD_LCM
        oy = rng.integers((h - p) // grid + 1, size=self.batch_size) * grid
        ox = rng.integers((w - p) // grid + 1, size=self.batch_size) * grid
        gt = np.stack([self.data.gts[i, :, y:y + p, xx:xx + p] for i, y, xx in zip(idx, oy, ox)])
        if not self.augment:
            raws = self.data.raws[kind]
            x = np.stack([raws[i, y:y + p, xx:xx + p] for i, y, xx in zip(idx, oy, ox)])
            return kind, x, gt
        codes = rng.integers(8, size=self.batch_size)
        gt = np.stack([_dihedral(g, c) for g, c in zip(gt, codes)])
        clean = np.take_along_axis(gt, color_map(kind, p, p)[None, None], axis=1)[:, 0]
        x = add_noise(clean, self.data.noise, rng).astype(gt.dtype)
        return kind, x, np.ascontiguousarray(gt)


def _feature_loss(student_feats, teacher_feats):
    total, grads = 0.0, []
    for fs, ft in zip(student_feats, teacher_feats):
        val, g = l1_loss(fs, ft)
        total += val
        grads.append(g)
    return total, grads


def _train(student: ParamStore, data: PairedSet, kinds, cfg: TrainConfig,
           teachers: dict | None = None, log_rows: list | None = None,
           validate=None) -> ParamStore:
    """Shared loop; with no teachers (or zero KD weights) this is plain L1 training."""
    params = student.copy()
    sampler = BatchSampler(data, kinds, cfg.batch_size, cfg.patch_size, cfg.seed, cfg.augment)
    state = AdamState.create(params.values.size, cfg.steps, lr0=cfg.lr0, lr_min=cfg.lr_min)
    distil = teachers is not None and (cfg.lambda_kd > 0 or cfg.lambda_feat > 0)
    running = []
    for step in range(cfg.steps):
        kind, x, gt = sampler.batch(step)
        out, trace = forward(params, x)
        loss_gt, g = l1_loss(out, gt)
        upstream = cfg.lambda_gt * g
        row = {"step": step, "lr": state.lr, "cfa": kind.value, "loss_gt": loss_gt}
        block_grads = None
        if distil:
            t_out, t_trace = forward(teachers[kind], x)
            loss_kd, g_kd = l1_loss(out, t_out)
            loss_feat, block_grads = _feature_loss(trace.block_outputs, t_trace.block_outputs)
            upstream = upstream + cfg.lambda_kd * g_kd
            block_grads = [cfg.lambda_feat * bg for bg in block_grads]
            row.update(loss_kd=loss_kd, loss_feat=loss_feat)
            total = cfg.lambda_gt * loss_gt + cfg.lambda_kd * loss_kd + cfg.lambda_feat * loss_feat
        else:
            total = cfg.lambda_gt * loss_gt
        row["loss"] = total
        grads, _ = backward(trace, upstream, block_grads)
        adam_step(params.values, grads, state)
        running.append(total)
        if log_rows is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            row["loss_avg"] = float(np.mean(running[-cfg.log_every:]))
            if validate is not None and step == cfg.steps - 1:
                row["val_psnr"] = validate(params)
            log_rows.append(row)
            log.debug("step %d lr %.2e loss %.5f", step, row["lr"], row["loss_avg"])
    return params


def train_im(data: PairedSet, kind: CfaKind, cfg: TrainConfig, spec: NetSpec = NetSpec(),
             init: ParamStore | None = None, log_rows=None, validate=None) -> ParamStore:
    """Independent model: L1 training on one CFA only."""
    kind = CfaKind.parse(kind)
    data.require(kind)
    init = init if init is not None else init_params(spec, cfg.seed)
    return _train(init, data, (kind,), cfg, log_rows=log_rows, validate=validate)


def train_unified(data: PairedSet, cfg: TrainConfig, spec: NetSpec = NetSpec(),
                  init: ParamStore | None = None, kinds=ALL_KINDS, log_rows=None,
                  validate=None) -> ParamStore:
    """Baseline unified model: plain L1 on round-robin mixed-CFA batches."""
    init = init if init is not None else init_params(spec, cfg.seed)
    return _train(init, data, kinds, cfg, log_rows=log_rows, validate=validate)


def _check_teachers(teachers: dict, student: ParamStore) -> None:
    for kind, teacher in teachers.items():
        if teacher.spec != student.spec:
            raise SpecMismatchError(f"teacher {CfaKind.parse(kind).value} has spec "
                                    f"{teacher.spec}, student has {student.spec}")


def train_kc(teachers: dict, data: PairedSet, cfg: TrainConfig,
             student: ParamStore | None = None, kinds=None, log_rows=None,
             validate=None) -> ParamStore:
    """Knowledge collection.

    Loss per batch of CFA ``k``::

        l_gt * |S(x) - y| + l_kd * |S(x) - T_k(x)| + l_feat * sum_b |F_S^b(x) - F_T^b(x)|

    Teachers are read-only.
    """
    teachers = {CfaKind.parse(k): v for k, v in teachers.items()}
    if not teachers:
        raise EmptyDatasetError("no teachers given")
    first = next(iter(teachers.values()))
    student = student if student is not None else init_params(first.spec, cfg.seed)
    _check_teachers(teachers, student)
    kinds = kinds or tuple(k for k in ALL_KINDS if k in teachers)
    return _train(student, data, kinds, cfg, teachers=teachers, log_rows=log_rows,
                  validate=validate)


def train_ke(student: ParamStore, data: PairedSet, cfg: TrainConfig, kinds=ALL_KINDS,
             log_rows=None, validate=None) -> ParamStore:
    """Knowledge examination: label-only fine-tuning of the KC student."""
    return _train(student, data, kinds, cfg, log_rows=log_rows, validate=validate)


LOG_FIELDS = ("step", "lr", "cfa", "loss", "loss_avg", "loss_gt", "loss_kd", "loss_feat",
              "val_psnr")


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v)
                             for k, v in row.items()})
