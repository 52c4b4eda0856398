"""PSNR, difference maps and benchmark reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cfa import CfaKind
from .dataset import PairedSet
from .errors import ShapeError

PSNR_CAP = 100.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """PSNR in dB with peak 1.0; ``pred`` is clamped to [0, 1] first."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((np.clip(pred, 0.0, 1.0) - gt) ** 2)
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def diff_map(pred: np.ndarray, gt: np.ndarray, gain: float = 5.0) -> np.ndarray:
    """Per-pixel mean absolute channel error, scaled by ``gain`` and clamped."""
    if np.shape(pred) != np.shape(gt):
        raise ShapeError(f"shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
    err = np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64)), axis=0)
    return np.clip(gain * err, 0.0, 1.0)


# (kind, raws (N, H, W)) -> clamped RGB (N, 3, H, W)
Predictor = Callable[[CfaKind, np.ndarray], np.ndarray]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)          # (model, cfa, image, psnr)
    param_counts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def mean(self, model: str, cfa: str | None = None) -> float:
        vals = [r[3] for r in self.rows if r[0] == model and (cfa is None or r[1] == cfa)]
        return float(np.mean(vals))

    def summary(self) -> dict:
        out = {}
        for model in dict.fromkeys(r[0] for r in self.rows):
            cfas = list(dict.fromkeys(r[1] for r in self.rows if r[0] == model))
            per = {c: self.mean(model, c) for c in cfas}
            out[model] = {"per_cfa": per, "avg": float(np.mean(list(per.values())))}
            if model in self.param_counts:
                out[model]["params"] = self.param_counts[model]
        return out

    def write(self, csv_path, summary_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["model", "cfa", "image", "psnr_db"])
            for model, cfa, image, value in self.rows:
                writer.writerow([model, cfa, image, f"{value:.6f}"])
        if summary_path is not None:
            payload = {"models": self.summary(), "meta": self.meta}
            Path(summary_path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def evaluate_predictor(name: str, predictor: Predictor, data: PairedSet,
                       kinds=None) -> list[tuple]:
    rows = []
    for kind in kinds or data.kinds:
        preds = predictor(kind, data.raws[kind])
        for i in range(len(data)):
            image = data.names[i] if data.names else str(i)
            rows.append((name, kind.value, image, psnr(preds[i], data.gts[i])))
    return rows


def run_benchmark(models: dict, data: PairedSet, report_path=None, param_counts=None,
                  meta=None, kinds=None) -> EvalReport:
    """Evaluate every ``(model, cfa)`` cell; writes CSV (+ summary JSON) if asked."""
    report = EvalReport(param_counts=dict(param_counts or {}), meta=dict(meta or {}))
    for name, predictor in models.items():
        report.rows.extend(evaluate_predictor(name, predictor, data, kinds))
    if report_path is not None:
        report_path = Path(report_path)
        report.write(report_path, report_path.with_suffix(".summary.json"))
    return report
