import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from klap.dataset import toy_dataset
from klap.errors import ShapeError
from klap.evaluate import PSNR_CAP, EvalReport, diff_map, psnr, run_benchmark
from klap.isp import NoiseParams


def test_psnr_identical_capped():
    x = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(x, x) == PSNR_CAP == 100.0


def test_psnr_known_value():
    gt = np.zeros((3, 4, 4))
    assert psnr(np.full_like(gt, 0.1), gt) == pytest.approx(20.0)


def test_psnr_matches_oracle():
    rng = np.random.default_rng(1)
    pred, gt = rng.random((3, 16, 16)) * 1.2 - 0.1, rng.random((3, 16, 16))
    mse = sum((min(max(p, 0), 1) - g) ** 2 for p, g in zip(pred.ravel(), gt.ravel())) / gt.size
    assert psnr(pred, gt) == pytest.approx(10 * np.log10(1 / mse), abs=1e-10)


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.001, 0.3), st.floats(0.001, 0.3))
def test_psnr_monotone_in_error(a, b):
    gt = np.full((3, 4, 4), 0.5)
    lo, hi = sorted((a, b))
    assert psnr(gt + lo, gt) >= psnr(gt + hi, gt)


def test_psnr_symmetric_inside_range():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    assert psnr(a, b) == pytest.approx(psnr(b, a))


def test_diff_map():
    gt = np.zeros((3, 2, 2))
    pred = np.zeros((3, 2, 2))
    pred[:, 0, 0] = 0.1
    pred[0, 1, 1] = 0.9
    d = diff_map(pred, gt)
    assert d[0, 0] == pytest.approx(0.5)
    assert d[1, 1] == 1.0
    assert d[0, 1] == 0.0


@pytest.fixture(scope="module")
def data():
    return toy_dataset(3, 0, NoiseParams(), size=24)


def test_benchmark_self_evaluation(data, tmp_path):
    models = {"oracle": lambda kind, raws: data.gts,
              "zero": lambda kind, raws: np.zeros_like(data.gts)}
    report = run_benchmark(models, data, tmp_path / "r.csv", param_counts={"oracle": 0})
    summary = report.summary()
    assert summary["oracle"]["avg"] == 100.0
    assert summary["zero"]["avg"] < 20
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "cfa", "image", "psnr_db"]
    assert len(rows) == 1 + 2 * 4 * 3
    payload = json.loads((tmp_path / "r.summary.json").read_text())
    assert payload["models"]["oracle"]["params"] == 0


def test_benchmark_deterministic(data, tmp_path):
    models = {"half": lambda kind, raws: np.full_like(data.gts, 0.5)}
    run_benchmark(models, data, tmp_path / "a.csv")
    run_benchmark(models, data, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_report_mean():
    r = EvalReport(rows=[("m", "bayer", "0", 30.0), ("m", "bayer", "1", 32.0),
                         ("m", "quad", "0", 20.0)])
    assert r.mean("m", "bayer") == 31.0
    assert r.summary()["m"]["avg"] == pytest.approx(25.5)
