import json

import numpy as np
import pytest

from klap.cfa import CfaKind, RawImage
from klap.cli import dispatch
from klap.config import RunConfig, parse_config, save_config, validate_config
from klap.errors import ConfigError
from klap.io import read_ppm, write_raw
from klap.isp import SynthConfig, cm
from klap.net import NetSpec, ParamStore, predict, save_checkpoint

TINY = {"seed": 0, "net": {"width": 4, "blocks": 1},
        "train": {"batch_size": 2, "patch_size": 24, "lr0": 1e-3},
        "recipe": {"n_train": 4, "n_test": 2, "image_size": 24, "im_steps": 4, "kc_steps": 4,
                   "ke_steps": 2, "adp_steps": 4, "faig_steps": 2, "calib_size": 2,
                   "sweep_ratios": [0, 5], "random_ratios": [5], "q": 5}}


def test_no_arguments_prints_usage(capsys):
    assert dispatch([]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_subcommand_and_missing_flag():
    assert dispatch(["frobnicate"]) == 2
    assert dispatch(["infer", "--model", "x"]) == 2


def test_runtime_error_exit_code(tmp_path):
    assert dispatch(["infer", "--model", str(tmp_path / "missing.ckpt"),
                     "--input", str(tmp_path / "none.pgm"), "--out", str(tmp_path / "o.ppm")]) == 1


def test_config_round_trip(tmp_path):
    cfg = RunConfig()
    save_config(cfg, tmp_path / "c.json")
    back = validate_config(tmp_path / "c.json")
    assert back.to_dict() | {"out_dir": None} == cfg.to_dict() | {"out_dir": None}
    assert back.digest() != "" and parse_config(cfg.to_dict()).digest() == cfg.digest()


@pytest.mark.parametrize("raw,field", [
    ({}, "seed"),
    ({"seed": 0, "noise": {"sigma": -0.1}}, "noise.sigma"),
    ({"seed": 0, "bogus": 1}, "bogus"),
    ({"seed": 0, "train": {"stepz": 3}}, "train.stepz"),
    ({"seed": "x"}, "seed"),
])
def test_config_errors_name_field(raw, field):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.field == field


def test_infer_apply_cm_matches_oracle(tmp_path):
    params = ParamStore.init(NetSpec(4, 1), np.random.default_rng(0))
    save_checkpoint(params, tmp_path / "m.ckpt")
    raw = RawImage(np.random.default_rng(1).random((24, 24)), CfaKind.QXQ)
    write_raw(tmp_path / "raw.pgm", raw)
    args = ["infer", "--model", str(tmp_path / "m.ckpt"), "--input", str(tmp_path / "raw.pgm"),
            "--cfa", "qxq"]
    assert dispatch(args + ["--out", str(tmp_path / "lin.ppm")]) == 0
    assert dispatch(args + ["--out", str(tmp_path / "cm.ppm"), "--apply-cm"]) == 0
    stored = np.round(raw.data * 65535) / 65535
    expected = cm(predict(params, stored), SynthConfig())
    np.testing.assert_allclose(read_ppm(tmp_path / "cm.ppm"), expected, atol=0.5 / 65535 + 1e-9)


def test_dry_run_writes_nothing(tmp_path):
    out = tmp_path / "ds"
    assert dispatch(["synth-dataset", "--toy", "2", "--size", "24", "--out", str(out),
                     "--dry-run"]) == 0
    assert not out.exists()
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    before = sorted(p.name for p in tmp_path.iterdir())
    assert dispatch(["pipeline", "--config", str(tmp_path / "c.json"), "--dry-run"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == before


def test_stage_commands_end_to_end(tmp_path):
    d = str(tmp_path)
    assert dispatch(["synth-dataset", "--toy", "3", "--size", "24", "--out", f"{d}/ds",
                     "--seed", "1"]) == 0
    common = ["--data", f"{d}/ds", "--steps", "3", "--batch-size", "2", "--patch-size", "24"]
    for kind in ("bayer", "quad", "nona", "qxq"):
        assert dispatch(["train-im", "--cfa", kind, "--width", "4", "--blocks", "1",
                         "--out", f"{d}/t/im_{kind}.ckpt", *common]) == 0
    assert dispatch(["train-kc", "--teachers", f"{d}/t", "--out", f"{d}/kc.ckpt", *common]) == 0
    assert dispatch(["train-ke", "--student", f"{d}/kc.ckpt", "--out", f"{d}/ke.ckpt",
                     "--log", f"{d}/ke.csv", *common]) == 0
    for kind in ("bayer", "quad", "nona", "qxq"):
        assert dispatch(["faig", "--um", f"{d}/ke.ckpt", "--im", f"{d}/t/im_{kind}.ckpt",
                         "--cfa", kind, "--calib", f"{d}/ds", "--steps", "2",
                         "--out", f"{d}/scores/{kind}.bin"]) == 0
    assert dispatch(["select-mask", "--scores", f"{d}/scores/quad.bin", "--q", "10",
                     "--out", f"{d}/mask.json"]) == 0
    assert len(json.loads((tmp_path / "mask.json").read_text())["kernels"]) == 2   # round(10% of 19 kernels)
    assert dispatch(["train-adp", "--um", f"{d}/ke.ckpt", "--scores", f"{d}/scores",
                     "--q", "10", "--out", f"{d}/adp.ckpt", *common]) == 0
    assert dispatch(["mask-sweep", "--um", f"{d}/ke.ckpt", "--scores", f"{d}/scores",
                     "--test", f"{d}/ds", "--ratios", "0,10", "--out", f"{d}/sweep.csv",
                     *common]) == 0
    assert dispatch(["meta-infer", "--model", f"{d}/adp.ckpt", "--input",
                     f"{d}/ds/img0000_quad.pgm", "--iters", "2", "--out", f"{d}/m.ppm"]) == 0
    assert read_ppm(tmp_path / "m.ppm").shape == (3, 24, 24)
    assert dispatch(["eval", "--model", f"um={d}/ke.ckpt", "--model", f"adp={d}/adp.ckpt",
                     "--data", f"{d}/ds", "--report", f"{d}/r.csv"]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("model,cfa,image,psnr_db")


def test_pipeline_deterministic(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    for run in ("a", "b"):
        assert dispatch(["pipeline", "--config", str(tmp_path / "c.json"), "--seed", "7",
                         "--out", str(tmp_path / run), "--threads", "1"]) == 0
    for name in ("report.csv", "report.summary.json", "sweep.csv", "meta_test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
