from collections import Counter

import numpy as np
import pytest

from klap.cfa import ALL_KINDS, CfaKind, mosaic
from klap.dataset import PairedSet, toy_dataset
from klap.errors import EmptyDatasetError, SpecMismatchError
from klap.evaluate import psnr
from klap.isp import NoiseParams
from klap.net import NetSpec, predict
from klap.tkl import (BatchSampler, TrainConfig, init_params, train_im, train_kc, train_ke,
                      train_unified, write_log)

SPEC = NetSpec(4, 1)
CFG = TrainConfig(steps=12, batch_size=2, patch_size=24, lr0=1e-3)


@pytest.fixture(scope="module")
def data():
    return toy_dataset(6, 0, NoiseParams(), size=48)


def test_sampler_round_robin_frequency(data):
    sampler = BatchSampler(data, ALL_KINDS, 2, 24, 0)
    counts = Counter(sampler.kind_at(s) for s in range(1000))
    for k in ALL_KINDS:
        assert abs(counts[k] / 1000 - 0.25) <= 0.01


def test_sampler_deterministic_and_aligned(data):
    s1, s2 = BatchSampler(data, ALL_KINDS, 3, 24, 5), BatchSampler(data, ALL_KINDS, 3, 24, 5)
    for step in range(6):
        k1, x1, g1 = s1.batch(step)
        k2, x2, g2 = s2.batch(step)
        assert k1 is k2 and x1.tobytes() == x2.tobytes() and g1.tobytes() == g2.tobytes()
        assert x1.shape == (3, 24, 24) and g1.shape == (3, 3, 24, 24)


def test_zero_kd_weights_equal_plain_training(data):
    init = init_params(SPEC, 0)
    teachers = {k: init_params(SPEC, i + 1) for i, k in enumerate(ALL_KINDS)}
    cfg = CFG.replace(lambda_kd=0.0, lambda_feat=0.0)
    kc = train_kc(teachers, data, cfg, student=init)
    plain = train_unified(data, cfg, SPEC, init)
    assert kc.values.tobytes() == plain.values.tobytes()


def test_kc_leaves_teachers_untouched(data):
    teachers = {k: init_params(SPEC, i + 1) for i, k in enumerate(ALL_KINDS)}
    before = {k: t.values.tobytes() for k, t in teachers.items()}
    student = train_kc(teachers, data, CFG, student=init_params(SPEC, 0))
    assert all(teachers[k].values.tobytes() == before[k] for k in ALL_KINDS)
    assert student.values.tobytes() != init_params(SPEC, 0).values.tobytes()


def test_kc_distillation_changes_result(data):
    init = init_params(SPEC, 0)
    teachers = {k: init_params(SPEC, i + 1) for i, k in enumerate(ALL_KINDS)}
    assert (train_kc(teachers, data, CFG, student=init).values.tobytes()
            != train_unified(data, CFG, SPEC, init).values.tobytes())


def test_training_deterministic(data):
    a = train_im(data, CfaKind.QUAD, CFG, SPEC)
    b = train_im(data, CfaKind.QUAD, CFG, SPEC)
    assert a.values.tobytes() == b.values.tobytes()


def test_overfit_single_image():
    one = toy_dataset(1, 3, NoiseParams(0.001, 0.001), size=24)
    cfg = TrainConfig(steps=300, batch_size=1, patch_size=24, lr0=3e-3)
    init = init_params(SPEC, 0)
    before = psnr(predict(init, one.raws[CfaKind.BAYER][0]), one.gts[0])
    trained = train_im(one, CfaKind.BAYER, cfg, SPEC, init)
    after = psnr(predict(trained, one.raws[CfaKind.BAYER][0]), one.gts[0])
    assert after > before + 5


def test_empty_and_missing_kind(data):
    with pytest.raises(EmptyDatasetError):
        train_im(data.subset([]), CfaKind.BAYER, CFG, SPEC)
    partial = PairedSet(data.gts, {CfaKind.BAYER: data.raws[CfaKind.BAYER]})
    with pytest.raises(EmptyDatasetError):
        train_unified(partial, CFG, SPEC)


def test_spec_mismatch(data):
    teachers = {k: init_params(NetSpec(6, 1), 0) for k in ALL_KINDS}
    with pytest.raises(SpecMismatchError):
        train_kc(teachers, data, CFG, student=init_params(SPEC, 0))


def test_ke_reduces_loss_and_logs(data, tmp_path):
    rows = []
    student = init_params(SPEC, 0)
    train_ke(student, data, CFG.replace(steps=40, log_every=10), log_rows=rows)
    assert [r["step"] for r in rows] == [0, 10, 20, 30, 39]
    assert rows[-1]["loss_avg"] < rows[0]["loss_avg"]
    write_log(tmp_path / "log.csv", rows)
    assert (tmp_path / "log.csv").read_text().startswith("step,lr,cfa,loss")


def test_augmented_batches_are_consistent_mosaics():
    clean = toy_dataset(4, 2, NoiseParams(0.0, 0.0), size=48)
    sampler = BatchSampler(clean, ALL_KINDS, 4, 24, 3, augment=True)
    for step in range(8):
        kind, x, gt = sampler.batch(step)
        for xi, gi in zip(x, gt):
            assert xi.tobytes() == mosaic(gi, kind).data.tobytes()
    # every crop is a flip/transpose of some stored label patch
    _, _, gt = sampler.batch(0)
    patches = [d for g in clean.gts for oy in (0, 24) for ox in (0, 24)
               for d in dihedral_all(g[:, oy:oy + 24, ox:ox + 24])]
    assert all(any(np.array_equal(g, p) for p in patches) for g in gt)


def dihedral_all(img):
    out = []
    for t in (img, np.swapaxes(img, -1, -2)):
        out += [t, t[..., ::-1, :], t[..., :, ::-1], t[..., ::-1, ::-1]]
    return out


def test_augmented_batches_deterministic_and_noisy(data):
    sampler = BatchSampler(data, [CfaKind.BAYER], 2, 24, 0, augment=True)
    _, x1, g1 = sampler.batch(0)
    _, x2, g2 = sampler.batch(0)
    assert x1.tobytes() == x2.tobytes()
    resid = x1 - np.stack([mosaic(g, CfaKind.BAYER).data for g in g1])
    assert 0.005 < resid.std() < 0.05
