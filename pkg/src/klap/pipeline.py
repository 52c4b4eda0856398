"""End-to-end toy-scale recipe: IMs -> baseline UM -> KC/KE -> FAIG -> ADP -> meta-test."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import adp as adp_mod
from .cfa import ALL_KINDS
from .dataset import PairedSet, toy_dataset
from .evaluate import EvalReport, evaluate_predictor, psnr
from .isp import NoiseParams, STRONG_NOISE, TRAIN_NOISE, SynthConfig
from .meta import MetaConfig, meta_test
from .net import NetSpec, ParamStore, predict
from .tkl import TrainConfig, init_params, train_im, train_kc, train_ke, train_unified

log = logging.getLogger(__name__)


@dataclass
class RecipeConfig:
    seed: int = 0
    net: NetSpec = field(default_factory=NetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
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
    meta: MetaConfig = field(default_factory=MetaConfig)
    noise: NoiseParams = TRAIN_NOISE
    strong_noise: NoiseParams = STRONG_NOISE
    run_meta: bool = True
    synth: SynthConfig = field(default_factory=SynthConfig)


def _predictor(params: ParamStore):
    return lambda kind, raws: predict(params, raws)


@dataclass
class RecipeResult:
    report: EvalReport
    models: dict
    masks: dict
    scores: dict
    sweep: list            # (selector, q, avg psnr, adaptive params)
    meta_rows: list        # (cfa, image, psnr T=0, psnr T=iters)
    timings: dict

    def avg(self, model: str) -> float:
        return self.report.summary()[model]["avg"]


def build_data(cfg: RecipeConfig):
    train = toy_dataset(cfg.n_train, cfg.seed * 3 + 1, cfg.noise, cfg.image_size, cfg.synth)
    test = toy_dataset(cfg.n_test, cfg.seed * 3 + 2, cfg.noise, cfg.image_size, cfg.synth)
    strong = toy_dataset(cfg.n_test, cfg.seed * 3 + 3, cfg.strong_noise, cfg.image_size,
                         cfg.synth, image_seed=cfg.seed * 3 + 2)
    return train, test, strong


def faig_for_all(um: ParamStore, teachers: dict, train: PairedSet, calib_size: int,
                 n_steps: int) -> dict:
    calib = np.arange(min(calib_size, len(train)))
    return {kind: adp_mod.faig_scores(um, teachers[kind], train.raws[kind][calib],
                                      train.gts[calib], n_steps, kind)
            for kind in teachers}


def faig_masks(scores: dict, q: float) -> dict:
    return {k: adp_mod.select_top_q(s, q) for k, s in scores.items()}


def random_masks(spec: NetSpec, q: float, seed: int, kinds=ALL_KINDS) -> dict:
    return {k: adp_mod.select_random(spec.kernel_count, q, seed * 16 + ALL_KINDS.index(k))
            for k in kinds}


def mask_sweep(um: ParamStore, teachers: dict | None, train: PairedSet, test: PairedSet,
               ratios, selector: str, cfg: TrainConfig, seed: int = 0, scores: dict | None = None,
               calib_size: int = 16, faig_steps: int = adp_mod.FAIG_STEPS) -> list[tuple]:
    """Train one ADP model per ratio; rows ``(selector, q, avg psnr, adaptive params, nominal)``.

    FAIG scores come from ``scores`` or are computed against ``teachers``.
    """
    if selector not in ("faig", "random"):
        raise ValueError(f"unknown selector {selector!r}")
    if selector == "faig" and scores is None:
        scores = faig_for_all(um, teachers, train, calib_size, faig_steps)
    rows = []
    for q in ratios:
        masks = faig_masks(scores, q) if selector == "faig" else random_masks(um.spec, q, seed)
        model = adp_mod.train_adp(um, masks, train, cfg.replace(seed=seed))
        report = EvalReport(rows=evaluate_predictor("m", adp_mod.adp_predictor(model), test))
        rows.append((selector, float(q), report.summary()["m"]["avg"],
                     model.adaptive_param_count(),
                     adp_mod.overhead_formula(um.spec, q, len(masks))))
    return rows


def run_recipe(cfg: RecipeConfig, train: PairedSet | None = None,
               test: PairedSet | None = None, strong: PairedSet | None = None,
               meta: dict | None = None) -> RecipeResult:
    t_start = time.perf_counter()
    timings = {}
    if train is None:
        train, test, strong = build_data(cfg)
    spec = cfg.net
    base = cfg.train.replace(seed=cfg.seed)
    init = init_params(spec, cfg.seed)

    def tick(name):
        timings[name] = round(time.perf_counter() - t_start, 1)
        log.info("seed %d: %s done at %.1fs", cfg.seed, name, timings[name])

    teachers = {k: train_im(train, k, base.replace(steps=cfg.im_steps), spec, init)
                for k in ALL_KINDS}
    tick("im")
    baseline = train_unified(train, base.replace(steps=cfg.kc_steps + cfg.ke_steps), spec, init)
    tick("baseline_um")
    student = train_kc(teachers, train, base.replace(steps=cfg.kc_steps), init)
    tkl = train_ke(student, train, base.replace(steps=cfg.ke_steps))
    tick("tkl")
    scores = faig_for_all(tkl, teachers, train, cfg.calib_size, cfg.faig_steps)
    tick("faig")

    adp_cfg = base.replace(steps=cfg.adp_steps, lr0=cfg.adp_lr)
    plan = [("faig", q) for q in sorted(set(cfg.sweep_ratios) | {cfg.q})]
    plan += [("random", q) for q in sorted(set(cfg.random_ratios))]
    adp_models = {}
    for selector, q in plan:
        if q > 0:
            masks = (faig_masks(scores, q) if selector == "faig"
                     else random_masks(spec, q, cfg.seed))
            adp_models[(selector, q)] = adp_mod.train_adp(tkl, masks, train, adp_cfg)
    tick("adp")

    models = {"IM": None, "Baseline-UM": baseline, "TKL": tkl}
    rows = []
    for kind in ALL_KINDS:
        rows += evaluate_predictor("IM", _predictor(teachers[kind]), test, [kind])
    rows += evaluate_predictor("Baseline-UM", _predictor(baseline), test)
    rows += evaluate_predictor("TKL", _predictor(tkl), test)
    klap = adp_models.get(("faig", cfg.q)) or adp_mod.AdpModel.from_masks(tkl, {})
    rows += evaluate_predictor("KLAP", adp_mod.adp_predictor(klap), test)
    for (selector, q), model in adp_models.items():
        rows += evaluate_predictor(f"ADP-{selector}-q{q:g}", adp_mod.adp_predictor(model), test)
    report = EvalReport(rows=rows)
    summary = report.summary()
    # q = 0 selects no kernel, so that sweep point is the TKL model itself
    sweep = []
    for selector, q in plan:
        if q > 0:
            sweep.append((selector, q, summary[f"ADP-{selector}-q{q:g}"]["avg"],
                          adp_models[(selector, q)].adaptive_param_count()))
        else:
            sweep.append((selector, q, summary["TKL"]["avg"], 0))
    report.param_counts = {"IM": 4 * spec.param_count(), "Baseline-UM": spec.param_count(),
                           "TKL": spec.param_count(), "KLAP": klap.param_count()}
    report.meta = {"seed": cfg.seed, "net": asdict(spec), "q": cfg.q, **(meta or {})}
    tick("eval")

    meta_rows = []
    if cfg.run_meta and strong is not None:
        for kind in ALL_KINDS:
            for i in range(len(strong)):
                raw = strong.raw(kind, i)
                before = psnr(predict(adp_mod.compose(klap, kind), raw.data), strong.gts[i])
                out, _ = meta_test(klap, raw, cfg.meta)
                meta_rows.append((kind.value, strong.names[i], before, psnr(out, strong.gts[i])))
        tick("meta")
    models.update({"teachers": teachers, "KLAP": klap, "adp": adp_models})
    masks = {key: m.masks for key, m in adp_models.items()}
    return RecipeResult(report, models, masks, scores, sweep, meta_rows, timings)
