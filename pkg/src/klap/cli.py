"""``klap`` command-line entry point."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import adp as adp_mod
from . import io
from .cfa import ALL_KINDS, CfaKind
from .checkpoint import read_scores, write_scores
from .config import RunConfig, apply_overrides, save_config, validate_config
from .dataset import crop_to_multiple, load_manifest, synthesize, toy_sources, write_dataset
from .errors import KlapError
from .evaluate import EvalReport, run_benchmark
from .isp import STRONG_NOISE, NoiseParams, cm
from .meta import MetaConfig, meta_test
from .net import ParamStore, load_checkpoint, predict, save_checkpoint
from .pipeline import faig_masks, mask_sweep, random_masks, run_recipe
from .tkl import init_params, train_im, train_kc, train_ke, write_log

log = logging.getLogger("klap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _kinds(text: str) -> list[CfaKind]:
    return [CfaKind.parse(t) for t in text.split(",") if t]


def _ratios(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


# ---------------------------------------------------------------- shared helpers

def _config(args) -> RunConfig:
    cfg = validate_config(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed}
    for flag, dotted in (("steps", "train.steps"), ("lr", "train.lr0"),
                         ("batch_size", "train.batch_size"), ("patch_size", "train.patch_size"),
                         ("width", "net.width"), ("blocks", "net.blocks")):
        overrides[dotted] = getattr(args, flag, None)
    return apply_overrides(cfg, overrides)


def _write(args, what: str, fn, *a) -> None:
    if args.dry_run:
        print(f"[dry-run] would write {what}")
        return
    fn(*a)
    log.info("wrote %s", what)


def _ensure_parent(args, path) -> None:
    if not args.dry_run:
        Path(path).parent.mkdir(parents=True, exist_ok=True)


def _load_model(path):
    return adp_mod.load_model(path)


def _params_for(model, kind: CfaKind) -> ParamStore:
    if isinstance(model, adp_mod.AdpModel):
        return adp_mod.compose(model, kind)
    return model


def _predictor(model):
    return lambda kind, raws: predict(_params_for(model, kind), raws)


def _save_rgb(args, path, rgb, cfg: RunConfig) -> None:
    if args.apply_cm:
        rgb = cm(rgb, cfg.synth)
    _ensure_parent(args, path)
    _write(args, str(path), io.write_ppm, path, rgb)


# ---------------------------------------------------------------- subcommands

def cmd_synth_dataset(args) -> int:
    cfg = _config(args)
    noise = STRONG_NOISE if args.strong_noise else NoiseParams(
        cfg.noise.gamma_gain if args.noise_gamma is None else args.noise_gamma,
        cfg.noise.sigma if args.noise_sigma is None else args.noise_sigma)
    if args.src:
        files = sorted(Path(args.src).glob("*.ppm"))
        if not files:
            raise KlapError(f"no .ppm sources in {args.src}")
        srcs = [crop_to_multiple(io.read_ppm(f)) for f in files]
        names = [f.stem for f in files]
    else:
        srcs = toy_sources(args.toy, cfg.seed, args.size)
        names = None
    data = synthesize(srcs, cfg.synth, noise, _kinds(args.kinds), cfg.seed, names)
    print(f"{len(data)} images x {len(data.kinds)} CFAs, noise "
          f"(gamma={noise.gamma_gain}, sigma={noise.sigma}) -> {args.out}")
    if not args.dry_run:
        write_dataset(args.out, data, args.split, cfg.synth)
    else:
        print(f"[dry-run] would write dataset to {args.out}")
    return 0


def _train_out(args, params: ParamStore, rows) -> None:
    _ensure_parent(args, args.out)
    _write(args, args.out, save_checkpoint, params, args.out)
    if args.log:
        _write(args, args.log, write_log, args.log, rows)


def cmd_train_im(args) -> int:
    cfg = _config(args)
    data = load_manifest(args.data)
    kind = CfaKind.parse(args.cfa)
    data.require(kind)
    if args.dry_run:
        print(f"[dry-run] train IM {kind.value}: {cfg.train.steps} steps on {len(data)} images")
        return 0
    rows = []
    params = train_im(data, kind, cfg.train.replace(seed=cfg.seed), cfg.net,
                      init_params(cfg.net, cfg.seed), log_rows=rows)
    _train_out(args, params, rows)
    return 0


def cmd_train_kc(args) -> int:
    cfg = _config(args)
    data = load_manifest(args.data)
    teachers = {}
    for kind in ALL_KINDS:
        path = Path(args.teachers) / f"im_{kind.value}.ckpt"
        if path.exists():
            teachers[kind] = load_checkpoint(path)
    if not teachers:
        raise KlapError(f"no im_<cfa>.ckpt teachers in {args.teachers}")
    spec = next(iter(teachers.values())).spec
    if args.dry_run:
        print(f"[dry-run] KC with teachers {[k.value for k in teachers]}, {cfg.train.steps} steps")
        return 0
    rows = []
    student = train_kc(teachers, data, cfg.train.replace(seed=cfg.seed),
                       init_params(spec, cfg.seed), log_rows=rows)
    _train_out(args, student, rows)
    return 0


def cmd_train_ke(args) -> int:
    cfg = _config(args)
    data = load_manifest(args.data)
    student = load_checkpoint(args.student)
    if args.dry_run:
        print(f"[dry-run] KE from {args.student}, {cfg.train.steps} steps")
        return 0
    rows = []
    params = train_ke(student, data, cfg.train.replace(seed=cfg.seed), log_rows=rows)
    _train_out(args, params, rows)
    return 0


def cmd_faig(args) -> int:
    um, im = load_checkpoint(args.um), load_checkpoint(args.im)
    kind = CfaKind.parse(args.cfa)
    calib = load_manifest(args.calib)
    calib.require(kind)
    n = min(args.calib_size, len(calib))
    if args.dry_run:
        print(f"[dry-run] FAIG {kind.value}: {n} calibration images, {args.steps} steps")
        return 0
    fs = adp_mod.faig_scores(um, im, calib.raws[kind][:n], calib.gts[:n], args.steps, kind)
    _ensure_parent(args, args.out)
    _write(args, args.out, write_scores, args.out, fs.scores)
    return 0


def cmd_select_mask(args) -> int:
    scores = read_scores(args.scores)
    mask = adp_mod.select_top_q(scores, args.q)
    payload = {"q": args.q, "kernel_count": int(scores.size),
               "kernels": [int(i) for i in np.flatnonzero(mask)]}
    text = json.dumps(payload)
    if args.out:
        _write(args, args.out, Path(args.out).write_text, text + "\n")
    else:
        print(text)
    return 0


def _masks(args, um: ParamStore, q: float, seed: int) -> dict:
    if args.selector == "random":
        return random_masks(um.spec, q, seed)
    scores = {}
    for kind in ALL_KINDS:
        path = Path(args.scores) / f"{kind.value}.bin"
        if not path.exists():
            raise KlapError(f"missing score file {path}")
        scores[kind] = read_scores(path)
    return faig_masks(scores, q)


def cmd_train_adp(args) -> int:
    cfg = _config(args)
    um = load_checkpoint(args.um)
    data = load_manifest(args.data)
    masks = _masks(args, um, args.q, cfg.seed)
    if args.dry_run:
        print(f"[dry-run] ADP {args.selector} q={args.q}: "
              f"{sum(int(m.sum()) for m in masks.values())} kernels, {cfg.train.steps} steps")
        return 0
    rows = []
    model = adp_mod.train_adp(um, masks, data, cfg.train.replace(seed=cfg.seed), log_rows=rows)
    _ensure_parent(args, args.out)
    _write(args, args.out, adp_mod.save_adp, model, args.out)
    if args.log:
        _write(args, args.log, write_log, args.log, rows)
    return 0


def cmd_mask_sweep(args) -> int:
    cfg = _config(args)
    um = load_checkpoint(args.um)
    data, test = load_manifest(args.data), load_manifest(args.test)
    ratios = _ratios(args.ratios)
    scores = None
    if args.selector == "faig":
        scores = {k: read_scores(Path(args.scores) / f"{k.value}.bin") for k in ALL_KINDS}
    if args.dry_run:
        print(f"[dry-run] sweep {args.selector} over q={ratios}")
        return 0
    rows = mask_sweep(um, None, data, test, ratios, args.selector, cfg.train, cfg.seed, scores)
    lines = [("selector", "q", "psnr_db", "adaptive_params", "nominal_overhead")]
    lines += [(s, f"{q:g}", f"{p:.6f}", n, f"{o:.1f}") for s, q, p, n, o in rows]
    for line in lines:
        print(*line)
    _ensure_parent(args, args.out)
    _write(args, args.out, _write_csv, args.out, lines)
    return 0


def _write_csv(path, lines) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(lines)


def cmd_infer(args) -> int:
    cfg = _config(args)
    model = _load_model(args.model)
    raw = io.read_raw(args.input, args.cfa)
    rgb = predict(_params_for(model, raw.kind), raw.data)
    _save_rgb(args, args.out, rgb, cfg)
    return 0


def cmd_meta_infer(args) -> int:
    cfg = _config(args)
    model = _load_model(args.model)
    if not isinstance(model, adp_mod.AdpModel):
        model = adp_mod.AdpModel.from_masks(model, {})
    raw = io.read_raw(args.input, args.cfa)
    meta = MetaConfig(args.lambda_pix, args.lambda_n2s, args.iters,
                      cfg.meta.lr if args.lr is None else args.lr, args.bin_target)
    rows = []
    rgb, _ = meta_test(model, raw, meta, log_rows=rows)
    for row in rows:
        log.info("iter %d loss %.6f", row["iter"], row["loss"])
    _save_rgb(args, args.out, rgb, cfg)
    return 0


def cmd_eval(args) -> int:
    data = load_manifest(args.data)
    models, counts = {}, {}
    for item in args.model:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        model = _load_model(path)
        models[name] = _predictor(model)
        counts[name] = (model.param_count() if isinstance(model, adp_mod.AdpModel)
                        else model.spec.param_count())
    if args.dry_run:
        print(f"[dry-run] evaluate {list(models)} on {len(data)} images")
        return 0
    _ensure_parent(args, args.report)
    report = run_benchmark(models, data, args.report, counts)
    _print_summary(report)
    return 0


def _print_summary(report: EvalReport) -> None:
    for name, row in report.summary().items():
        cells = " ".join(f"{k}={v:.2f}" for k, v in row["per_cfa"].items())
        print(f"{name:24s} avg={row['avg']:.3f}  {cells}")


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    print(f"pipeline seed={cfg.seed} config={cfg.digest()} -> {out}")
    if args.dry_run:
        print(json.dumps(cfg.to_dict()["recipe"]))
        return 0
    result = run_recipe(cfg.recipe_config(), meta={"config_hash": cfg.digest()})
    out.mkdir(parents=True, exist_ok=True)
    result.report.write(out / "report.csv", out / "report.summary.json")
    _write_csv(out / "sweep.csv", [("selector", "q", "psnr_db", "adaptive_params")]
               + [(s, f"{q:g}", f"{p:.6f}", n) for s, q, p, n in result.sweep])
    _write_csv(out / "meta_test.csv", [("cfa", "image", "psnr_klap", "psnr_klap_m")]
               + [(c, i, f"{a:.6f}", f"{b:.6f}") for c, i, a, b in result.meta_rows])
    save_config(cfg, out / "config.json")
    adp_mod.save_adp(result.models["KLAP"], out / "klap.ckpt")
    save_checkpoint(result.models["Baseline-UM"], out / "baseline_um.ckpt")
    _print_summary(result.report)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads (env KLAP_THREADS)")
    common.add_argument("--dry-run", action="store_true", help="validate and report, write nothing")
    common.add_argument("-v", "--verbose", action="store_true")

    train = _Parser(add_help=False)
    train.add_argument("--data", required=True, help="dataset directory with manifest.json")
    train.add_argument("--out", required=True, help="output checkpoint")
    train.add_argument("--steps", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--patch-size", type=int)
    train.add_argument("--log", help="training log CSV")

    parser = _Parser(prog="klap", description="Unified demosaicing for Bayer and non-Bayer CFAs.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-dataset", parents=[common], help="synthesize a paired raw dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--src", help="directory of P6 PPM sources")
    src.add_argument("--toy", type=int, metavar="N", help="generate N procedural images")
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default="bayer,quad,nona,qxq")
    p.add_argument("--noise-gamma", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--strong-noise", action="store_true")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--size", type=int, default=48, help="toy image size")
    p.set_defaults(func=cmd_synth_dataset)

    p = sub.add_parser("train-im", parents=[common, train], help="train an independent model")
    p.add_argument("--cfa", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--blocks", type=int)
    p.set_defaults(func=cmd_train_im)

    p = sub.add_parser("train-kc", parents=[common, train], help="knowledge collection")
    p.add_argument("--teachers", required=True, help="directory holding im_<cfa>.ckpt")
    p.set_defaults(func=cmd_train_kc)

    p = sub.add_parser("train-ke", parents=[common, train], help="knowledge examination")
    p.add_argument("--student", required=True)
    p.set_defaults(func=cmd_train_ke)

    p = sub.add_parser("faig", parents=[common], help="per-kernel attribution scores")
    p.add_argument("--um", required=True)
    p.add_argument("--im", required=True)
    p.add_argument("--cfa", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--calib-size", type=int, default=16)
    p.add_argument("--steps", type=int, default=adp_mod.FAIG_STEPS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_faig)

    p = sub.add_parser("select-mask", parents=[common], help="top-q kernel mask from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--q", type=float, default=adp_mod.DEFAULT_Q)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select_mask)

    p = sub.add_parser("train-adp", parents=[common, train], help="train adaptive kernels")
    p.add_argument("--um", required=True)
    p.add_argument("--scores", help="directory holding <cfa>.bin score files")
    p.add_argument("--q", type=float, default=adp_mod.DEFAULT_Q)
    p.add_argument("--selector", choices=("faig", "random"), default="faig")
    p.set_defaults(func=cmd_train_adp)

    p = sub.add_parser("mask-sweep", parents=[common, train], help="ADP quality vs mask ratio")
    p.add_argument("--um", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--scores")
    p.add_argument("--ratios", default="0,0.1,0.5,1,3,5")
    p.add_argument("--selector", choices=("faig", "random"), default="faig")
    p.set_defaults(func=cmd_mask_sweep)

    for name, func in (("infer", cmd_infer), ("meta-infer", cmd_meta_infer)):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} on one raw")
        p.add_argument("--model", required=True)
        p.add_argument("--input", required=True, help="raw PGM (CFA from --cfa or sidecar)")
        p.add_argument("--cfa")
        p.add_argument("--out", required=True)
        p.add_argument("--apply-cm", action="store_true", help="apply CM for display")
        p.set_defaults(func=func)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--lambda-pix", type=float, default=1.0)
    p.add_argument("--lambda-n2s", type=float, default=0.02)
    p.add_argument("--lr", type=float)
    p.add_argument("--bin-target", choices=("quad", "bayer"), default="quad")

    p = sub.add_parser("eval", parents=[common], help="PSNR benchmark")
    p.add_argument("--model", action="append", required=True, metavar="[NAME=]CKPT")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="full recipe on the toy dataset")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("KLAP_THREADS")
    return int(env) if env else None


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _threads(args)
        ctx = contextlib.nullcontext()
        if limit is not None:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=limit)
        with ctx:
            return args.func(args)
    except (KlapError, OSError, ValueError) as exc:
        print(f"klap {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
