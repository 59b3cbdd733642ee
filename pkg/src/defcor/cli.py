"""``defcor`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .calib import PalpationTrace, fit_global_stiffness
from .config import load_config
from .dataset import DatasetManifest, synthesize_dataset
from .evaluate import PREDICTORS, evaluate_run, model_predictor
from .fields import flow_to_color
from .net import load_checkpoint
from .train import train_loop

log = logging.getLogger("defcor")


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _seed_override(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("DEFCOR_SEED")
    return int(env) if env else None


def _config(args, section_seed: str | None = None):
    overrides = _parse_set(args.set)
    seed = _seed_override(args)
    if seed is not None and section_seed:
        overrides.setdefault(f"{section_seed}.seed", seed)
    return load_config(args.config, overrides)


def _ckpt_path(path) -> Path:
    p = Path(path)
    return p / "best.ckpt" if p.is_dir() else p


# subcommands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args, "synth")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    jobs = args.jobs or cfg.io.jobs
    manifest = synthesize_dataset(out, asdict(cfg.synth), jobs=jobs)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.records)} samples to {out} {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, "train")
    manifest = DatasetManifest.load(args.data)
    out = Path(args.out)
    resume = None
    if args.resume is not None:
        resume = Path(args.resume) if args.resume else out / "last.ckpt"
        if not resume.exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {resume}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    tick = time.perf_counter()
    result = train_loop(manifest, cfg.train, cfg.loss, out, resume=resume)
    print(f"trained {result.steps} steps in {time.perf_counter() - tick:.1f}s; "
          f"val EPE {result.initial_val_epe:.3f} -> {result.best_val_epe:.3f} px "
          f"(best at step {result.best_step}); checkpoints in {out}")
    return 0


def cmd_correct(args) -> int:
    if args.force_n < 0:
        raise ValueError("--force-n must be non-negative")
    net, _, _ = load_checkpoint(_ckpt_path(args.ckpt))
    image = io.read_pgm(args.image)
    lam, force = io.read_palpation(args.palpation)
    fit = fit_global_stiffness(PalpationTrace(lam, force))
    tick = time.perf_counter()
    if args.force_n == 0:
        flow = np.zeros(image.shape + (2,))
        shutil.copyfile(args.image, args.out)
    else:
        flow = net.predict(image, args.force_n, fit.c2_slope)
        corrected = net.correct(image, args.force_n, fit.c2_slope)
        io.write_pgm(args.out, corrected)
    elapsed = 1000 * (time.perf_counter() - tick)
    if args.flow_out:
        io.write_flow(args.flow_out, flow)
    h, w = image.shape
    print(f"K_g {fit.c2_slope:.4f} N/mm (R^2 {fit.r_squared:.3f}); corrected {w}x{h} frame "
          f"in {elapsed:.1f} ms; max |flow| {np.abs(flow).max():.2f} px")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = DatasetManifest.load(args.data)
    if args.predictor == "model":
        if not args.ckpt:
            raise ValueError("--ckpt is required for the model predictor")
        net, _, _ = load_checkpoint(_ckpt_path(args.ckpt))
        predictor = model_predictor(net)
    else:
        predictor = PREDICTORS[args.predictor]
    report = evaluate_run(manifest, predictor, cfg.eval, out_dir=args.out,
                          split=args.split or cfg.eval.split)
    metrics = ("epe_mean", "dice_deformed", "dice_corrected", "va_deformed", "va_corrected")
    print("bin  " + "  ".join(f"{m:>15}" for m in metrics))
    for b in report.bins() + ["all"]:
        cells = []
        for m in metrics:
            if (b, m) in report.summary:
                mean, sd, _ = report.get(b, m)
                cells.append(f"{mean:8.3f}±{sd:<6.3f}")
            else:
                cells.append(f"{'-':>15}")
        print(f"{str(b):>3}  " + "  ".join(cells))
    print(f"report written to {Path(args.out) / 'report.csv'}")
    return 0


def cmd_flowviz(args) -> int:
    flow = io.read_flow(args.flow)
    io.write_ppm(args.out, flow_to_color(flow, args.max_magnitude))
    print(f"wrote {args.out}")
    return 0


def cmd_calib(args) -> int:
    lam, force = io.read_palpation(args.trace)
    fit = fit_global_stiffness(PalpationTrace(lam, force))
    print(f"c2 {fit.c2_slope!r}\nc1 {fit.c1_intercept!r}\nr_squared {fit.r_squared!r}")
    return 0


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defcor", description=(
        "Force- and stiffness-aware deformation correction for ultrasound images."))
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one configuration value (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    with_config(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", nargs="?", const="", default=None,
                   help="continue from a checkpoint (default: OUT/last.ckpt)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("correct", help="correct one deformed image")
    p.add_argument("--ckpt", required=True, help="checkpoint file or training directory")
    p.add_argument("--image", required=True, help="deformed image (PGM)")
    p.add_argument("--force-n", type=float, required=True, help="contact force in N")
    p.add_argument("--palpation", required=True, help="palpation trace CSV")
    p.add_argument("--out", required=True, help="corrected image (PGM)")
    p.add_argument("--flow-out", help="write the predicted field as DFF1")
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("eval", help="evaluate a model or baseline on a split")
    with_config(p)
    p.add_argument("--ckpt", help="checkpoint file or training directory")
    p.add_argument("--predictor", choices=["model", *PREDICTORS], default="model")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flowviz", help="colour-code a flow field")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-magnitude", type=float)
    p.set_defaults(func=cmd_flowviz)

    p = sub.add_parser("calib", help="fit the global stiffness of a palpation trace")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_calib)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a nonzero exit
        if args.verbose:
            log.exception("%s failed", args.command)
        print(f"defcor {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
