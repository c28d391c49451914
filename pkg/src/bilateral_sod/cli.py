"""Command-line entry point: gen-data, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import re
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger("bilateral_sod")

ABLATION_MODES = ("detail-only", "semantic-only", "bilateral", "+af", "+mhbN", "+bl", "aspp")
ABLATION_COLUMNS = ("mode", "n_images", "mae", "f_max", "f_mean", "f_adaptive", "e_measure", "s_measure",
                    "final_loss")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(out_dir: Path, command: str, values: dict) -> None:
    lines = [f"# resolved configuration for '{command}'"]
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _config_flags(parser: argparse.ArgumentParser) -> None:
    from .trainer import TrainConfig

    group = parser.add_argument_group("config overrides (any key of the config file)")
    for f in dataclasses.fields(TrainConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="VALUE",
                           help=f"override {f.name} (default {f.default})")


def _resolve_config(args, extra: Optional[dict] = None):
    from .trainer import coerce_overrides, load_config

    raw = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    overrides = coerce_overrides(raw)
    overrides.update(extra or {})
    return load_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .data import generate_synthetic

    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    if args.size <= 0 or args.size % 32:
        raise UsageError(f"--size must be a positive multiple of 32, got {args.size}")
    out = _prepare_out(Path(args.out), args.force)
    generate_synthetic(out, args.n, args.size, args.seed, args.split)
    _snapshot(out, "gen-data", {"n": args.n, "size": args.size, "seed": args.seed, "split": args.split})
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .trainer import Trainer

    cfg = _resolve_config(args)
    samples = load_dataset(args.data)
    if args.resume:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _prepare_out(Path(args.out), args.force)
    _snapshot(out, "train", {**cfg.to_dict(), "data": str(args.data)})
    trainer = Trainer(cfg, samples)
    if args.resume:
        trainer.restore(args.resume)
    every = max(1, trainer.total_steps // 20)

    def report(row):
        if row["step"] % every == 0 or row["step"] == trainer.total_steps - 1:
            print(f"step {row['step']:5d}  lr {row['lr']:.5f}  X {row['X']}  total {row['total']:.4f}  "
                  f"boosted {row['boosted']:.4f}  aux {row['aux_sum']:.4f}", flush=True)

    history = trainer.run(out_dir=out, callback=report)
    if history:
        print(f"final loss {history[-1]['total']:.4f} (initial {history[0]['total']:.4f}); checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .data import collate, load_dataset, resize_array, write_saliency
    from .metrics import evaluate_arrays
    from .trainer import model_from_checkpoint, predict

    model, cfg = model_from_checkpoint(_existing(args.ckpt))
    samples = load_dataset(args.data)
    out = _prepare_out(Path(args.out), args.force)
    _snapshot(out, "eval", {"ckpt": str(args.ckpt), "data": str(args.data), "mean_f": args.mean_f,
                            "branches": args.branches, **cfg.to_dict()})
    pred_dir = out / "predictions"
    pred_dir.mkdir()
    branch_dirs = []
    if args.branches:
        for i in range(cfg.n_branches):
            d = out / "branches" / f"H{i + 1}"
            d.mkdir(parents=True)
            branch_dirs.append(d)
    pairs = []
    for start in range(0, len(samples), cfg.batch_size):
        chunk = samples[start:start + cfg.batch_size]
        maps, per_branch = predict(model, collate(chunk, cfg.detail_input_size).images, branches=True)
        for j, sample in enumerate(chunk):
            p = maps[j]
            if p.shape != sample.mask.shape:
                p = resize_array(p, sample.mask.shape)
            write_saliency(pred_dir / f"{sample.id}.pgm", p)
            pairs.append((sample.id, p, sample.mask))
            for d, bmap in zip(branch_dirs, per_branch):
                b = bmap[j] if bmap[j].shape == sample.mask.shape else resize_array(bmap[j], sample.mask.shape)
                write_saliency(d / f"{sample.id}.pgm", b)
    report = evaluate_arrays(pairs, mean_f_mode=args.mean_f)
    name = Path(args.data).name
    report.write_csv(out / "report.csv", dataset=name)
    report.write_pr_csv(out / "pr_curve.csv")
    row = report.row(name)
    print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_predict(args) -> int:
    from .data import Sample, collate, read_ppm, resize_array, write_saliency
    from .trainer import model_from_checkpoint, predict

    model, cfg = model_from_checkpoint(_existing(args.ckpt))
    image_path = _existing(args.image)
    image = read_ppm(image_path).astype(np.float32) / 255.0
    sample = Sample(image, np.zeros(image.shape[:2], dtype=np.float32), image_path.stem)
    p = predict(model, collate([sample], cfg.detail_input_size).images)[0]
    if p.shape != image.shape[:2]:
        p = resize_array(p, image.shape[:2])
    out = Path(args.out)
    if out.suffix.lower() == ".pgm":
        out.parent.mkdir(parents=True, exist_ok=True)
        target = out
    else:
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"{image_path.stem}.pgm"
    write_saliency(target, p)
    _snapshot(target.parent, "predict", {"ckpt": str(args.ckpt), "image": str(args.image), **cfg.to_dict()})
    print(f"wrote {target}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, format_report, run_all

    rows = run_all(args.seed)
    print(format_report(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(rows)} cases within {TOLERANCE:g}")
    return 0


def ablation_overrides(mode: str) -> dict:
    """Config overrides for one ablation mode; modes are cumulative in the usual order."""
    base = {"backbone": "bilateral", "fusion": "af", "n_branches": 1, "boosting": False, "synchronized": False}
    if mode == "detail-only":
        return {**base, "backbone": "detail"}
    if mode == "semantic-only":
        return {**base, "backbone": "semantic"}
    if mode == "bilateral":
        return {**base, "fusion": "add"}
    if mode == "+af":
        return base
    match = re.fullmatch(r"\+mhb(\d+)", mode)
    if match:
        n = int(match.group(1))
        if n < 1:
            raise UsageError(f"branch count must be positive in {mode!r}")
        return {**base, "n_branches": n}
    if mode == "+bl":
        return {**base, "n_branches": 4, "boosting": True}
    if mode == "aspp":
        return {**base, "n_branches": 4, "synchronized": True}
    raise UsageError(f"unknown ablation mode {mode!r}; choose from {', '.join(ABLATION_MODES)}")


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .trainer import Trainer

    modes = [m for arg in args.mode for m in arg.split(",") if m]
    plans = [(mode, ablation_overrides(mode)) for mode in modes]
    train = load_dataset(args.data)
    held_out = load_dataset(args.eval_data) if args.eval_data else train
    out = _prepare_out(Path(args.out), args.force)
    base_cfg = _resolve_config(args)
    _snapshot(out, "ablate", {**base_cfg.to_dict(), "modes": modes, "data": str(args.data),
                              "eval_data": str(args.eval_data or args.data)})
    rows = []
    for mode, overrides in plans:
        cfg = dataclasses.replace(base_cfg, **overrides)
        trainer = Trainer(cfg, train)
        history = trainer.run()
        report = trainer.evaluate(held_out)
        row = {"mode": mode, **{k: v for k, v in report.row().items() if k != "dataset"},
               "final_loss": history[-1]["total"]}
        rows.append(row)
        print(f"{mode:<14} meanF {report.f_mean:.4f}  maxF {report.f_max:.4f}  MAE {report.mae:.4f}", flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: f"{v:.10g}" if isinstance(v, float) else v for k, v in row.items()})
    return 0


def _existing(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return path


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilateral-sod", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="side length, a multiple of 32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes checkpoints and train_log.csv")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="corpus root")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes report.csv and pr_curve.csv")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branches", action="store_true", help="also write per-branch maps H1..HN")
    p.add_argument("--mean-f", choices=("thresholds", "adaptive"), default="thresholds",
                   help="mean-F convention reported in the f_mean column")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write the saliency map of one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output .pgm file or directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and module")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--mode", action="append", required=True,
                   help=f"one of {', '.join(ABLATION_MODES)} (N a branch count); repeat or comma-separate")
    p.add_argument("--config", help="key = value config file shared by all modes")
    p.add_argument("--data", required=True, help="training corpus")
    p.add_argument("--eval-data", help="held-out corpus (default: the training corpus)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .trainer import CheckpointError, ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, CheckpointError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
