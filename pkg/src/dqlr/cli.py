"""``dqlr`` command line: synth, train, infer, eval, ablate.

Exit codes: 0 success, 1 usage/config error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from dqlr.checkpoint import load_checkpoint, save_checkpoint
from dqlr.config import TrainConfig, from_mapping, load_config, parse_text
from dqlr.errors import ConfigError, DimensionError, FormatError, NumericError
from dqlr.evaluation import evaluate, run_ablation
from dqlr.metrics import write_metrics_csv
from dqlr.trainer import COMPONENTS, Trainer, infer
from dqlr.zstack import (
    Degradation,
    load_dataset,
    load_stack,
    make_synthetic_dataset,
    save_png,
    save_stack,
    write_manifest,
)

log = logging.getLogger("dqlr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.tsv"
CHECKPOINT = "checkpoint.dqlr"
LOSS_LOG = "loss_log.csv"
METRICS = "metrics.csv"
SUMMARY = "summary.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _config(args) -> TrainConfig:
    """Config file, then ``--set`` pairs, then dedicated flags."""
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides: dict[str, object] = {}
    for item in args.set or []:
        overrides.update(parse_text(item.replace(";", "\n")))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "no_quantizer", False):
        overrides["quantizer_enabled"] = False
    return from_mapping(overrides, cfg)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_synth(args) -> int:
    if args.stacks < 3:
        raise UsageError("--stacks must be >= 3 for a train/val/test split")
    deg = Degradation(args.sigma0, args.sigma_slope, args.noise_std)
    data = make_synthetic_dataset(args.stacks, args.depth, args.size, args.seed if args.seed is not None else 0, deg)
    out = _out_dir(args.out)
    entries = []
    for split in ("train", "val", "test"):
        for stack in getattr(data, split):
            name = f"{stack.source_id}.tif"
            save_stack(stack, out / name, bit_depth=16)
            save_stack(data.clean[stack.source_id], out / f"{stack.source_id}.clean.tif", bit_depth=16)
            entries.append((stack.source_id, name, split))
    write_manifest(entries, out / MANIFEST)
    print(f"wrote {len(entries)} stacks to {out / MANIFEST}")
    return EXIT_OK


def write_loss_log(history: list[dict[str, float]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch",) + COMPONENTS)
        for row in history:
            w.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in COMPONENTS])


def cmd_train(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    out = _out_dir(args.out)
    trainer = Trainer(cfg, data)
    ckpt = trainer.fit()
    save_checkpoint(ckpt, out / CHECKPOINT)
    write_loss_log(trainer.history, out / LOSS_LOG)
    print(f"best epoch {ckpt.epoch}: total {ckpt.losses.get('total', float('nan')):.6f} -> {out / CHECKPOINT}")
    return EXIT_OK


def _strip(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    return np.concatenate([np.squeeze(left), np.squeeze(right)], axis=1)


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    stack = load_stack(args.input)
    out = _out_dir(args.out)
    for i, s in enumerate(stack.slices):
        prev = stack.slices[i - 1] if i and not args.independent else None
        images = infer(ckpt, s, args.predict, previous=prev)
        save_png(images[0], out / f"enhanced_{i}.png")
        for j, img in enumerate(images[1:], 1):
            save_png(img, out / f"predicted_{i}_{j}.png")
        if args.compare:
            save_png(_strip(s, images[0]), out / f"comparison_{i}.png")
    print(f"enhanced {len(stack)} slice(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    stacks = getattr(data, args.split)
    if not stacks:
        raise FormatError(f"manifest has no {args.split} stacks")
    rows = evaluate(ckpt, stacks, data.clean)
    out = _out_dir(args.out)
    write_metrics_csv(rows, out / METRICS)
    print(f"{len(rows)} metric rows -> {out / METRICS}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    out = _out_dir(args.out)
    result = run_ablation(cfg, data)
    write_metrics_csv(result.rows, out / METRICS)
    for name, ck in result.checkpoints.items():
        save_checkpoint(ck, out / f"{name}.dqlr")
    (out / SUMMARY).write_text(result.summary + "\n", encoding="utf-8")
    print(result.summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dqlr", description="Quantized latent propagation for z-stack enhancement.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    p = sub.add_parser("synth", help="write a synthetic phantom corpus and manifest")
    common(p, config=False)
    p.add_argument("--stacks", type=int, default=6)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sigma0", type=float, default=Degradation.sigma0)
    p.add_argument("--sigma-slope", type=float, default=Degradation.sigma_slope)
    p.add_argument("--noise-std", type=float, default=Degradation.noise_std)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoint and loss log")
    common(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--no-quantizer", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="enhance a slice or stack and optionally predict following slices")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG/TIFF slice, multi-page TIFF or directory")
    p.add_argument("--predict", type=int, default=0, help="number of following slices to predict")
    p.add_argument("--compare", action="store_true", help="also write input|enhanced strips")
    p.add_argument("--independent", action="store_true", help="do not use the slice above as context")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-slice metrics of a checkpoint on one split")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train quantized and unquantized twins and compare them")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _threads() -> int:
    raw = os.environ.get("DQLR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DQLR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("DQLR_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "infer" and args.predict < 0:
            raise UsageError("--predict must be >= 0")
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dqlr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dqlr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DimensionError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"dqlr {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
