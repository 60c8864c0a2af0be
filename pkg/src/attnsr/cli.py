"""Command-line entry point: ``attnsr <command> [options]``.

Exit codes: 0 success, 1 user error (bad arguments, missing files, invalid
config), 2 internal error (including corrupt checkpoints). Every failure
prints a one-line cause to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointIntegrityError, CheckpointKindError, read_payload
from .config import ConfigError
from .degradation import DegradationConfig, synthesize_lr
from .imaging import ImageFormatError, Rng, ShapeError, list_images, load_image, save_image
from .inference import upscale
from .niqe import DEFAULT_RIDGE, NiqeModel, default_model_path, fit_pristine_model, niqe_score
from .training import TrainConfig, export_generator, load_discriminator, load_generator, train

USER_ERRORS = (ConfigError, FileNotFoundError, NotADirectoryError, ImageFormatError, ShapeError,
               CheckpointKindError, ValueError)


class UserError(Exception):
    """Problem the operator can fix; exits with code 1."""


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _inputs(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return list_images(p)
    if p.is_file():
        return [p]
    raise FileNotFoundError(f"input not found: {path}")


def _iteration_of(checkpoint: str) -> int:
    return int(read_payload(checkpoint).get("iteration", 0))


# commands

def cmd_synthesize(args) -> int:
    paths = list_images(args.input_dir) if Path(args.input_dir).is_dir() else []
    if not paths:
        raise UserError(f"no images found in {args.input_dir}")
    config = DegradationConfig.load(args.config) if args.config else DegradationConfig()
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, skipped = 0, 0
    with (out / "manifest.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hr", "lr", "seed"])
        for index, path in enumerate(paths):
            hr = load_image(path)
            h, w = hr.shape[-2:]
            if h % 4 or w % 4:
                _warn(f"skipping {path.name}: {h}x{w} is not divisible by 4")
                skipped += 1
                continue
            seed = _sample_seed(args.seed, index)
            lr_path = out / f"{path.stem}_lr.png"
            save_image(synthesize_lr(hr, config, Rng(seed)), lr_path)
            writer.writerow([str(path), str(lr_path), seed])
            written += 1
    print(f"synthesized {written} LR images into {out} ({skipped} skipped)")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["total_iterations"] = args.iterations
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if overrides:
        config = dataclasses.replace(config, **overrides)
    if args.resume and not Path(args.resume).is_file():
        raise UserError(f"checkpoint not found: {args.resume}")

    def progress(record, _state):
        if args.verbose:
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in record.items() if v is not None))

    state = train(config, resume=args.resume, progress=progress)
    print(f"trained to iteration {state.iteration}; outputs in {config.output_dir}")
    return 0


def cmd_upscale(args) -> int:
    gen = load_generator(args.checkpoint)
    inputs = _inputs(args.input)
    if not inputs:
        raise UserError(f"no images found in {args.input}")
    single_file = Path(args.input).is_file()
    out = Path(args.output)
    if not single_file:
        out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        sr = upscale(gen, load_image(path), tile=args.tile, overlap=args.overlap)
        target = out if single_file else out / f"{path.stem}_x4.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(sr, target)
    print(f"upscaled {len(inputs)} image(s) into {out}")
    return 0


def cmd_evaluate(args) -> int:
    model = NiqeModel.load(args.model_file) if args.model_file else NiqeModel.load(default_model_path())
    rows = []
    for spec in args.dirs:
        method, _, directory = spec.rpartition("=")
        method = method or Path(directory).name
        paths = list_images(directory) if Path(directory).is_dir() else []
        if not paths:
            raise UserError(f"no images found in {directory}")
        scores = []
        for path in paths:
            try:
                scores.append(niqe_score(load_image(path), model))
            except (ImageFormatError, ValueError) as exc:
                _warn(f"skipping {path.name}: {exc}")
        if not scores:
            raise UserError(f"no scorable images in {directory}")
        rows.append((method, len(scores), float(np.mean(scores))))
    print(f"NIQE on {args.dataset} (lower is better)")
    print(f"{'method':<24}{'images':>8}{'niqe':>10}")
    for method, count, mean in rows:
        print(f"{method:<24}{count:>8}{mean:>10.4f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "method", "num_images", "niqe"])
            for method, count, mean in rows:
                writer.writerow([args.dataset, method, count, repr(mean)])
    return 0


def _minmax(a: torch.Tensor) -> torch.Tensor:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else torch.zeros_like(a)


def cmd_visualize(args) -> int:
    disc = load_discriminator(args.checkpoint)
    if args.discriminator > disc.num_scales:
        raise UserError("checkpoint was trained in single mode; it has no second discriminator")
    iteration = _iteration_of(args.checkpoint)
    inputs = _inputs(args.input)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    div = 2 ** (disc.config.num_levels + disc.num_scales - 1)
    count = 0
    for path in inputs:
        img = load_image(path)
        h, w = img.shape[-2:]
        h, w = h // div * div, w // div * div
        if h == 0 or w == 0:
            raise UserError(f"{path.name} is smaller than {div}x{div}")
        img = img[:, :, :h, :w]
        with torch.no_grad():
            outputs = disc(img)
        if args.what == "attention":
            maps = outputs[args.discriminator - 1].attention_maps
            for i, alpha in enumerate(maps, 1):
                alpha = F.interpolate(alpha, size=(h, w), mode="bilinear", align_corners=False)
                stem = out / f"{path.stem}_att_layer{i}_iter{iteration}"
                if args.raw:
                    np.save(stem.with_suffix(".npy"), alpha[0, 0].numpy().astype(np.float32))
                else:
                    save_image(_minmax(alpha), stem.with_suffix(".png"))
                count += 1
        else:
            for k, o in enumerate(outputs, 1):
                prob = torch.sigmoid(o.logits)
                prob = F.interpolate(prob, size=(h, w), mode="bilinear", align_corners=False)
                stem = out / f"{path.stem}_dmap_d{k}_iter{iteration}"
                if args.raw:
                    np.save(stem.with_suffix(".npy"), prob[0, 0].numpy().astype(np.float32))
                else:
                    save_image(prob, stem.with_suffix(".png"))
                count += 1
    print(f"wrote {count} {args.what} map(s) into {out}")
    return 0


def cmd_fit_pristine(args) -> int:
    model = fit_pristine_model(args.corpus, args.patch_size, args.sharpness_fraction, args.ridge)
    model.save(args.output)
    print(f"fitted pristine model on {args.corpus} -> {args.output}")
    return 0


def cmd_export(args) -> int:
    export_generator(args.checkpoint, args.output)
    print(f"exported generator to {args.output}")
    return 0


# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config's seed)")
    common.add_argument("--config", default=None, help="config file for the command")
    common.add_argument("--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="attnsr", description="Blind x4 super-resolution toolkit.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synthesize", parents=[common], formatter_class=fmt,
                       help="make degraded LR copies of HR images")
    p.add_argument("--input-dir", required=True, help="directory of HR images")
    p.add_argument("--output-dir", required=True, help="where LR images and manifest.csv go")
    p.set_defaults(func=cmd_synthesize, seed_default=0)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train the generator and discriminators")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--iterations", type=int, default=None, help="override total_iterations")
    p.add_argument("--output-dir", default=None, help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upscale", parents=[common], formatter_class=fmt, help="x4 upscale images")
    p.add_argument("--checkpoint", required=True, help="training checkpoint or generator export")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output file (for a file input) or directory")
    p.add_argument("--tile", type=int, default=256, help="LR tile size")
    p.add_argument("--overlap", type=int, default=16, help="LR overlap between tiles")
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt, help="mean NIQE per directory")
    p.add_argument("--dirs", nargs="+", required=True, help="directories, optionally as method=path")
    p.add_argument("--model-file", default=None, help="NIQE pristine model file; the bundled model when omitted")
    p.add_argument("--dataset", default="custom", help="dataset label for the table")
    p.add_argument("--csv", default=None, help="write results to this CSV file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", parents=[common], formatter_class=fmt,
                       help="dump attention maps or discriminator maps")
    p.add_argument("--checkpoint", required=True, help="training checkpoint (needs discriminators)")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--what", choices=("attention", "dmap"), default="attention", help="maps to write")
    p.add_argument("--output-dir", required=True, help="output directory")
    p.add_argument("--discriminator", type=int, choices=(1, 2), default=1,
                   help="which discriminator's attention maps to dump")
    p.add_argument("--raw", action="store_true", help="write float32 .npy arrays instead of PNGs")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("fit-pristine", parents=[common], formatter_class=fmt, help="fit a NIQE pristine model")
    p.add_argument("--corpus", required=True, help="directory of pristine images")
    p.add_argument("--output", required=True, help="model file to write")
    p.add_argument("--patch-size", type=int, default=96, help="NIQE patch size")
    p.add_argument("--sharpness-fraction", type=float, default=0.75, help="patch selection threshold")
    p.add_argument("--ridge", type=float, default=DEFAULT_RIDGE, help="covariance ridge")
    p.set_defaults(func=cmd_fit_pristine)

    p = sub.add_parser("export", parents=[common], formatter_class=fmt,
                       help="write a generator-only checkpoint")
    p.add_argument("--checkpoint", required=True, help="training checkpoint")
    p.add_argument("--output", required=True, help="export file")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.seed is None and getattr(args, "seed_default", None) is not None:
        args.seed = args.seed_default
    if args.seed is not None and args.command != "train":
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except CheckpointIntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
