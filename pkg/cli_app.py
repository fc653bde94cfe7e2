"""
Command-line entry point.

    python cli_app.py [--seed N] [--log-level LEVEL] <command> [options]

Commands: ``train``, ``inpaint``, ``maskgen``, ``eval``, ``pca``. Any failure
prints exactly one line to stderr of the form

    error kind=<ErrorClass> message=<json string>

and exits with status 1 (2 for unparsable arguments).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from checkpoint import load_checkpoint, store_pca
from config import StrokeParams, load_run_config
from dataset import dataset_from_config, load_dir
from embedder import fit_pca
from errors import ParameterError, UsageError
from evaluator import evaluate_manifest
from image_io import load_image_tensor, load_mask, save_image, save_mask
from mask_engine import generate_freeform
from sampler import GuidanceParams, InpaintEngine, inpaint
from trainer import run_training
from utils import derive_rng

logger = logging.getLogger(__name__)

MASK_SUFFIXES = (".pgm", ".png")
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliParser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as ``UsageError`` instead of exiting."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(
            config,
            train=dataclasses.replace(config.train, seed=args.seed),
            data=dataclasses.replace(config.data, seed=args.seed))
    if args.output_dir:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    if args.resume:
        config = dataclasses.replace(config, resume_from=args.resume)
    dataset = dataset_from_config(config.data, config.model.resolution)
    handle = run_training(dataset, config)
    print(f"checkpoint={handle.path} step={handle.step}")
    return 0


def cmd_inpaint(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    engine = InpaintEngine.from_checkpoint(ckpt)
    resolution = ckpt.run_config.model.resolution
    I_bg = load_image_tensor(args.bg, resolution)
    M_bg = load_mask(args.mask, resolution)
    I_bg = I_bg * M_bg
    I_r = load_image_tensor(args.ref, resolution) if args.ref else None
    M_o = load_mask(args.refmask, resolution) if args.refmask else None
    g = GuidanceParams(omega=args.omega, gamma=args.gamma, eta=args.eta, rho=args.rho,
                       num_steps=args.steps)
    seed = args.seed if args.seed is not None else 0
    out = inpaint(engine, I_bg, M_bg, I_r, M_o, g, seed=seed)
    path = save_image(out, args.out)
    print(f"output={path}")
    return 0


def cmd_maskgen(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    ext = args.ext if args.ext.startswith(".") else f".{args.ext}"
    if ext.lower() not in MASK_SUFFIXES:
        raise ParameterError(f"mask extension must be one of {MASK_SUFFIXES}, got {ext}")
    params = StrokeParams(min_coverage=args.min_coverage, max_coverage=args.max_coverage)
    seed = args.seed if args.seed is not None else 0
    for i in range(args.n):
        mask = generate_freeform(derive_rng(seed, i), args.height, args.width, params)
        save_mask(mask, out_dir / f"mask_{i:04d}{ext}")
    print(f"masks={args.n} dir={out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_manifest(args.manifest, ckpt, out_csv=args.out)
    print(f"rows={len(report.rows)} dist_original={report.dist_original:.6f} "
          f"dist_cp_object={report.dist_cp_object:.6f}")
    return 0


def cmd_pca(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.run_config
    resolution = config.model.resolution
    if args.data_dir:
        dataset = load_dir(args.data_dir, resolution)
    else:
        data = config.data if args.seed is None else dataclasses.replace(config.data, seed=args.seed)
        dataset = dataset_from_config(data, resolution)
    model = ckpt.build_model()
    with torch.no_grad():
        _, emb = model.embedder.encode(dataset.images)
    basis = fit_pca(list(emb.to(torch.float64).numpy()), k=args.k, variance_target=args.variance)
    path = store_pca(args.checkpoint, basis, target=args.out)
    print(f"checkpoint={path} k={basis.k} explained={float(basis.explained.sum()):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="refpaint", description="Reference-based painterly inpainting")
    parser.add_argument("--seed", type=int, default=None, help="global seed for every random draw")
    parser.add_argument("--log-level", default="INFO",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="fill a hole guided by a reference object")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bg", required=True)
    p.add_argument("--mask", required=True, help="background mask, white = keep")
    p.add_argument("--ref", default=None, help="reference image; omit for unconditional inpainting")
    p.add_argument("--refmask", default=None, help="object mask of the reference, white = object")
    p.add_argument("--omega", type=float, default=7.5)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--steps", type=int, default=None, help="number of reverse steps (default: all)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("maskgen", help="write free-form masks")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--min-coverage", type=float, default=StrokeParams.min_coverage)
    p.add_argument("--max-coverage", type=float, default=StrokeParams.max_coverage)
    p.add_argument("--ext", default=".pgm")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_maskgen)

    p = sub.add_parser("eval", help="embedding distances over a CSV manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pca", help="fit and store the semantic/style PCA basis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=None, help="image directory (default: the run's data section)")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--variance", type=float, default=0.9)
    p.add_argument("--out", default=None, help="write to a new checkpoint instead of in place")
    p.set_defaults(func=cmd_pca)
    return parser


def _error_line(err: BaseException) -> str:
    kind = getattr(err, "kind", None) or type(err).__name__
    return f"error kind={kind} message={json.dumps(str(err))}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(_error_line(e), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(_error_line(e), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
