"""Command-line entry point: ``morphkit [global flags] <command> [--resume]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import commands
from .pipeline.config import ConfigError, load_config
from .pipeline.protocol import ProtocolError


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=default, help="override the config seed")
    p.add_argument("--run-dir", default=argparse.SUPPRESS if suppress else "run", help="run directory")
    p.add_argument("--workers", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="parallel workers for per-pair work")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphkit", description="Landmark-guided face morphing toolkit")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write a procedural face dataset and pair protocol",
        "prepare": "align faces and build classical averaged-landmark morphs",
        "train-landmarks": "train the landmark blending network",
        "train-blender": "train the landmark-guided image blender",
        "generate": "produce proposed and baseline morphs for every pair",
        "evaluate": "vulnerability and quality reports for generated morphs",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        _global_flags(sp, suppress=True)
        if name.startswith("train-"):
            sp.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.seed)
        ctx = commands.RunContext(cfg, args.run_dir, args.workers)
        if args.command == "synth":
            commands.cmd_synth(ctx)
        elif args.command == "prepare":
            commands.cmd_prepare(ctx)
        elif args.command == "train-landmarks":
            commands.cmd_train_landmarks(ctx, resume=args.resume)
        elif args.command == "train-blender":
            commands.cmd_train_blender(ctx, resume=args.resume)
        elif args.command == "generate":
            commands.cmd_generate(ctx)
        elif args.command == "evaluate":
            summary = commands.cmd_evaluate(ctx)
            for method, s in summary["methods"].items():
                print(f"{method}: MMPMR={s['mmpmr']:.4f} tau={s['tau']:.4f} "
                      f"PSNR={s['psnr_mean']:.3f}±{s['psnr_ci95']:.3f} SSIM={s['ssim_mean']:.4f}±{s['ssim_ci95']:.4f}")
    except (commands.PipelineError, ConfigError, ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
