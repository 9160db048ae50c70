"""Command-line surface: train / infer / eval / params / gradcheck / frames.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, apply_overrides, parse_config
from .data import DataError
from .training import CheckpointError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_CONFIG_KEYS = [f.name for f in fields(RunConfig)]


def _add_config_options(p: _Parser) -> None:
    p.add_argument("--config", metavar="FILE", default=None,
                   help="run configuration file (key = value lines)")
    for key in _CONFIG_KEYS:
        p.add_argument(f"--{key}", dest=f"cfgkey_{key}", metavar="V", default=None,
                       help=argparse.SUPPRESS)


def _load_config(args) -> RunConfig:
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text())
    else:
        cfg = RunConfig().validate()
    overrides = {k: getattr(args, f"cfgkey_{k}")
                 for k in _CONFIG_KEYS if getattr(args, f"cfgkey_{k}") is not None}
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    env_threads = os.environ.get("NCADIFF_THREADS")
    if env_threads:
        cfg.threads = int(env_threads)
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="ncadiff",
                     description="Diffusion segmentation with NCA noise predictors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per the configuration")
    _add_config_options(p)

    p = sub.add_parser("infer", help="ensemble inference on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="defaults to the config out_dir")
    _add_config_options(p)

    p = sub.add_parser("params", help="print parameter counts and the breakdown")
    _add_config_options(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the configured variant")
    _add_config_options(p)

    p = sub.add_parser("frames", help="export per-step x0 estimates of one reverse chain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default="frames")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    from . import runner, verify

    try:
        args = build_parser().parse_args(argv)
        if args.command == "train":
            cfg = _load_config(args)
            runner.run_training(cfg, cfg.out_dir)
            return 0
        if args.command == "infer":
            runner.run_infer(args.checkpoint, args.image, args.out,
                             args.runs, args.seed)
            return 0
        if args.command == "eval":
            cfg = _load_config(args)
            out = args.out if args.out is not None else cfg.out_dir
            runner.run_eval(cfg, args.checkpoint, out)
            return 0
        if args.command == "params":
            cfg = _load_config(args)
            print(runner.format_params_report(cfg))
            return 0
        if args.command == "gradcheck":
            cfg = _load_config(args)
            result = verify.gradcheck_model(cfg.variant, seed=cfg.seed)
            for name, err in sorted(result["per_tensor"].items()):
                print(f"{name}: max relative error {err:.3e}")
            print(f"{result['variant']}: max {result['max_rel_err']:.3e} "
                  f"({'PASS' if result['passed'] else 'FAIL'})")
            return 0 if result["passed"] else 3
        if args.command == "frames":
            runner.run_frames(args.checkpoint, args.image, args.out, args.seed)
            return 0
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
