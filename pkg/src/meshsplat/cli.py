"""Command-line front end.

Subcommands: gen-data, train, render, evaluate. Exit codes: 0 success,
2 usage/data error, 3 numeric failure. A TOML config file mirrors
TrainConfig one-to-one; explicit flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .graphnets import NumericsError
from .pipeline import TrainConfig

ABLATION_TOKENS = {"warmup": "no_warmup", "neural": "no_neural",
                   "ggo": "no_ggo", "enhancer": "no_enhancer"}


class CliError(Exception):
    """Usage or data error (exit code 2)."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshsplat",
                                     description="mesh-driven Gaussian-splat avatars")
    parser.add_argument("--workdir", default=".", help="base for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic sequence")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--frames", type=int, default=32)
    gen.add_argument("--res", type=int, default=128)
    gen.add_argument("--out", required=True)
    gen.add_argument("--corrupt", action="store_true",
                     help="also perturb the tracked parameters")
    gen.add_argument("--sigma-e", type=float, default=0.05)
    gen.add_argument("--rot-jitter-deg", type=float, default=1.0)

    tr = sub.add_parser("train", help="run the two-stage training")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", help="TOML file mirroring the training config")
    tr.add_argument("--ablate", default="",
                    help="comma-separated tokens: warmup,neural,ggo,enhancer")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--warmup-iterations", type=int)
    tr.add_argument("--pseudo-iterations", type=int)
    tr.add_argument("--print-config", action="store_true",
                    help="print the effective config and exit")

    rd = sub.add_parser("render", help="render one frame from a checkpoint")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--frame", type=int, required=True)
    rd.add_argument("--data", help="defaults to the dataset recorded in the checkpoint")
    rd.add_argument("--out", required=True)
    rd.add_argument("--raw", action="store_true", help="also dump raw float maps")

    ev = sub.add_parser("evaluate", help="metrics, timing and sizes on held-out frames")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--frames", choices=("test", "train", "all"), default="test")
    return parser


def _resolve(workdir: str, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(workdir) / p


def _load_config(args) -> TrainConfig:
    values = {}
    if args.config:
        cfg_path = _resolve(args.workdir, args.config)
        if not cfg_path.exists():
            raise CliError(f"config file not found: {cfg_path}")
        with open(cfg_path, "rb") as fh:
            values = tomllib.load(fh)
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
    values["data_dir"] = str(_resolve(args.workdir, args.data))
    values["out_dir"] = str(_resolve(args.workdir, args.out))
    for flag in ("seed", "iterations", "warmup_iterations", "pseudo_iterations"):
        v = getattr(args, flag)
        if v is not None:
            values[flag] = v
    for token in filter(None, args.ablate.split(",")):
        if token not in ABLATION_TOKENS:
            raise CliError(f"unknown ablation token {token!r}; "
                           f"choose from {sorted(ABLATION_TOKENS)}")
        values[ABLATION_TOKENS[token]] = True
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from exc


def cmd_gen_data(args) -> int:
    from .synthetic import corrupt_tracking, generate_sequence
    if args.res % 4 != 0:
        raise CliError(f"resolution {args.res} is not divisible by 4")
    if args.frames < 1:
        raise CliError("need at least one frame")
    out = _resolve(args.workdir, args.out)
    seq = generate_sequence(out, seed=args.seed, frames=args.frames,
                            resolution=args.res)
    if args.corrupt:
        corrupt_tracking(seq, sigma_e=args.sigma_e,
                         rot_jitter_deg=args.rot_jitter_deg, seed=args.seed)
        _rewrite_tracking(seq)
    print(f"wrote {args.frames} frames to {out}")
    return 0


def _rewrite_tracking(seq) -> None:
    import csv
    with open(seq.root / "tracking.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        ne = seq.expr_dim
        writer.writerow(["t"] + [f"e{i}" for i in range(ne)]
                        + ["qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        for rec in seq.frames:
            row = [rec.t, *rec.expr, *rec.quat, *rec.trans]
            writer.writerow([f"{x:.17g}" for x in row])


def cmd_train(args) -> int:
    from . import pipeline
    cfg = _load_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    if not Path(cfg.data_dir).exists():
        raise CliError(f"dataset not found: {cfg.data_dir}")
    result = pipeline.train(cfg)
    print(f"checkpoint: {result['checkpoint']} ({result['ckpt_bytes']} bytes); "
          f"loss log: {result['loss_log']}")
    return 0


def cmd_render(args) -> int:
    from . import checkpoint as ckpt_io
    from . import tensor as T
    from .images import save_png, save_raw
    from .pipeline import _load_frames, forward_frame, model_from_checkpoint
    from .synthetic import load_sequence
    ckpt_path = _resolve(args.workdir, args.ckpt)
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    model, cfg = model_from_checkpoint(ckpt_io.load(ckpt_path))
    data_dir = _resolve(args.workdir, args.data) if args.data else Path(cfg.data_dir)
    if not data_dir.exists():
        raise CliError(f"dataset not found: {data_dir}")
    seq = load_sequence(data_dir)
    matching = [rec for rec in seq.frames if rec.index == args.frame]
    if not matching:
        raise CliError(f"frame {args.frame} not in dataset (0..{len(seq.frames) - 1})")
    frame = _load_frames(seq, matching)[0]
    out_dir = _resolve(args.workdir, args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        final, coarse, rout, _ = forward_frame(model, frame, use_ggo=cfg.ggo_at_eval)
    stem = f"frame_{args.frame:04d}"
    save_png(final.data, out_dir / f"{stem}_final.png")
    save_png(coarse.data, out_dir / f"{stem}_coarse.png")
    dmin, dmax = frame.camera.near, frame.camera.far
    save_png(np.clip((rout.depth.data - dmin) / (dmax - dmin), 0, 1),
             out_dir / f"{stem}_depth.png")
    save_png(rout.weight.data, out_dir / f"{stem}_weight.png")
    if args.raw:
        save_raw(final.data, out_dir / f"{stem}_final.raw")
        save_raw(coarse.data, out_dir / f"{stem}_coarse.raw")
        save_raw(rout.depth.data, out_dir / f"{stem}_depth.raw")
        save_raw(rout.weight.data, out_dir / f"{stem}_weight.raw")
    print(f"wrote {stem}_[final|coarse|depth|weight].png to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from . import pipeline
    ckpt_path = _resolve(args.workdir, args.ckpt)
    data_dir = _resolve(args.workdir, args.data)
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    if not data_dir.exists():
        raise CliError(f"dataset not found: {data_dir}")
    summary = pipeline.evaluate(ckpt_path, data_dir,
                                _resolve(args.workdir, args.out),
                                frames=args.frames, log=None)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = {"gen-data": cmd_gen_data, "train": cmd_train,
               "render": cmd_render, "evaluate": cmd_evaluate}[args.command]
    try:
        return handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
