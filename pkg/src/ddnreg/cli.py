"""``ddn`` command line: the full registration pipeline as subcommands.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, NumericError, UndefinedMetricError

log = logging.getLogger("ddnreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DX,DY,DZ, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return dims


def _threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("DDN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"DDN_THREADS must be an integer, got {env!r}") from None
    return 1


def _common(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--threads", type=int, default=default(None),
                        help="worker threads (falls back to $DDN_THREADS, then 1)")
    parser.add_argument("--deterministic", action="store_true", default=default(False),
                        help="single-threaded BLAS and ordered reductions")
    parser.add_argument("--seed", type=int, default=default(0), help="seed for random operations")
    parser.add_argument("-v", "--verbose", action="count", default=default(0))


def _write_or_print(text, path):
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# ------------------------------------------------------------------ commands

def cmd_extract(args):
    from .patches import EdgeParams, sample_patch_pairs, write_patch_dataset
    from .volume import load_volume
    src, tgt = load_volume(args.src), load_volume(args.tgt)
    ds = sample_patch_pairs(src, tgt, EdgeParams(args.t_low, args.t_high), args.count,
                            args.patch_size, args.threshold, args.seed)
    write_patch_dataset(ds, args.out)
    print(f"pairs={len(ds)} attempts={ds.attempts} exhausted={int(ds.exhausted)}")
    return EXIT_OK


def cmd_train(args):
    from .loss import LossConfig
    from .model import DdnConfig, build_ddn, count_params
    from .patches import read_patch_dataset
    from .train import TrainConfig, load_checkpoint, save_checkpoint, train
    ds = read_patch_dataset(args.data)
    loss = LossConfig(args.lambda_smooth, args.cc_window, cc_mode=args.cc_mode)
    cfg = TrainConfig(batch_size=args.batch_size, steps=args.steps, learning_rate=args.lr,
                      seed=args.seed, loss=loss, checkpoint_every=args.checkpoint_every,
                      deterministic=args.deterministic)
    if args.resume:
        model, state = load_checkpoint(args.resume)
    else:
        mcfg = DdnConfig(patch_size=ds.patch_size, units_per_block=args.units, growth=args.growth,
                         kernel=args.kernel, leaky_slope=args.slope, base_channels=args.base)
        model, state = build_ddn(mcfg, seed=args.seed), None
    log.info("model with %d parameters, %d training pairs", count_params(model), len(ds))
    t0 = time.perf_counter()
    model, history, state = train(model, ds, cfg, state, checkpoint_path=args.out, log_path=args.log)
    save_checkpoint(model, state, args.out)
    if len(history):
        last = history.records[-1]
        print(f"steps={state.step} sim={last[1]:.6f} smooth={last[2]:.6f} total={last[3]:.6f} "
              f"seconds={time.perf_counter() - t0:.1f}")
    else:
        print(f"steps={state.step}")
    return EXIT_OK


def cmd_register(args):
    from .infer import register_volume
    from .train import load_checkpoint
    from .volume import load_volume, normalize_intensity, save_field, save_volume
    model, _ = load_checkpoint(args.model)
    src = normalize_intensity(load_volume(args.src))
    tgt = normalize_intensity(load_volume(args.tgt))
    t0 = time.perf_counter()
    field, warped = register_volume(model, src, tgt, args.overlap, threads=_threads(args))
    save_field(field, args.out_field)
    save_volume(warped, args.out_warped)
    print(f"dims={src.dims} seconds={time.perf_counter() - t0:.2f}")
    return EXIT_OK


def cmd_eval(args):
    from .evalkit import global_ncc, mutual_information
    from .volume import load_volume
    a, b = load_volume(args.a), load_volume(args.b)
    print(f"cc={global_ncc(a, b):.10f} mi={mutual_information(a, b, args.bins):.10f}")
    return EXIT_OK


def _source_volume(args):
    from .evalkit import smooth_phantom
    from .volume import load_volume
    if args.vol:
        return load_volume(args.vol)
    if args.phantom:
        return smooth_phantom(args.phantom, args.blobs, seed=args.seed)
    raise UsageError("give --vol or --phantom")


def cmd_synth(args):
    from .evalkit import gaussian_deformation
    from .volume import normalize_intensity, save_field, save_volume
    from .warp import warp_volume
    vol = normalize_intensity(_source_volume(args))
    field = gaussian_deformation(vol.dims, args.grid, args.sigma, args.seed)
    save_volume(warp_volume(vol, field), args.out)
    if args.out_field:
        save_field(field, args.out_field)
    if args.out_source:
        save_volume(vol, args.out_source)
    print(f"dims={vol.dims} max_disp={float(np.abs(field.data).max()):.4f}")
    return EXIT_OK


def cmd_validate(args):
    from .evalkit import validation_run
    from .train import load_checkpoint
    from .volume import save_field, save_volume
    model, _ = load_checkpoint(args.model)
    vol = _source_volume(args)
    report, _, field, warped = validation_run(model, vol, args.grid, args.sigma, args.seed,
                                              args.overlap, args.bins, threads=_threads(args))
    if args.out_field:
        save_field(field, args.out_field)
    if args.out_warped:
        save_volume(warped, args.out_warped)
    _write_or_print(report.csv_line(), args.out)
    return EXIT_OK


def _slices(args, *paths):
    from .volume import load_volume, volume_slice
    vols = [load_volume(p) for p in paths]
    if len({v.dims for v in vols}) != 1:
        raise ValueError("volumes have different dims")
    axis_len = {"x": 0, "y": 1, "z": 2}[args.axis]
    index = args.index if args.index is not None else vols[0].dims[axis_len] // 2
    return [volume_slice(v, args.axis, index) for v in vols]


def cmd_overlay(args):
    from .evalkit import overlay_rg
    from .volume import write_ppm
    tgt, reg = _slices(args, args.tgt, args.reg)
    write_ppm(args.out, overlay_rg(tgt, reg))
    return EXIT_OK


def cmd_diff(args):
    from .evalkit import difference_image
    from .volume import write_pgm
    a, b = _slices(args, args.a, args.b)
    write_pgm(args.out, difference_image(a, b))
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_gradchecks
    t0 = time.perf_counter()
    results = run_gradchecks(args.size, args.eps, args.seed, composite=not args.no_composite)
    for r in results:
        print(f"{r.name:<24} rel_err={r.error:.3e} tol={r.tol:.0e} {'ok' if r.passed else 'FAIL'}")
    worst = max(r.error for r in results)
    print(f"max_rel_error={worst:.3e} seconds={time.perf_counter() - t0:.1f}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_info(args):
    from . import patches, train, volume
    path = Path(args.file)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == volume.VOLUME_MAGIC:
        vol = volume.load_volume(path)
        info = {"kind": "volume", "dims": vol.dims, "spacing": vol.spacing,
                "min": float(vol.data.min()), "max": float(vol.data.max()),
                "mean": float(vol.data.mean())}
    elif magic == volume.FIELD_MAGIC:
        field = volume.load_field(path)
        info = {"kind": "field", "dims": field.dims,
                "max_abs": float(np.abs(field.data).max()) if field.data.size else 0.0}
    elif magic == patches.DATASET_MAGIC:
        ds = patches.read_patch_dataset(path)
        info = {"kind": "patch_dataset", "patch_size": ds.patch_size, "count": len(ds)}
    elif magic == train.CHECKPOINT_MAGIC:
        from .model import count_params
        model, state = train.load_checkpoint(path)
        info = {"kind": "checkpoint", "config": json.loads(model.config.to_json()),
                "config_sha256": model.config.digest(), "parameters": count_params(model),
                "optimizer_step": state.step if state else None}
    else:
        raise FormatError(f"unrecognised magic {magic!r}", 0)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    parser = _Parser(prog="ddn", description="Dense deformation network registration toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = command("extract", cmd_extract, "sample informative patch pairs into a DDNP dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--t-low", type=float, default=0.02)
    p.add_argument("--t-high", type=float, default=0.5)

    p = command("train", cmd_train, "train a network on a DDNP dataset, writing a DDNC checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lambda_smooth", type=float, default=1.0)
    p.add_argument("--cc-window", type=int, default=9)
    p.add_argument("--cc-mode", choices=("local", "global"), default="local")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--units", type=int, default=4)
    p.add_argument("--growth", type=int, default=8)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--base", type=int, default=16)
    p.add_argument("--slope", type=float, default=0.2)

    p = command("register", cmd_register, "register a source volume onto a target")
    p.add_argument("--model", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--out-field", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--overlap", type=float, default=0.5)

    p = command("eval", cmd_eval, "print global CC and MI between two volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--bins", type=int, default=32)

    for name, func, text in (("synth", cmd_synth, "apply a random smooth deformation to a volume"),
                             ("validate", cmd_validate, "deform a volume, register it back, report "
                                                        "cc_before,mi_before,cc_after,mi_after")):
        p = command(name, func, text)
        if name == "validate":
            p.add_argument("--model", required=True)
        p.add_argument("--vol", help="input DDNV volume")
        p.add_argument("--phantom", type=_dims, help="generate a DX,DY,DZ blob phantom instead")
        p.add_argument("--blobs", type=int, default=20)
        p.add_argument("--grid", type=int, default=16)
        p.add_argument("--sigma", type=float, default=3.0)
        if name == "synth":
            p.add_argument("--out", required=True, help="deformed volume")
            p.add_argument("--out-field")
            p.add_argument("--out-source", help="also write the (normalised) source volume")
        else:
            p.add_argument("--overlap", type=float, default=0.5)
            p.add_argument("--bins", type=int, default=32)
            p.add_argument("--out", help="write the CSV report line here too")
            p.add_argument("--out-field")
            p.add_argument("--out-warped")

    for name, func, a, b, text in (
            ("overlay", cmd_overlay, "tgt", "reg", "red/green slice overlay (PPM)"),
            ("diff", cmd_diff, "a", "b", "difference slice image (PGM)")):
        p = command(name, func, text)
        p.add_argument(f"--{a}", required=True)
        p.add_argument(f"--{b}", required=True)
        p.add_argument("--axis", choices=("x", "y", "z"), default="z")
        p.add_argument("--index", type=int, help="slice index (default: middle)")
        p.add_argument("--out", required=True)

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--no-composite", action="store_true", help="skip the whole-network check")

    p = command("info", cmd_info, "describe a DDNV/DDNF/DDNP/DDNC file")
    p.add_argument("file")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(1) if args.deterministic else None
        try:
            return args.func(args)
        finally:
            if limit is not None:
                limit.restore_original_limits()
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ddn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"ddn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigError, UndefinedMetricError, ValueError, IndexError, OSError) as exc:
        print(f"ddn: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
