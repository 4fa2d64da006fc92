"""``torq`` command line: synth, calibrate, quantize, compare, report.

Exit codes: 0 success, 2 usage or input error, 3 the inter stage hit its
rotation cap (the best-effort bundle is still written and flagged).

A ``--config`` file holds ``key = value`` lines. Dotted keys configure the
two rotation stages (``inter.epsilon``, ``inter.max_sweeps``,
``inter.angle_mode``, ``intra.max_iter``, ``intra.epsilon``,
``intra.k_top``, ``intra.pairs``, ``intra.lambda``,
``intra.angle_sample_blocks``, ``intra.pow2_mode``, ``intra.seed``).
Plain keys set the matching command-line option (``blocks``, ``seed``,
``format``...). Options given on the command line win.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext

import numpy as np

from .blocks import BlockShape, reshape_tokens
from .errors import ConvergenceError, TorqError
from .inter import EqualizationConfig
from .intra import IntraConfig
from .io import read_bundle, read_tensor, write_bundle, write_tensor
from .metrics import arm_stats, build_report, emit_report, report_to_json
from .pipeline import ARMS, ablation_bundles, calibrate, quantize_tokens
from .synth import Distribution, OutlierMode, generate

EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE = 0, 2, 3

DEFAULTS = {
    "format": "mxfp4",
    "blocks": 64,
    "lanes": 32,
    "tokens": 128,
    "seed": 42,
    "dist": "outlier_mixture",
    "outlier_prob": 0.01,
    "outlier_scale": 50.0,
    "outlier_mode": "channel",
    "scale_mode": "dynamic",
    "dtype": "float32",
}

_INTER_KEYS = {"epsilon": float, "max_sweeps": int, "angle_mode": str}
_INTRA_KEYS = {
    "max_iter": ("max_iter", int),
    "epsilon": ("epsilon", float),
    "k_top": ("k_top", int),
    "pairs": ("pairs_per_step", int),
    "lambda": ("lam", float),
    "angle_sample_blocks": ("angle_sample_blocks", int),
    "pow2_mode": ("pow2_mode", str),
    "seed": ("seed", int),
}


class UsageError(Exception):
    pass


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def stage_configs(cfg: dict):
    inter, intra = {}, {}
    for key, val in cfg.items():
        if "." not in key:
            continue
        stage, name = key.split(".", 1)
        try:
            if stage == "inter" and name in _INTER_KEYS:
                inter[name] = _INTER_KEYS[name](val)
            elif stage == "intra" and name in _INTRA_KEYS:
                field, conv = _INTRA_KEYS[name]
                intra[field] = conv(val)
            else:
                raise UsageError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {val!r}") from exc
    try:
        return EqualizationConfig(**inter), IntraConfig(**intra)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _parser():
    p = argparse.ArgumentParser(prog="torq", description="Two-level rotation for 4-bit microscaling formats.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        # None marks "not given" so config-file values can fill in
        sp.add_argument("--config")
        sp.add_argument("--format", choices=["mxfp4", "mxint4", "nvfp4"])
        sp.add_argument("--blocks", type=int, metavar="B")
        sp.add_argument("--lanes", type=int, metavar="K")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="write a synthetic tensor file")
    common(s)
    s.add_argument("--output", required=True)
    s.add_argument("--dist", choices=[d.value for d in Distribution])
    s.add_argument("--tokens", type=int, metavar="T")
    s.add_argument("--outlier-prob", type=float, dest="outlier_prob")
    s.add_argument("--outlier-scale", type=float, dest="outlier_scale")
    s.add_argument("--outlier-mode", choices=[m.value for m in OutlierMode], dest="outlier_mode")
    s.add_argument("--dtype", choices=["float32", "float64"])

    c = sub.add_parser("calibrate", help="build a rotation bundle")
    common(c)
    c.add_argument("--input", required=True)
    c.add_argument("--bundle", required=True, help="bundle file to write")
    c.add_argument("--output", help="report JSON to write")
    c.add_argument("--csv", help="occupancy histogram CSV to write")
    c.add_argument("--scale-mode", choices=["dynamic", "bundle"], dest="scale_mode")

    q = sub.add_parser("quantize", help="quantize and reconstruct a tensor with a bundle")
    common(q)
    q.add_argument("--input", required=True)
    q.add_argument("--bundle", required=True)
    q.add_argument("--output", required=True)
    q.add_argument("--scale-mode", choices=["dynamic", "bundle"], dest="scale_mode")

    m = sub.add_parser("compare", help="RTN, inter-only, intra-only and full arms")
    common(m)
    m.add_argument("--input", required=True, help="calibration tensor")
    m.add_argument("--eval", help="held-out tensor (defaults to --input)")
    m.add_argument("--output", required=True)
    m.add_argument("--scale-mode", choices=["dynamic", "bundle"], dest="scale_mode")

    r = sub.add_parser("report", help="before/after report of a bundle on a tensor")
    common(r)
    r.add_argument("--input", required=True)
    r.add_argument("--bundle", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--csv")
    r.add_argument("--scale-mode", choices=["dynamic", "bundle"], dest="scale_mode")
    return p


def _resolve(args):
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    opts = dict(DEFAULTS)
    for k, v in cfg.items():
        if "." not in k:
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            opts[key] = type(DEFAULTS[key])(v)
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    inter, intra = stage_configs(cfg)
    return opts, inter, intra


def _load(path, shape):
    if not os.path.exists(path):
        raise UsageError(f"input not found: {path}")
    x = read_tensor(path)
    if x.shape[1] != shape.d:
        raise UsageError(f"{path}: d={x.shape[1]} does not match B*K={shape.d}")
    return reshape_tokens(x, shape)


def _check_out(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise UsageError(f"output directory does not exist: {d}")


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    opts, inter_cfg, intra_cfg = _resolve(args)
    for attr in ("output", "bundle", "csv"):
        path = getattr(args, attr, None)
        if path and not (attr == "bundle" and args.command in ("quantize", "report")):
            _check_out(path)
    shape = BlockShape(opts["blocks"], opts["lanes"])
    cmd = args.command

    if cmd == "synth":
        x = generate(
            opts["dist"],
            opts["tokens"],
            shape.d,
            opts["seed"],
            outlier_prob=opts["outlier_prob"],
            outlier_scale=opts["outlier_scale"],
            outlier_mode=opts["outlier_mode"],
        )
        write_tensor(args.output, x, opts["dtype"])
        return EXIT_OK

    if cmd == "calibrate":
        data = _load(args.input, shape)
        bundle = calibrate(data, inter_cfg, intra_cfg, opts["format"], strict=False, tag=os.path.basename(args.input))
        write_bundle(args.bundle, bundle)
        if args.output:
            emit_report(build_report(data, bundle, opts["scale_mode"]), args.output, args.csv)
        if not bundle.calib_meta["converged"]:
            print(f"warning: inter rotation did not converge (spread {bundle.calib_meta['achieved_spread']:.3e})",
                  file=sys.stderr)
            return EXIT_CONVERGENCE
        return EXIT_OK

    if cmd == "quantize":
        bundle = read_bundle(args.bundle)
        data = _load(args.input, bundle.shape)
        xhat = quantize_tokens(data.flatten(), bundle, opts["scale_mode"])
        write_tensor(args.output, xhat, "float64")
        return EXIT_OK

    if cmd == "report":
        bundle = read_bundle(args.bundle)
        data = _load(args.input, bundle.shape)
        emit_report(build_report(data, bundle, opts["scale_mode"]), args.output, args.csv)
        return EXIT_OK

    if cmd == "compare":
        calib = _load(args.input, shape)
        held = _load(args.eval, shape) if args.eval else calib
        bundles = ablation_bundles(calib, inter_cfg, intra_cfg, opts["format"], strict=False)
        arms = [arm_stats(held.samples, bundles[a], a, opts["scale_mode"]) for a in ARMS]
        report = build_report(held, bundles["full"], opts["scale_mode"], arms=arms)
        emit_report(report, args.output)
        converged = all(b.calib_meta.get("converged", True) for b in bundles.values())
        return EXIT_OK if converged else EXIT_CONVERGENCE
    raise UsageError(f"unknown command {cmd}")  # pragma: no cover


def _thread_limit():
    n = os.environ.get("TORQ_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise UsageError(f"TORQ_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    try:
        with _thread_limit():
            return run(argv)
    except UsageError as exc:
        print(f"torq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:  # strict paths only
        print(f"torq: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (TorqError, ValueError, OSError) as exc:
        print(f"torq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
