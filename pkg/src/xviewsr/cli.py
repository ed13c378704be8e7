"""Command-line entry point: ``xviewsr <subcommand> ...``.

Exit codes: 0 success, 1 usage / config / state error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import training as TR
from . import verification as VF
from .config import load_config
from .exceptions import ConfigError, DimensionError, ProtocolError, StateError
from .volume import downsample_depth, generate_phantom, load_avol, save_avol

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
log = logging.getLogger("xviewsr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fingerprint(**fields):
    blob = json.dumps(fields, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dims(text):
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D,H,W integers, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated extents")
    return dims


def cmd_phantom(args):
    d, h, w = args.dims
    vol = generate_phantom(args.kind, d, h, w, seed=args.seed)
    fp = _fingerprint(cmd="phantom", kind=args.kind, dims=list(args.dims), seed=args.seed)
    save_avol(args.out, vol, config_hash=fp, phantom=args.kind, seed=args.seed)
    print(f"wrote {args.out} ({d}x{h}x{w}, {args.kind}, seed {args.seed}) config_hash={fp}")
    return EXIT_OK


def cmd_downsample(args):
    vol = load_avol(args.input)
    out = downsample_depth(vol, args.r)
    fp = _fingerprint(cmd="downsample", input=vol.metadata.get("config_hash"), r=args.r)
    save_avol(args.out, out, config_hash=fp, r=args.r)
    print(f"wrote {args.out} (depth {vol.depth} -> {out.depth}) config_hash={fp}")
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config)
    overrides = {}
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if args.log:
        overrides["log"] = args.log
    if overrides:
        config = config.replace(**overrides)
    t0 = time.perf_counter()
    state, history = TR.train(config, stage=args.stage, resume=args.resume, steps=args.steps)
    ckpt = Path(config.checkpoint)
    last = history[-1]["loss"] if history else float("nan")
    print(f"stage {args.stage}: {len(history)} steps in {time.perf_counter() - t0:.1f}s, "
          f"last loss {last:.6g}, steps done {state.steps[args.stage]}")
    print(f"checkpoint {ckpt} sha256={TR.checkpoint_hash(ckpt)} config_hash={config.fingerprint()}")
    return EXIT_OK


def cmd_infer(args):
    state = TR.load_checkpoint(args.checkpoint)
    config = state.config
    if args.r is not None and args.r != config.r:
        raise ConfigError(f"--r {args.r} does not match the checkpoint's r={config.r}")
    vol = load_avol(args.input)
    n_refs = config.n_refs if args.N is None else args.N
    if n_refs > vol.depth:
        raise ConfigError(f"--N {n_refs} exceeds the input depth {vol.depth}")
    if args.key_block:
        config = config.replace(key_block=args.key_block)
    t0 = time.perf_counter()
    res = TR.infer_volume(state.params, config, vol, n_refs, args.refs, args.seed,
                          return_relevance=args.dump_relevance is not None)
    fp = config.fingerprint()
    dz, dy, dx = vol.spacing
    out_vol = vol.with_voxels(res["fused"], spacing=(dz / config.r, dy, dx), intensity_domain="normalized")
    save_avol(args.out, out_vol, config_hash=fp, r=config.r, N=n_refs, refs=res["refs"],
              ref_mode=args.refs)
    if args.dump_relevance:
        dump_relevance(args.dump_relevance, res["relevance"], n_refs, fp)
    print(f"wrote {args.out} (depth {vol.depth} -> {res['fused'].shape[0]}, refs {res['refs']}) "
          f"in {time.perf_counter() - t0:.1f}s config_hash={fp}")
    return EXIT_OK


def dump_relevance(directory, relevance, n_refs, config_hash):
    """One AVOL per (view, level): array [N, slices, queries] + JSON metadata."""
    directory = Path(directory)
    for view, levels in relevance.items():
        for lvl, R in levels.items():
            meta = {"level": int(lvl), "N": int(n_refs), "query_shape": list(R.shape[1:]), "view": view}
            save_avol(directory / f"{view}_level{lvl}.avol", R, config_hash=config_hash, **meta)


def _parse_pred(items):
    preds = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--pred expects NAME=PATH, got {item!r}")
        preds[name] = load_avol(path).voxels
    return preds


def cmd_eval(args):
    gt = load_avol(args.gt)
    outputs = _parse_pred(args.pred)
    times = {}
    if args.baselines:
        if args.r is None:
            raise ConfigError("--baselines needs --r")
        lr = downsample_depth(gt.voxels, args.r)
        for kind in args.baselines.split(","):
            t0 = time.perf_counter()
            outputs[kind] = E.baseline_interpolate(lr, args.r, kind)
            times[kind] = time.perf_counter() - t0
    if not outputs:
        raise ConfigError("nothing to evaluate: pass --pred and/or --baselines")
    fp = _fingerprint(cmd="eval", gt=gt.metadata.get("config_hash"), methods=sorted(outputs),
                      r=args.r, foreground=args.foreground, tau=args.tau)
    reports = E.evaluate(outputs, gt, args.r or 1, args.N, args.volume_id, args.foreground, args.tau,
                         args.exclude_retained, times, fp, args.dump_dir)
    print(E.format_report(reports))
    if args.out:
        E.write_report_csv(args.out, reports)
        print(f"wrote {args.out} config_hash={fp}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = VF.run_primitive_suite(args.seed, args.eps) + VF.run_composite_suite(args.seed, args.eps)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print("gradcheck failed: " + ", ".join(f"{r.suite}/{r.name}" for r in failed), file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_bench(args):
    keys = [int(k) for k in args.keys.split(",")]
    ok = True
    print(f"{'keys':>6} {'queries':>7} {'naive_s':>9} {'tiled_s':>9} {'max_abs_diff':>13}")
    for row in VF.bench_attention(keys, args.queries, args.channels, args.key_block, args.seed):
        print(f"{row['keys']:>6} {row['queries']:>7} {row['naive_s']:9.4f} {row['tiled_s']:9.4f} "
              f"{row['max_abs_diff']:13.3e}")
        ok &= row["max_abs_diff"] < args.tol
    for row in VF.bench_conv(seed=args.seed):
        print(f"conv2d {row['size']:>3}x{row['size']:<3} direct {row['direct_s']:.4f}s "
              f"blocked {row['blocked_s']:.4f}s max_abs_diff {row['max_abs_diff']:.3e}")
        ok &= row["max_abs_diff"] < args.tol
    if not ok:
        print(f"bench: tiled/blocked results differ by more than {args.tol:g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser():
    p = _Parser(prog="xviewsr", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a synthetic volume")
    s.add_argument("--kind", choices=("spheres", "bands", "checker"), default="bands")
    s.add_argument("--dims", type=_dims, default=(21, 16, 16))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("downsample", help="simulate a sparse volume by slice selection")
    s.add_argument("--input", required=True)
    s.add_argument("--r", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_downsample)

    s = sub.add_parser("train", help="run a training stage")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", type=int, choices=(1, 2), default=1)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--steps", type=int, default=None, help="steps to run now (default: rest of budget)")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--log", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="reconstruct a dense volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--r", type=int, default=None)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--refs", choices=("uniform", "random"), default="uniform")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--key-block", type=int, default=None)
    s.add_argument("--dump-relevance", default=None, metavar="DIR")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR / SSIM report")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", action="append", metavar="NAME=PATH")
    s.add_argument("--baselines", default=None, help="comma list of nearest,linear,cubic")
    s.add_argument("--r", type=int, default=None)
    s.add_argument("--N", type=int, default=0)
    s.add_argument("--volume-id", default="vol0")
    s.add_argument("--foreground", action="store_true")
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--exclude-retained", action="store_true")
    s.add_argument("--dump-dir", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-6)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="naive vs tiled attention, direct vs blocked conv")
    s.add_argument("--keys", default="64,256,1024,2048")
    s.add_argument("--queries", type=int, default=256)
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--key-block", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-12)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        return args.func(args)
    except (ConfigError, StateError, ProtocolError, DimensionError, FileNotFoundError, ValueError) as e:
        print(f"xviewsr {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
        np.seterr(all="warn")


if __name__ == "__main__":
    sys.exit(main())
