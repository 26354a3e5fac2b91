"""Command-line interface: moment sweeps, demos, pattern dumps, toy training.

Exit codes: 0 success, 1 usage/validation error, 2 runtime or I/O error,
3 consistency summary failed its tolerances.  Every subcommand is
deterministic given --seed (default: env STOCHPOOL_SEED, else 0), and
--jobs only parallelizes independent trials without changing any value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import StochPoolError
from .masks import CHANNEL_MODES, PATTERN_KINDS, PatternSpec, broadcast_mask, make_pattern_mask, write_pgm
from .momentlab import (
    DEFAULT_PROBS,
    DEFAULT_SIDES,
    SweepConfig,
    consistency_summary,
    run_inconsistency_demos,
    run_keepprob_sweep,
    run_spatial_sweep,
)
from .rng import RngStream
from .toynet import TrainConfig, train_toy, write_trace_csv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_TOLERANCE = 3

SEED_ENV_VAR = "STOCHPOOL_SEED"


class _Parser(argparse.ArgumentParser):
    """argparse parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="stochpool", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, trials=True, jobs=True):
        p.add_argument("--seed", type=int, default=_default_seed(),
                       help="random seed (env STOCHPOOL_SEED overrides the default)")
        if trials:
            p.add_argument("--trials", type=int, default=8, help="independent trials")
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="worker processes for trials; does not change results")

    p = sub.add_parser("moments", formatter_class=fmt,
                       help="second-moment sweep over spatial sizes (global pooling)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--batch", type=int, default=64, help="mini-batch size N")
    p.add_argument("--channels", type=int, default=256, help="channel count C")
    p.add_argument("--sides", type=int, nargs="+", default=list(DEFAULT_SIDES),
                   help="spatial side lengths (H = W)")
    p.add_argument("--p", type=float, default=0.5, help="keep probability")
    p.add_argument("--no-scaling", action="store_true",
                   help="emit only the unscaled train series instead of both")
    p.add_argument("--tol-scaled", type=float, default=0.05,
                   help="relative tolerance on scaled train/test ratios")
    p.add_argument("--tol-unscaled", type=float, default=None,
                   help="override the p-dependent tolerance on unscaled ratios")
    p.add_argument("--tol-law", type=float, default=0.05,
                   help="relative tolerance on (test moment * hw) vs 1")
    add_common(p)

    p = sub.add_parser("keep-prob", formatter_class=fmt,
                       help="second-moment sweep over keep probabilities at one size")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--batch", type=int, default=64, help="mini-batch size N")
    p.add_argument("--channels", type=int, default=256, help="channel count C")
    p.add_argument("--side", type=int, default=256, help="spatial side length (H = W)")
    p.add_argument("--probs", type=float, nargs="+", default=list(DEFAULT_PROBS),
                   help="keep probabilities")
    p.add_argument("--no-scaling", action="store_true",
                   help="emit only the unscaled train series instead of both")
    p.add_argument("--tol-scaled", type=float, default=0.05,
                   help="relative tolerance on scaled train/test ratios")
    p.add_argument("--tol-unscaled", type=float, default=None,
                   help="override the p-dependent tolerance on unscaled ratios")
    p.add_argument("--tol-law", type=float, default=0.05,
                   help="relative tolerance on (test moment * hw) vs 1")
    add_common(p)

    p = sub.add_parser("demos", formatter_class=fmt,
                       help="train/test second-moment tables for dropout, subsampling, "
                            "and probability-map pooling")
    p.add_argument("--out", default=None, help="optional output CSV path")
    add_common(p)

    p = sub.add_parser("patterns", formatter_class=fmt,
                       help="dump structured keep-mask realizations as PGM files")
    p.add_argument("--kind", choices=PATTERN_KINDS, default="unrestricted")
    p.add_argument("--l", type=int, default=8, help="mask side length")
    p.add_argument("--s", type=int, default=1, help="pattern factor")
    p.add_argument("--p", type=float, default=0.5, help="keep probability")
    p.add_argument("--count", type=int, default=4, help="number of masks to draw")
    p.add_argument("--channel-mode", choices=CHANNEL_MODES, default="shared")
    p.add_argument("--channels", type=int, default=1,
                   help="channels per mask (independent mode draws one grid each)")
    p.add_argument("--out-dir", default="masks", help="output directory for PGM files")
    add_common(p, trials=False, jobs=False)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train the toy network on the synthetic task")
    p.add_argument("--head", choices=("gap", "sap", "dropout"), default="gap")
    p.add_argument("--p", type=float, default=0.5, help="keep probability for sap/dropout heads")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", default=None, help="optional trace CSV path")
    add_common(p, trials=False, jobs=False)
    return parser


def _print_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    print(f"config[{args.command}]: {json.dumps(resolved)}")


def _summarize(report, args) -> int:
    ok, lines = consistency_summary(
        report, tol_scaled=args.tol_scaled, tol_gap_law=args.tol_law,
        tol_unscaled=args.tol_unscaled,
    )
    for line in lines:
        print(line)
    scaled = [
        abs(r.second_moment / report.get("sap", "test", r.hw, r.p, "-").second_moment - 1.0)
        for r in report.rows
        if r.phase == "train" and r.scaling == "on"
    ]
    if scaled:
        print(f"summary: max scaled-ratio deviation {max(scaled):.2%} "
              f"(tolerance {args.tol_scaled:.0%})")
    print(f"consistency: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


def _cmd_moments(args) -> int:
    cfg = SweepConfig(
        n_batch=args.batch, n_channels=args.channels,
        spatial_sides=tuple(args.sides), keep_probs=(args.p,),
        n_trials=args.trials, seed=args.seed,
        scaling="without" if args.no_scaling else "both",
    )
    report = run_spatial_sweep(cfg, jobs=args.jobs)
    report.write_csv(args.out)
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return _summarize(report, args)


def _cmd_keepprob(args) -> int:
    cfg = SweepConfig(
        n_batch=args.batch, n_channels=args.channels,
        spatial_sides=(args.side,), keep_probs=tuple(args.probs),
        n_trials=args.trials, seed=args.seed,
        scaling="without" if args.no_scaling else "both",
    )
    report = run_keepprob_sweep(cfg, jobs=args.jobs)
    report.write_csv(args.out)
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return _summarize(report, args)


def _cmd_demos(args) -> int:
    cfg = SweepConfig(n_trials=args.trials, seed=args.seed)
    report = run_inconsistency_demos(cfg, jobs=args.jobs)
    if args.out:
        report.write_csv(args.out)
        print(f"wrote {len(report.rows)} rows to {args.out}")
    ops = sorted({(r.operator, r.hw, r.p) for r in report.rows})
    for op, hw, p in ops:
        train = report.get(op, "train", hw, p, "-")
        test = report.get(op, "test", hw, p, "-")
        ratio = train.second_moment / test.second_moment
        print(f"{op} (hw={hw}, p={p}): train/test second-moment ratio = {ratio:.4f}")
    return EXIT_OK


def _cmd_patterns(args) -> int:
    spec = PatternSpec(kind=args.kind, s=args.s, channel_mode=args.channel_mode)
    spec.validate(args.l, args.p)  # fail before touching the filesystem
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = RngStream(args.seed)
    for i in range(args.count):
        mask = make_pattern_mask(spec, args.l, args.p, root.substream(i))
        if args.channels > 1 or args.channel_mode == "independent":
            grids = broadcast_mask(mask, args.channels, root.substream(args.count + i))
            for c in range(args.channels):
                path = out_dir / f"mask_{i:04d}_c{c}.pgm"
                write_pgm(grids[c], path)
                frac = float(np.asarray(grids[c]).mean())
                print(f"{path}: kept fraction {frac:.6f}")
        else:
            path = out_dir / f"mask_{i:04d}.pgm"
            write_pgm(mask.grid, path)
            print(f"{path}: kept fraction {mask.kept_fraction:.6f}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = TrainConfig(
        head=args.head, p=args.p, steps=args.steps, lr=args.lr,
        batch_size=args.batch_size, seed=args.seed,
    ).validate()
    result = train_toy(cfg)
    if args.out:
        write_trace_csv(result, args.out)
        print(f"wrote {len(result.trace)} trace rows to {args.out}")
    print(f"final train accuracy: {result.final_train_acc:.4f}")
    print(f"final test accuracy: {result.final_test_acc:.4f}")
    return EXIT_OK


_COMMANDS = {
    "moments": _cmd_moments,
    "keep-prob": _cmd_keepprob,
    "demos": _cmd_demos,
    "patterns": _cmd_patterns,
    "train": _cmd_train,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _print_config(args)
    try:
        return _COMMANDS[args.command](args)
    except StochPoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
