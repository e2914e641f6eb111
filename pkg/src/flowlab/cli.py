"""Command-line entry points.

Exit codes: 0 success, 2 validation failure, 3 numerical blow-up,
4 partial failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import (BlowUpError, DivergenceError, FlowLabError,
                     InstabilityError, ValidationError)
from .regimes import RegimePoint, classify_regime

EXIT_VALIDATION = 2
EXIT_BLOWUP = 3
EXIT_PARTIAL = 4


def _add_common(sub):
    sub.add_argument("--config", required=True, help="experiment config file")
    sub.add_argument("--replicas", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", default="results", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab",
                                 description="stochastic transport laboratory")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment described by a config")
    _add_common(run)

    spde = sub.add_parser("spde", help="field-ensemble run (mean kernel / tilted)")
    _add_common(spde)
    spde.add_argument("--dump-noise", type=int, default=None, metavar="K",
                      help="also dump the white-noise slice at step K "
                           "(row-major little-endian float64)")

    two = sub.add_parser("twopoint", help="two-point Feynman-Kac Monte Carlo")
    _add_common(two)

    qp = sub.add_parser("qpde", help="weighted separation density tables")
    _add_common(qp)
    qp.add_argument("--eps-list", default=None,
                    help="comma-separated eps values overriding the config")

    cl = sub.add_parser("classify", help="label an exponent point")
    cl.add_argument("--alpha", type=float, required=True)
    cl.add_argument("--beta", type=float, required=True)

    sw = sub.add_parser("sweep", help="classify a grid of exponent points")
    _add_common(sw)
    sw.add_argument("--alpha-range", default=None, help="lo,hi")
    sw.add_argument("--beta-range", default=None, help="lo,hi")
    sw.add_argument("--grid-points", type=int, default=None)
    return ap


def _load(args):
    cfg = load_config(args.config)
    if args.replicas is not None:
        cfg.replicas = args.replicas
    return cfg


def _dispatch(args) -> int:
    from . import runner
    from .runner import PartialFailureError

    if args.command == "classify":
        print(classify_regime(RegimePoint(alpha=args.alpha, beta=args.beta)))
        return 0

    cfg = _load(args)
    if args.command == "sweep":
        cfg.kind = "phase-sweep"
        if args.alpha_range:
            cfg.alpha_range = tuple(float(v) for v in args.alpha_range.split(","))
        if args.beta_range:
            cfg.beta_range = tuple(float(v) for v in args.beta_range.split(","))
        if args.grid_points:
            cfg.grid_points = args.grid_points
    elif args.command == "twopoint":
        cfg.kind = "second-moment"
    elif args.command == "qpde":
        if args.eps_list:
            cfg.eps_list = [float(v) for v in args.eps_list.split(",")]
        if cfg.kind not in ("critical-line", "weak-disorder"):
            cfg.kind = "critical-line"
    elif args.command == "spde" and cfg.kind not in ("mean-kernel", "second-moment",
                                                     "strong-disorder"):
        cfg.kind = "mean-kernel"

    try:
        records = runner.run_experiment(cfg, args.out, replicas=cfg.replicas,
                                        seed=args.seed)
    except PartialFailureError as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        for eps, msg in exc.failures:
            print(f"  eps={eps}: {msg}", file=sys.stderr)
        return EXIT_PARTIAL

    if args.command == "spde" and args.dump_noise is not None:
        from .noise import dump_noise_slice
        cov = cfg.covariance()
        p = cfg.params(cov)
        dt = cfg.dt or cfg.auto_dt(cov, p, 0.0, cfg.times[0])
        dump_noise_slice(cfg.noise_grid(dt), args.dump_noise,
                         Path(args.out) / f"noise_slice_{args.dump_noise}.bin")

    for rec in records:
        for name, (value, se) in rec.observables.items():
            print(f"{name} = {value:.6g} +- {se:.2g}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = _dispatch(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except (BlowUpError, InstabilityError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = EXIT_BLOWUP
    except FlowLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_PARTIAL
    return code


if __name__ == "__main__":
    sys.exit(main())
