"""Command-line entry point: ``python -m fpo <experiment> [flags]``.

Exit status is 0 on success, 1 on configuration errors (including bad
flags) and 2 on numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import DivergenceError, FPOError, NonFiniteError, OptimizationError
from .harness import ExperimentConfig, render_rows, run_experiment
from .trainer import OptimizerConfig

SUBCOMMANDS = {
    "generator-check": "generator_check",
    "theorem1": "theorem1",
    "theorem2": "theorem2",
    "equivalence": "equivalence",
    "alpha-sweep": "alpha_sweep",
    "divergence-behavior": "divergence_behavior",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip()]


def _names(s):
    return [v.strip() for v in s.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=7)
    common.add_argument("--out", help="output file; stdout when omitted")
    common.add_argument("--format", choices=("csv", "json"), help="default: from --out suffix, else csv")
    common.add_argument("--prompts", type=int, default=4)
    common.add_argument("--responses", type=int, default=8)
    common.add_argument("--beta", type=float, default=0.5)
    common.add_argument("--epsilon", type=float, default=1e-3)
    common.add_argument("--reward-scale", type=float, default=2.0)
    common.add_argument("--generators", type=_names, help="comma list, e.g. fkl,rkl,alpha:0.5")
    common.add_argument("--max-steps", type=int, default=5000)
    common.add_argument("--lr", type=float, default=0.05)
    common.add_argument("--optimizer", choices=("adam", "gd"), default="adam")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fpo", description="f-PO desk-scale experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generator-check", parents=[common], help="generator validity on a log-grid")
    p = sub.add_parser("theorem1", parents=[common], help="convergence to the optimal policy")
    p.add_argument("--init", choices=("uniform", "ref"), default="uniform", help="starting logits")
    p.add_argument("--timing", action="store_true", help="fill the seconds column (breaks byte-identical output)")
    p = sub.add_parser("theorem2", parents=[common], help="K-sample estimator consistency")
    p.add_argument("--ks", type=_ints, default=[2, 8, 32, 128])
    p.add_argument("--num-seeds", type=int, default=100)
    p = sub.add_parser("equivalence", parents=[common], help="DPO / EXO / alpha-endpoint checks")
    p.add_argument("--num-checks", type=int, default=1000)
    p = sub.add_parser("alpha-sweep", parents=[common], help="train per alpha on preference data")
    p.add_argument("--alphas", type=_floats, default=[0.1, 0.3, 0.5, 0.7, 0.9])
    p.add_argument("--pairs", type=int, default=2000)
    p = sub.add_parser("divergence-behavior", parents=[common], help="mode seeking vs covering fits")
    p.add_argument("--target", choices=("bimodal", "unimodal"), default="bimodal")
    p.add_argument("--mode-center", type=float, default=None)
    return parser


def config_from_args(args) -> ExperimentConfig:
    fmt = args.format
    if fmt is None:
        fmt = "json" if args.out and args.out.endswith(".json") else "csv"
    kw = dict(
        experiment=SUBCOMMANDS[args.command],
        prompts=args.prompts,
        responses=args.responses,
        seed=args.seed,
        reward_scale=args.reward_scale,
        beta=args.beta,
        epsilon=args.epsilon,
        optimizer=OptimizerConfig(args.optimizer, args.lr, max_steps=args.max_steps),
        out=args.out,
        fmt=fmt,
    )
    if args.generators is not None:
        kw["generators"] = args.generators
    for flag, key in (("ks", "ks"), ("num_seeds", "num_seeds"), ("num_checks", "num_checks"),
                      ("alphas", "alphas"), ("pairs", "num_pairs"), ("target", "target"),
                      ("timing", "timing"), ("init", "init")):
        if hasattr(args, flag):
            kw[key] = getattr(args, flag)
    if getattr(args, "mode_center", None) is not None:
        kw["mode_center"] = args.mode_center
    return ExperimentConfig(**kw)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"fpo: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        rows = run_experiment(cfg)
        text = render_rows(rows, cfg.experiment, cfg.fmt)
    except (DivergenceError, NonFiniteError, OptimizationError) as exc:
        print(f"fpo: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (FPOError, ValueError) as exc:
        print(f"fpo: config error: {exc}", file=sys.stderr)
        return 1

    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            fh.write(text)
        print(f"{args.command}: {len(rows)} rows -> {cfg.out}")
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
