"""Command-line interface: generate | train | sample | evaluate | compare.

Success prints a one-line JSON summary and exits 0.  Any failure prints a
machine-readable JSON error object to stderr and exits nonzero (2 for
usage or configuration problems, 1 for stage failures).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness

_STAGE_HELP = {
    "generate": "synthesize a dataset and its updating problem",
    "train": "meta-learn the strategy networks on one problem",
    "sample": "run one sampler and store the trace",
    "evaluate": "compute metrics and plot data from a stored trace",
    "compare": "run two samplers on the same data, side by side",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so errors become JSON like everything else."""

    def error(self, message):
        raise _UsageError(message)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned "
                                         "64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amsghmc",
                     description="Meta-learned stochastic-gradient MCMC for "
                                 "Bayesian structural model updating.")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in harness.STAGES:
        p = sub.add_parser(stage, help=_STAGE_HELP[stage])
        p.add_argument("--config", default=None,
                       help="JSON experiment configuration")
        p.add_argument("--seed", type=_u64, default=None,
                       help="overrides the config seed")
        p.add_argument("--out", default=None,
                       help="output directory (overrides the config)")
        p.add_argument("--checkpoint", default=None,
                       help="strategy-network checkpoint (.npz)")
        p.add_argument("--sampler", default=None,
                       help="hmc | sghmc | am-sghmc")
    return parser


def _fail(stage, exc: Exception, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if stage is not None:
        payload["stage"] = stage
    if isinstance(exc, harness.StageError):
        payload["partial_outputs"] = exc.partial_outputs
        if exc.__cause__ is not None:
            payload["cause"] = type(exc.__cause__).__name__
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail(None, exc, 2)
    try:
        cfg = harness.resolve_config(args.config, seed=args.seed,
                                     out=args.out,
                                     checkpoint=args.checkpoint,
                                     sampler=args.sampler)
        report = harness.run_experiment(args.stage, cfg)
    except harness.ConfigError as exc:
        return _fail(args.stage, exc, 2)
    except harness.StageError as exc:
        return _fail(args.stage, exc, 1)
    except Exception as exc:
        return _fail(args.stage, exc, 1)
    print(json.dumps({
        "stage": args.stage,
        "seed": cfg.seed,
        "out": cfg.out,
        "outputs": report["outputs"],
    }))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
