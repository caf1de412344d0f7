"""Command-line front end for the speaker-verification pipeline.

Every pipeline step is a subcommand; all share --config/--workdir/--jobs/
--seed/--force. Without --config, a bundled desk-scale configuration is
used, so `nivec run-all --workdir w` works out of the box.

Exit codes: 0 success, 2 bad configuration (or refused overwrite),
3 missing input artifact, 4 numeric failure, 5 failed check (gradient
suite or provenance hash mismatch).
"""

import argparse
import dataclasses
import sys

import numpy as np

from . import __version__, pipeline
from .pipeline import CheckFailureError, ConfigError, MissingInputError, PipelineConfig
from .training import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5

STEP_COMMANDS = (
    ("synth", "generate the synthetic corpus, splits, and trial list",
     pipeline.step_synth),
    ("train-net", "train the frame network + aggregation + classifier",
     pipeline.step_train_net),
    ("extract-embeddings", "write utterance embeddings for both splits",
     pipeline.step_extract_embeddings),
    ("extract-stats", "write per-utterance sufficient statistics",
     pipeline.step_extract_stats),
    ("train-ivector", "fit the latent-subspace extractor with EM",
     pipeline.step_train_ivector),
    ("extract-ivectors", "write latent vectors plus posterior diagnostics",
     pipeline.step_extract_ivectors),
    ("train-backend", "fit whitening + PLDA + cohort per system",
     pipeline.step_train_backend),
    ("score", "score the trial list with both systems",
     pipeline.step_score),
    ("eval", "compute EER / min-DCF, DET curves, and the report",
     pipeline.step_eval),
    ("run-all", "run every step in order",
     pipeline.run_all),
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nivec",
        description="speaker verification with network-derived latent vectors")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    for name, help_text, _ in STEP_COMMANDS:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config file (default: bundled toy config)")
        sp.add_argument("--workdir", help="artifact directory (overrides config)")
        sp.add_argument("--jobs", type=int, help="worker processes for extraction")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--force", action="store_true",
                        help="overwrite existing output artifacts")

    gp = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    gp.add_argument("--seeds", type=int, default=20,
                    help="random restarts per layer (default 20)")
    gp.add_argument("--base-seed", type=int, default=12345)
    return parser


def load_config(args) -> PipelineConfig:
    if args.config is not None:
        cfg = PipelineConfig.from_file(args.config)
    else:
        cfg = pipeline.toy_config()
    overrides = {}
    if args.workdir is not None:
        overrides["workdir"] = args.workdir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def run_gradcheck(args):
    from .gradcheck import format_results, run_suite
    results = run_suite(num_seeds=args.seeds, base_seed=args.base_seed)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return run_gradcheck(args)
        cfg = load_config(args)
        step = dict((name, fn) for name, _, fn in STEP_COMMANDS)[args.command]
        step(cfg, force=args.force)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (np.linalg.LinAlgError, FloatingPointError, ZeroDivisionError,
            OverflowError, DivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
