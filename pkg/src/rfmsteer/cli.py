"""Command line entry point: ``rfmsteer <command> --config run.yaml``.

Exit status is 0 on success, 1 for configuration errors and 2 for runtime
failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import COMMANDS, STAGES, PipelineError, make_context, run_all

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_HELP = {
    "gen-data": "synthesize the labeled concept datasets",
    "train-probes": "train per-layer RFM probes and extract concept directions",
    "steer": "run the steering grid and write FD/MMD/accuracy rows",
    "ablate": "sweep top-K layer selection, layer weighting and gate probability",
    "trace": "write per-step probe traces for schedules and the crossfade",
    "report": "summarize trends from the stage outputs",
    "all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfmsteer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("-c", "--config", required=True, help="experiment YAML file")
        p.add_argument("-o", "--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("-j", "--jobs", type=int, default=None, help="worker threads (overrides jobs)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed must be >= 0", "--seed", None, "command line")
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("jobs must be >= 1", "--jobs", None, "command line")
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ctx = make_context(cfg, args.out, args.seed, args.jobs)
        if args.command == "all":
            run_all(ctx)
        else:
            COMMANDS[args.command](ctx)
    except (PipelineError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
