"""Command line entry point: ``idm run <config.json> [--set k=v]... [--out prefix] [--seed u64]``.

``idm interval|coverage|convergence|runtime|fisher <config.json>`` run the
same pipeline with the experiment kind forced.

Exit codes: 0 success; 1 a stage failed; 2 bad config or arguments;
3 the run finished but a diagnostic fired (negative raw variance, failed
replicates) and ``--allow-diagnostics`` was not given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import harness
from .errors import IDMError, InvalidArgumentError

EXIT_OK, EXIT_STAGE, EXIT_USAGE, EXIT_DIAGNOSTIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idm", description="Implicit-delta-method experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run",) + harness.EXPERIMENTS:
        p = sub.add_parser(name, help="run the experiment named in the config" if name == "run"
                           else f"run the {name} experiment")
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config path, e.g. idm.lambda=0.1")
        p.add_argument("--out", help="output path prefix (overrides the config's 'output')")
        p.add_argument("--seed", type=int, help="root seed (overrides the config's 'root_seed')")
        p.add_argument("--allow-diagnostics", action="store_true",
                       help="exit 0 even when a diagnostic fired")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.command != "run":
        overrides.append(f"experiment={json.dumps(args.command)}")
    if args.out is not None:
        overrides.append(f"output={json.dumps(args.out)}")
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            print("error [config]: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_USAGE
        overrides.append(f"root_seed={args.seed}")
    try:
        cfg = harness.load_config(args.config, overrides)
    except (OSError, json.JSONDecodeError, InvalidArgumentError, TypeError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_USAGE

    started = time.time()
    try:
        report = harness.run(cfg)
    except IDMError as exc:
        stage = getattr(exc, "stage", cfg.experiment)
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_STAGE
    finished = time.time()
    paths = harness.write_report(report, cfg.output, started, finished)
    for p in paths:
        print(p)
    diags = report.get("diagnostics") or []
    if diags:
        print(f"diagnostics: {', '.join(diags)}", file=sys.stderr)
        if not args.allow_diagnostics:
            return EXIT_DIAGNOSTIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
