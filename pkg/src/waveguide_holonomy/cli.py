"""Command-line scenario runner.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 validity flag raised under ``--strict``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, load_config, serialize
from .errors import NumericalError, ValidationError
from .scenarios import DESCRIPTIONS, RUNNERS, run_scenario

OUT_ENV = "WAVEGUIDE_HOLONOMY_OUT"
DEFAULT_OUT = "results"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VALIDITY = 4

log = logging.getLogger("waveguide_holonomy")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="waveguide-holonomy", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the scenario described by a config file")
    run.add_argument("config")
    run.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else ./{DEFAULT_OUT})")
    run.add_argument("--strict", action="store_true", help="exit 4 when any validity flag is raised")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--seed", type=int, default=0, help="recorded in reports; scenarios are deterministic")

    sub.add_parser("list-scenarios", help="list built-in scenarios")

    val = sub.add_parser("validate", help="parse a config and print it with all defaults resolved")
    val.add_argument("config")
    return ap


def output_dir(arg: str | None) -> str:
    return arg or os.environ.get(OUT_ENV) or DEFAULT_OUT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "list-scenarios":
        for name in RUNNERS:
            print(f"{name:18s} {DESCRIPTIONS[name]}")
        return EXIT_OK

    try:
        sc = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        sys.stdout.write(serialize(sc))
        return EXIT_OK

    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(args.out)
    try:
        outcome = run_scenario(sc, out, args.threads)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in outcome.artifacts:
        print(path)
    raised = sorted(k for k, v in outcome.flags.items() if v)
    if raised:
        print(f"validity flags raised: {', '.join(raised)}", file=sys.stderr)
        if args.strict:
            return EXIT_VALIDITY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
