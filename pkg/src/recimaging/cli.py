"""Command-line entry point: ``rec-imaging run | validate | list-scenarios``."""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import (
    SCENARIO_HELP,
    SCENARIOS,
    ConfigError,
    apply_overrides,
    load_config,
    run,
    validate,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rec-imaging", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run a scenario and write its artifacts"),
                        ("validate", "check a configuration without running it")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON configuration file")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. physical.sigma=1.5 (repeatable; wins over the file)")
        if name == "run":
            s.add_argument("--output-dir", help="overrides output_dir")
    sub.add_parser("list-scenarios", help="print the available scenarios")
    return p


def _config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    return apply_overrides(cfg, args.overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-scenarios":
        for s in SCENARIOS:
            print(f"{s:22s} {SCENARIO_HELP[s]}")
        return EXIT_OK
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    problems = validate(cfg)
    if args.command == "validate":
        for msg in problems:
            print(msg)
        if not problems:
            print("ok")
        return EXIT_INVALID if problems else EXIT_OK
    if problems:
        for msg in problems:
            print(f"invalid: {msg}", file=sys.stderr)
        return EXIT_INVALID
    try:
        res = run(cfg, output_dir=args.output_dir)
    except Exception as e:  # any failure past validation is a runtime error
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: str(v) for k, v in res.paths.items()}, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
