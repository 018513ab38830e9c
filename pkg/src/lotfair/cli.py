"""Command line entry point: ``lotfair run|validate|bounds <config>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .harness import bounds_report, check_output_dir, emit_outputs, resolve_output_dir, run_experiment

log = logging.getLogger("lotfair")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = check_output_dir(resolve_output_dir(cfg))
    result = run_experiment(cfg)
    for path in emit_outputs(result, out):
        print(path)
    for name, res in result.methods.items():
        if not res.ok:
            print(f"{name}: failed ({res.error})", file=sys.stderr)
    return 0 if result.lotfair_ok else 1


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    out = check_output_dir(resolve_output_dir(cfg))
    print(f"config ok: app={cfg.app} horizon={cfg.horizon} hash={cfg.config_hash()[:12]} output_dir={out}")
    return 0


def _cmd_bounds(args) -> int:
    cfg = load_config(args.config)
    print(json.dumps(bounds_report(cfg), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lotfair", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in (
        ("run", _cmd_run, "run the experiment and write traces plus summary.json"),
        ("validate", _cmd_validate, "parse the config and check the output directory"),
        ("bounds", _cmd_bounds, "print the fairness and regret bounds for the configured constants"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="path to a key = value config file")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
