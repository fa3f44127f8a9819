"""Command-line entry point ``hypolab``."""
from __future__ import annotations

import argparse
import json
import sys

from .config import TASKS, load_config
from .errors import DataError, ParameterError, UsageError
from .runner import compare, run_config

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, needs_config: bool = True):
    p.add_argument("--config", required=needs_config, help="experiment config file")
    p.add_argument("--out", help="output directory (overrides [run] output)")
    p.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, help="parallel tasks per stage")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hypolab", description="Hypocoercivity numerical laboratory.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for task in TASKS:
        _common(sub.add_parser(task, help=f"run the {task} task only"))
    _common(sub.add_parser("run", help="run every task listed in the config"))
    cmp_ = sub.add_parser("compare", help="relative metric differences between two manifests")
    cmp_.add_argument("manifest_a")
    cmp_.add_argument("manifest_b")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.command == "compare":
            print(json.dumps(compare(args.manifest_a, args.manifest_b), indent=2, sort_keys=True))
            return 0
        cfg = load_config(args.config)
        if args.command != "run":
            cfg.tasks = [args.command]
        manifest = run_config(cfg, args.out, args.seed, args.threads)
    except (UsageError, ParameterError, DataError) as exc:
        print(f"hypolab: error: {exc}", file=sys.stderr)
        return 1
    for name, res in manifest.tasks.items():
        line = f"{name}: {res.status} ({res.seconds:.1f}s)"
        if res.error:
            line += f" {res.error.splitlines()[0]}"
        print(line)
    print(f"manifest: {manifest.output}/manifest.json")
    return 0 if manifest.ok else 2


if __name__ == "__main__":
    sys.exit(main())
