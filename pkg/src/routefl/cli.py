"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad config, missing files, checkpoint
mismatch), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback

from .config import load_config
from .errors import RouteFLError
from .experiment import evaluate_checkpoint, export_plots, gen_data, run_experiment, run_sweep

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="routefl", description="Federated routing simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_config(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.gamma=0 (repeatable)")

    r = sub.add_parser("run", help="train and evaluate every seed of a config")
    add_config(r)
    r.add_argument("--out", help="run directory (default: <output root>/<output_dir>/<name>)")

    e = sub.add_parser("eval", help="evaluate a saved global model")
    e.add_argument("checkpoint")
    add_config(e)
    e.add_argument("--seed", type=int)
    e.add_argument("--soft", action="store_true", help="also report soft-routing accuracy")
    e.add_argument("--out", help="write JSON here instead of stdout")

    s = sub.add_parser("sweep", help="one run per value of a sweep axis")
    add_config(s)
    s.add_argument("--axis", choices=["gamma", "local_epochs", "tau", "lambda"])
    s.add_argument("--values", nargs="+", type=_parse_value)
    s.add_argument("--out", help="sweep directory")

    x = sub.add_parser("export-plots", help="tidy CSVs from a run or sweep directory")
    x.add_argument("directory")
    x.add_argument("--out")

    g = sub.add_parser("gen-data", help="write the synthetic federation of a config to NDJSON")
    add_config(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    return p


def dispatch(args) -> int:
    if args.command == "run":
        cfg = load_config(args.config, args.overrides)
        print(run_experiment(cfg, args.out))
    elif args.command == "eval":
        cfg = load_config(args.config, args.overrides)
        result = evaluate_checkpoint(cfg, args.checkpoint, args.seed, True if args.soft else None)
        text = json.dumps(result, indent=2, sort_keys=True)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
            print(args.out)
        else:
            print(text)
    elif args.command == "sweep":
        cfg = load_config(args.config, args.overrides)
        print(run_sweep(cfg, args.axis, args.values, args.out))
    elif args.command == "export-plots":
        out, missing = export_plots(args.directory, args.out)
        for m in missing:
            print(f"skipped missing file: {m}", file=sys.stderr)
        print(out)
    elif args.command == "gen-data":
        cfg = load_config(args.config, args.overrides)
        print(gen_data(cfg, args.out, args.seed))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return dispatch(args)
    except (RouteFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
