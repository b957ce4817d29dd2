"""``faultmg`` command line: hierarchy, solve, lyapunov, levelset, bound."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import harness


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultmg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("hierarchy", "print level sizes and operator statistics (JSON)"),
                       ("solve", "residual history of repeated cycles (CSV)"),
                       ("lyapunov", "Lyapunov rate sweep over levels, eps and configs (CSV)"),
                       ("levelset", "fault rate reaching the target rate per size (CSV)"),
                       ("bound", "two-grid replica bound and multilevel bound (JSON)")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--workers", type=int, help="parallel sweep points")
        p.add_argument("--out", help="output file (default: stdout)")
    return parser


def run(args):
    """Execute one subcommand; returns ``(text, output path or None)``."""
    exp = harness.read_config(args.config)
    return _dispatch(args, exp), args.out or exp.output


def _dispatch(args, exp) -> str:
    if args.seed is not None:
        exp = dataclasses.replace(exp, seed=args.seed)
    if args.workers is not None:
        exp = dataclasses.replace(exp, workers=args.workers)
    if args.command == "hierarchy":
        return json.dumps(harness.cmd_hierarchy(exp), indent=2) + "\n"
    if args.command == "solve":
        res = harness.cmd_solve(exp)
        logging.getLogger(__name__).info("solve finished: %s", res.status)
        if res.status == "diverged":
            sys.stderr.write(json.dumps({"warning": "diverged",
                                         "iterations": len(res.residuals) - 1}) + "\n")
        return res.to_csv()
    if args.command == "lyapunov":
        return harness.rows_to_csv(harness.cmd_lyapunov_sweep(exp))
    if args.command == "levelset":
        return harness.levelset_to_csv(harness.cmd_levelset(exp))
    return json.dumps(harness.cmd_bound(exp), indent=2) + "\n"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text, out = run(args)
        _emit(text, out)
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
