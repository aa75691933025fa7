"""Command-line front end.

Subcommands:

* ``table1``: build all four schemes, attack each, print the comparison.
* ``attack``: run the heartbeat over-read against one scheme (or all).
* ``run``: execute a client script against a server and print the
  transcript.
* ``plan``: dump a scheme's enclave/channel layout as JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, planner
from .errors import SgxPartError
from .miniserver import ServerConfig, run_script, start

DEFAULT_SCRIPT = """\
connect 1
send 1 68656c6c6f
heartbeat 1 70696e67 4
close 1
"""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgxpart",
        description="Partitioned enclave server simulator and attack harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_table = sub.add_parser("table1", help="compare all four partitioning schemes")
    p_table.add_argument("--seed", type=int, default=1)
    p_table.add_argument("--format", choices=("table", "json"), default="table")

    p_attack = sub.add_parser("attack", help="run the heartbeat over-read")
    group = p_attack.add_mutually_exclusive_group(required=True)
    group.add_argument("--scheme", type=int, choices=(1, 2, 3, 4))
    group.add_argument("--all-schemes", action="store_true")
    p_attack.add_argument("--patched", action="store_true",
                          help="serve with the length check in place")
    p_attack.add_argument("--seed", type=int, default=1)
    p_attack.add_argument("--connections", type=int, default=2)
    p_attack.add_argument("--memory-pages", type=int, default=1024)
    p_attack.add_argument("--format", choices=("text", "json"), default="text")
    p_attack.add_argument("--check", action="store_true",
                          help="exit 2 unless every outcome matches expectations")

    p_run = sub.add_parser("run", help="run a client script against one scheme")
    p_run.add_argument("--scheme", type=int, choices=(1, 2, 3, 4), required=True)
    p_run.add_argument("--script", help="script file, or - for stdin; omit for a demo")
    p_run.add_argument("--seed", type=int, default=1)
    p_run.add_argument("--patched", action="store_true")
    p_run.add_argument("--connections", type=int,
                       help="sessions to provision (default: inferred from the script)")
    p_run.add_argument("--memory-pages", type=int, default=1024)
    p_run.add_argument("--trace", help="write the platform event trace to this file")

    p_plan = sub.add_parser("plan", help="print a scheme's layout as JSON")
    p_plan.add_argument("--scheme", type=int, choices=(1, 2, 3, 4), required=True)
    p_plan.add_argument("--connections", type=int, default=2)
    return parser


def _cmd_table1(args: argparse.Namespace) -> int:
    print(harness.emit(harness.table1(seed=args.seed), args.format))
    return 0


def _cmd_attack(args: argparse.Namespace) -> int:
    schemes = (1, 2, 3, 4) if args.all_schemes else (args.scheme,)
    reports = [
        harness.run_attack(
            scheme,
            seed=args.seed,
            connections=args.connections,
            patched=args.patched,
            memory_pages=args.memory_pages,
        )
        for scheme in schemes
    ]
    fmt = "json" if args.format == "json" else "table"
    print(harness.emit(reports, fmt))
    if args.check and not all(r.matches_expected for r in reports):
        print("check failed: at least one outcome was unexpected", file=sys.stderr)
        return 2
    return 0


def _read_script(arg: str | None) -> str:
    if arg is None:
        return DEFAULT_SCRIPT
    if arg == "-":
        return sys.stdin.read()
    return Path(arg).read_text()


def _infer_connections(script: str) -> int:
    ids = set()
    for line in script.splitlines():
        parts = line.split()
        if len(parts) >= 2 and parts[0] == "connect":
            try:
                ids.add(int(parts[1]))
            except ValueError:
                pass
    return max(len(ids), 1)


def _cmd_run(args: argparse.Namespace) -> int:
    script = _read_script(args.script)
    connections = args.connections or _infer_connections(script)
    plan = planner.plan(planner.Scheme(args.scheme), connections)
    server = start(
        ServerConfig(
            plan=plan,
            seed=args.seed,
            vulnerable_heartbeat=not args.patched,
            memory_pages=args.memory_pages,
        )
    )
    try:
        for line in run_script(server, script):
            print(line)
    finally:
        server.shutdown()
        if args.trace:
            Path(args.trace).write_text(server.platform.trace.dump())
    return 0


def _cmd_plan(args: argparse.Namespace) -> int:
    plan = planner.plan(planner.Scheme(args.scheme), args.connections)
    print(json.dumps(planner.plan_to_dict(plan), indent=2, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "table1": _cmd_table1,
        "attack": _cmd_attack,
        "run": _cmd_run,
        "plan": _cmd_plan,
    }
    try:
        return handlers[args.command](args)
    except SgxPartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
