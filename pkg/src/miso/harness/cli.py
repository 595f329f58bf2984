"""`miso-harness` command line: logins, privacy games, subsets, load runs.

Exits nonzero when any game reports a violation or a subset outcome
disagrees with the size>=m indicator table.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..stack import default_state_dir
from .driver import StackHandle, drive_login
from .games import run_game_idp_unlinkability, run_game_rp_unlinkability, run_subset_oracle
from .load import SCENARIOS, format_table, run_load


def _write_json(path: str | None, payload) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="miso-harness")
    parser.add_argument("--state-dir", default=None,
                        help="stack state directory (default: $MISO_STATE_DIR or ./miso-state)")
    parser.add_argument("--json-out", default=None, help="write the report as JSON to this path")
    sub = parser.add_subparsers(dest="command", required=True)

    login = sub.add_parser("login", help="drive one end-to-end login")
    login.add_argument("--rp", default=None)
    login.add_argument("--user", default="alice")
    login.add_argument("--idps", default=None, help="comma-separated IdP ids (threshold mode)")
    login.add_argument("--m", type=int, default=None)
    login.add_argument("--deny", action="store_true", help="deny consent at the IdP")

    game = sub.add_parser("game", help="run an unlinkability game")
    game.add_argument("which", choices=["idp", "rp", "collusive"])
    game.add_argument("--trials", type=int, default=50)
    game.add_argument("--seed", type=int, default=None)

    subsets = sub.add_parser("subsets", help="threshold subset oracle")
    subsets.add_argument("--rp", default=None)
    subsets.add_argument("--user", default="carol")
    subsets.add_argument("--idps", default=None)
    subsets.add_argument("--m", type=int, default=2)

    load = sub.add_parser("load", help="open-loop login load")
    load.add_argument("scenario", choices=list(SCENARIOS) + ["compare"])
    load.add_argument("--rate", type=float, default=50.0, help="login arrivals per second")
    load.add_argument("--duration", type=float, default=30.0)
    load.add_argument("--pool", type=int, default=200, help="distinct users to cycle through")

    args = parser.parse_args(argv)
    stack = StackHandle.from_state_dir(args.state_dir or default_state_dir())

    if args.command == "login":
        user = stack.user(args.user)
        outcome = drive_login(
            stack, args.rp or stack.rp_names[0], user["username"], user["password"],
            idp_list=args.idps.split(",") if args.idps else None,
            m=args.m, consent="deny" if args.deny else "grant",
        )
        report = {
            "ok": outcome.ok, "sub": outcome.sub, "error": outcome.error,
            "failing_step": outcome.failing_step,
            "steps": [vars(s) for s in outcome.steps],
        }
        print(json.dumps(report, indent=2))
        _write_json(args.json_out, report)
        return 0 if outcome.ok else 1

    if args.command == "game":
        if args.which == "idp":
            report = run_game_idp_unlinkability(stack, args.trials, seed=args.seed)
        else:
            report = run_game_rp_unlinkability(stack, args.trials, seed=args.seed,
                                               collusive=args.which == "collusive")
        print(json.dumps(report, indent=2))
        _write_json(args.json_out, report)
        return 1 if report["violations"] else 0

    if args.command == "subsets":
        report = run_subset_oracle(
            stack, rp_name=args.rp, username=args.user,
            idps=args.idps.split(",") if args.idps else None, m=args.m,
        )
        print(json.dumps(report, indent=2))
        _write_json(args.json_out, report)
        if not report["enrolled"]:
            return 1
        bad = [k for k, want in report["expected"].items()
               if report["outcomes"][k]["ok"] != want
               or (want and report["outcomes"][k]["sub"] != report["enroll_sub"])]
        return 1 if bad else 0

    if args.command == "load":
        scenarios = ["baseline_sso", "miso_single"] if args.scenario == "compare" else [args.scenario]
        results = [run_load(stack, s, args.rate, args.duration, pool_size=args.pool)
                   for s in scenarios]
        print(format_table(results))
        _write_json(args.json_out, results)
        return 1 if any(r["errors"] for r in results) else 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
