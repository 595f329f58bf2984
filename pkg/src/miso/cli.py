"""`miso` command line: bring the demo stack up and down."""

from __future__ import annotations

import argparse
import json
import sys
import threading

from .stack import StackController, StackError, Topology, default_state_dir


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="miso", description="Manage a local MISO stack")
    parser.add_argument("--state-dir", default=None,
                        help="stack state directory (default: $MISO_STATE_DIR or ./miso-state)")
    sub = parser.add_subparsers(dest="command", required=True)

    up = sub.add_parser("up", help="launch IdPs, mixer, and RPs on loopback")
    up.add_argument("--idps", type=int, default=3)
    up.add_argument("--rps", type=int, default=2)
    up.add_argument("--users", type=int, default=256)
    up.add_argument("--base-port", type=int, default=9400)
    up.add_argument("--seal-mode", choices=["mrenclave", "mrsigner"], default="mrenclave")
    up.add_argument("--no-baseline", action="store_true",
                    help="skip the baseline (mixerless) comparison RP")
    up.add_argument("--no-debug", action="store_true",
                    help="disable transcript taps and debug endpoints")
    up.add_argument("--plaintext", action="store_true",
                    help="run the mixer over plain http instead of TLS")
    up.add_argument("--foreground", action="store_true",
                    help="stay attached; Ctrl-C tears the stack down")

    down = sub.add_parser("down", help="stop a running stack")
    down.add_argument("--wipe", action="store_true", help="also delete the state directory")

    sub.add_parser("status", help="probe each service's health endpoint")

    args = parser.parse_args(argv)
    controller = StackController(args.state_dir or default_state_dir())

    try:
        if args.command == "up":
            desc = controller.up(Topology(
                idps=args.idps,
                rps=args.rps,
                users=args.users,
                base_port=args.base_port,
                seal_mode=args.seal_mode,
                with_baseline=not args.no_baseline,
                debug=not args.no_debug,
                tls_mixer=not args.plaintext,
            ))
            print(json.dumps(desc, indent=2))
            if args.foreground:
                try:
                    threading.Event().wait()
                except KeyboardInterrupt:
                    controller.down()
        elif args.command == "down":
            stopped = controller.down(wipe=args.wipe)
            print("stack stopped" if stopped else "no running stack (no-op)")
        elif args.command == "status":
            print(json.dumps(controller.status(), indent=2))
    except StackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
