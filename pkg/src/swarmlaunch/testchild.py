"""Bundled test child: sleeps, prints the readiness sentinel, runs, exits with a chosen code.

Standalone on purpose (stdlib only) so it can be copied into a payload
directory and run from node scratch.
"""

import argparse
import os
import sys
import time

SENTINEL = "SWARMLAUNCH_READY"


def main(argv=None):
    p = argparse.ArgumentParser(prog="swarmlaunch-testchild")
    p.add_argument("--ready-after", type=float, default=0.0)
    p.add_argument("--run-for", type=float, default=0.0)
    p.add_argument("--exit-code", type=int, default=0)
    p.add_argument("--task-id", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--no-sentinel", action="store_true", help="never signal readiness")
    args = p.parse_args(argv)

    task_id = args.task_id if args.task_id is not None else os.environ.get("SWARMLAUNCH_TASK_ID", "0")
    if args.ready_after > 0:
        time.sleep(args.ready_after)
    if not args.no_sentinel:
        sys.stdout.write(f"{SENTINEL} {task_id}\n")
        sys.stdout.flush()
    if args.run_for > 0:
        time.sleep(args.run_for)
    return args.exit_code


if __name__ == "__main__":
    sys.exit(main())
