"""Command line entry point: remap-bridge export --job job.json"""

from __future__ import annotations

import argparse
import sys

from .errors import BridgeError
from .export import export
from .job import load_job


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remap-bridge",
        description="export backbone feature maps to tensor files")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run an export job")
    p.add_argument("--job", required=True, help="job description JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = export(load_job(args.job))
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"manifest: {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
