"""Command-line entry: load one checkpoint, serve the protocol until EOF."""

from __future__ import annotations

import argparse
import sys

from .server import BackendConfig, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refbackend",
        description="Serve fill-mask and classification over line-delimited "
        "JSON on stdin/stdout.",
    )
    parser.add_argument("--model", required=True, help="checkpoint name or local path")
    parser.add_argument("--device", default="cpu", help="torch device hint")
    parser.add_argument("--max-length", type=int, default=512, help="truncation length")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = BackendConfig(args.model, args.device, args.max_length)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        return serve(config)
    except Exception as e:  # startup failure (bad checkpoint, device, ...)
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
