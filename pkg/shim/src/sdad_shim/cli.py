"""shim: run the inference protocol server.

    shim serve --mode stub|real --port N --dim D

Stub mode needs no models and answers deterministically from the seed.
Exit codes: 0 clean shutdown, 1 startup failure, 2 bad arguments.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .server import MODE_REAL, MODE_STUB, ShimConfig, ShimStartupError, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shim", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    p = sub.add_parser("serve", help="run the server until interrupted")
    p.add_argument("--mode", choices=[MODE_STUB, MODE_REAL], default=MODE_STUB)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--dim", type=int, default=768, help="embedding dimension")
    p.add_argument("--seed", type=int, default=0, help="stub-mode seed")
    p.add_argument("--embed-model", default=ShimConfig.embed_model)
    p.add_argument("--caption-model", default=ShimConfig.caption_model)
    p.add_argument("--generate-model", default=ShimConfig.generate_model)
    p.add_argument("--device", default="cpu")
    p.add_argument(
        "--parallel-generate",
        action="store_true",
        help="real mode: do not serialize generation requests",
    )
    return parser


def config_from_args(args: argparse.Namespace) -> ShimConfig:
    return ShimConfig(
        host=args.host,
        port=args.port,
        mode=args.mode,
        seed=args.seed,
        dimension=args.dim,
        embed_model=args.embed_model,
        caption_model=args.caption_model,
        generate_model=args.generate_model,
        device=args.device,
        serialize_generate=not args.parallel_generate,
    )


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != "serve":
        parser.print_usage(sys.stderr)
        sys.stderr.write("error: the serve command is required\n")
        return 2
    try:
        serve(config_from_args(args))
    except ShimStartupError as e:
        sys.stderr.write(f"startup failed: {e}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run())
