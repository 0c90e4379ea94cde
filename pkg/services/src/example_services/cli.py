"""Serve the example services from the command line."""

from __future__ import annotations

import argparse
import sys
from typing import Optional

import uvicorn

from .app import ALL_SERVICES, build_app


def _service_list(text: str):
    names = tuple(name.strip() for name in text.split(",") if name.strip())
    unknown = set(names) - set(ALL_SERVICES)
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown service {sorted(unknown)[0]!r}; choose from {','.join(ALL_SERVICES)}"
        )
    return names


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="example-services",
        description="gate, light, and detection HTTP services with artificial delay",
    )
    parser.add_argument("--port", type=int, default=8077)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--delay-ms", type=float, default=0.0)
    parser.add_argument(
        "--services",
        type=_service_list,
        default=ALL_SERVICES,
        metavar="gate,light,detect",
        help="comma-separated subset to serve",
    )
    args = parser.parse_args(argv)
    app = build_app(args.services, delay_ms=args.delay_ms)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
