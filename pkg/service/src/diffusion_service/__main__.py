"""Run the service: python -m diffusion_service [--engine reference|sdxl] ..."""

from __future__ import annotations

import argparse
import json
from pathlib import Path


def main() -> None:
    parser = argparse.ArgumentParser(description="diffusion inference service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8100)
    parser.add_argument("--engine", default="reference", choices=["reference", "sdxl"])
    parser.add_argument(
        "--engine-config",
        type=Path,
        default=None,
        help="JSON file with engine options (vocabulary, checkpoint, sizes).",
    )
    parser.add_argument("--no-lpips", action="store_true",
                        help="Skip loading the learned metric; use the proxy.")
    args = parser.parse_args()

    import uvicorn

    from .app import create_app

    engine_config = None
    if args.engine_config:
        engine_config = json.loads(args.engine_config.read_text(encoding="utf-8"))
    app = create_app(
        engine_name=args.engine,
        engine_config=engine_config,
        prefer_lpips=not args.no_lpips,
    )
    uvicorn.run(app, host=args.host, port=args.port)


if __name__ == "__main__":
    main()
