"""Thin CLI client for the lapkit service.

Subcommands mirror the service endpoints: gen-data, train, laplace, sweep,
fsp, plot-data, serve. By default requests run against the FastAPI app
in-process (httpx ASGITransport); --server points at a remote instance.
Exit codes: 0 ok, 1 config error, 2 numerical error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

import httpx

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

_KIND_TO_EXIT = {"config": EXIT_CONFIG, "numerical": EXIT_NUMERICAL, "io": EXIT_IO}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapkit", description=__doc__)
    parser.add_argument("--config", help="TOML or JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", default="out", help="artifact directory")
    parser.add_argument("--threads", type=int, default=4, help="sweep worker pool size")
    parser.add_argument("--server", help="remote service URL (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate the task dataset CSV")
    sub.add_parser("train", help="train a MAP checkpoint")
    lap = sub.add_parser("laplace", help="fit and calibrate a Laplace posterior")
    lap.add_argument("--checkpoint", help="checkpoint JSON (default <out-dir>/checkpoint.json)")
    sub.add_parser("sweep", help="run the curvature x calibration x pushforward sweep")
    sub.add_parser("fsp", help="FSP training and GP-prior posterior")
    plot = sub.add_parser("plot-data", help="convert artifact JSONs to CSV")
    plot.add_argument("artifacts", nargs="*", help="artifact JSON paths")
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


class ServiceClient:
    """POSTs to a remote server, or to the ASGI app in-process by default."""

    def __init__(self, server: str | None):
        self.server = server

    def post(self, path: str, payload: dict) -> httpx.Response:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                return client.post(path, json=payload)
        import asyncio

        from .service import app

        async def go():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://lapkit", timeout=None
            ) as client:
                return await client.post(path, json=payload)

        return asyncio.run(go())


def _post(client: ServiceClient, path: str, payload: dict) -> int:
    response = client.post(path, payload)
    try:
        body = response.json()
    except json.JSONDecodeError:
        print(response.text, file=sys.stderr)
        return EXIT_IO
    if response.status_code >= 400:
        kind = body.get("error", "numerical")
        message = body.get("message", response.text)
        print(f"error ({kind}): {message}", file=sys.stderr)
        return _KIND_TO_EXIT.get(kind, EXIT_NUMERICAL)
    print(json.dumps(body, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return EXIT_OK

    try:
        from .pipeline import load_config

        config = load_config(args.config)
    except Exception as err:  # config problems before we reach the service
        print(f"error (config): {err}", file=sys.stderr)
        return EXIT_CONFIG

    job = {"config": config, "out_dir": args.out_dir}
    if args.seed is not None:
        job["seed"] = args.seed

    client = ServiceClient(args.server)
    if args.command == "gen-data":
        return _post(client, "/data/generate", job)
    if args.command == "train":
        return _post(client, "/train", job)
    if args.command == "laplace":
        job["checkpoint"] = args.checkpoint or f"{args.out_dir}/checkpoint.json"
        return _post(client, "/laplace", job)
    if args.command == "sweep":
        job["threads"] = args.threads
        return _post(client, "/sweep", job)
    if args.command == "fsp":
        return _post(client, "/fsp", job)
    if args.command == "plot-data":
        return _post(client, "/plot-data", {"artifacts": args.artifacts, "out_dir": args.out_dir})
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
