"""Command line front end.

`flaps run` posts a sweep to the round service (in-process by default, or a
remote instance via --server) and writes the timing and quality tables as
CSV. `flaps serve` hosts that service. `run` is implied when the first
argument is a flag, so `flaps --mode central` just works.
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from pathlib import Path

import httpx

from .experiment import ConfigError, config_to_dict, parse_config, write_metrics_csv, write_time_csv
from .learning import Metrics
from .orchestrator import PHASES, RoundResult, TimingRecord

_REQUEST_TIMEOUT = 600.0


def _drop_pair(text: str) -> tuple[str, float]:
    phase, sep, prob = text.partition("=")
    if not sep or phase not in PHASES:
        raise argparse.ArgumentTypeError(
            f"expected <phase>=<probability> with phase in {PHASES}, got '{text}'"
        )
    try:
        return phase, float(prob)
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{prob}' is not a probability") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flaps",
        description="Clustered federated-learning round simulator.",
    )
    commands = parser.add_subparsers(dest="command")

    run = commands.add_parser("run", help="run an experiment sweep and write CSV tables")
    run.add_argument("--config", metavar="PATH", help="JSON experiment config")
    run.add_argument("--mode", action="append", choices=("flaps", "fl", "central"),
                     help="mode to run; repeat for several (default: all three)")
    run.add_argument("--k", action="append", type=int, metavar="K",
                     help="cluster budget; repeat to sweep (default: 2..20)")
    run.add_argument("--clients", type=int, metavar="N", help="cohort size (default 200)")
    run.add_argument("--seed", action="append", type=int, metavar="SEED",
                     help="sweep seed; repeat for several")
    run.add_argument("--drop", action="append", type=_drop_pair, metavar="PHASE=P",
                     help=f"drop probability for a phase ({', '.join(PHASES)})")
    run.add_argument("--out", metavar="DIR", help="output directory for the CSV tables")
    run.add_argument("--transport", choices=("sim", "tcp"), help="message transport")
    run.add_argument("--compare", action="store_true",
                     help="print the per-budget quality comparison table")
    run.add_argument("--server", metavar="URL",
                     help="send the sweep to a running service instead of in-process")

    serve = commands.add_parser("serve", help="host the round service over HTTP")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8077)
    return parser


def _apply_overrides(args: argparse.Namespace) -> dict:
    base = parse_config(args.config) if args.config else parse_config({})
    raw = config_to_dict(base)
    if args.mode:
        raw["modes"] = list(dict.fromkeys(args.mode))
    if args.k:
        raw["k_list"] = args.k
    if args.clients is not None:
        raw["n_clients"] = args.clients
    if args.seed:
        raw["seeds"] = args.seed
    if args.drop:
        raw["drops"] = {**raw["drops"], **dict(args.drop)}
    if args.out:
        raw["out_dir"] = args.out
    if args.transport:
        raw["transport"] = args.transport
    return config_to_dict(parse_config(raw))


def _post_sweep(server: str | None, payload: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=_REQUEST_TIMEOUT) as client:
            return client.post("/sweeps", json=payload)

    from .service.app import create_app

    async def in_process() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://flaps.internal", timeout=_REQUEST_TIMEOUT
        ) as client:
            return await client.post("/sweeps", json=payload)

    return asyncio.run(in_process())


def _result_from_payload(row: dict) -> RoundResult:
    return RoundResult(
        mode=row["mode"],
        k=row["k"],
        seed=row["seed"],
        metrics=Metrics(**row["metrics"]),
        timing=TimingRecord(**row["timing"]),
        message_counts=row["message_counts"],
        dropped_clients=row["dropped_clients"],
        heads=row["heads"],
        attempts=row["attempts"],
    )


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        payload = _apply_overrides(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        response = _post_sweep(args.server, payload)
    except httpx.HTTPError as err:
        print(f"cannot reach the round service: {err}", file=sys.stderr)
        return 2
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        print(f"sweep rejected ({response.status_code}): {detail}", file=sys.stderr)
        return 2

    body = response.json()
    results = [_result_from_payload(row) for row in body["results"]]
    if results:
        out_dir = Path(payload["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        time_path, metrics_path = out_dir / "time.csv", out_dir / "metrics.csv"
        write_time_csv(results, time_path)
        write_metrics_csv(results, metrics_path)
        print(f"wrote {time_path} and {metrics_path} ({len(results)} rounds)")
    else:
        print("no rounds completed", file=sys.stderr)
    if args.compare and body["comparison"]:
        print(body["comparison"], end="")
    for failure in body["failures"]:
        print(
            f"failed: mode={failure['mode']} k={failure['k']} seed={failure['seed']}: "
            f"{failure['reason']}",
            file=sys.stderr,
        )
    return 0 if results and not body["failures"] else 2


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        build_parser().print_help()
        return 0
    if argv[0] not in ("run", "serve", "-h", "--help"):
        argv.insert(0, "run")
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return _cmd_serve(args)
    return _cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
