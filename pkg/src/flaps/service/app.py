"""HTTP face of the simulator: run one round or a whole sweep in-process.

The endpoints accept the same shapes the config files use; invalid configs
come back as 422 with the parser's message, and a round whose restarts are
exhausted comes back as 409.
"""

from __future__ import annotations

from dataclasses import asdict

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..experiment import (
    ConfigError,
    build_cohort,
    format_comparison,
    parse_config,
    run_sweep,
)
from ..orchestrator import (
    RoundAborted,
    RoundConfig,
    RoundFailed,
    RoundResult,
    restart_round,
    run_round,
)
from .schemas import (
    FailureModel,
    HealthResponse,
    RoundRequest,
    RoundResponse,
    SweepRequest,
    SweepResponse,
)


def round_to_payload(result: RoundResult) -> dict:
    """JSON-ready view of a completed round (the message log stays local)."""
    return {
        "mode": result.mode,
        "k": result.k,
        "seed": result.seed,
        "metrics": asdict(result.metrics),
        "timing": asdict(result.timing),
        "message_counts": result.message_counts,
        "dropped_clients": result.dropped_clients,
        "heads": result.heads,
        "attempts": result.attempts,
    }


def _experiment_dict(request: RoundRequest) -> dict:
    body = request.model_dump()
    for key in ("mode", "k", "seed"):
        body.pop(key, None)
    # sweep-only field; the round's own budget is validated by RoundConfig
    body["k_list"] = [2]
    return body


def create_app() -> FastAPI:
    app = FastAPI(title="flaps round service", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/rounds", response_model=RoundResponse)
    def run_one_round(request: RoundRequest) -> RoundResponse:
        try:
            config = parse_config(_experiment_dict(request))
            train, test, shards, arch = build_cohort(config)
            round_config = RoundConfig(
                train=train,
                test=test,
                shards=shards,
                arch=arch,
                train_config=config.train,
                seed=request.seed,
                k=request.k,
                drops=config.drops,
                n_shufflers=config.n_shufflers,
                transport_kind=config.transport,
            )
        except (ConfigError, ValueError) as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        try:
            try:
                result = run_round(request.mode, round_config)
            except RoundAborted as aborted:
                result = restart_round(aborted.result, round_config)
        except RoundFailed as err:
            raise HTTPException(status_code=409, detail=str(err)) from err
        return RoundResponse(**round_to_payload(result))

    @app.post("/sweeps", response_model=SweepResponse)
    def run_full_sweep(request: SweepRequest) -> SweepResponse:
        try:
            config = parse_config(request.model_dump())
            results, failures = run_sweep(config)
        except (ConfigError, ValueError) as err:
            raise HTTPException(status_code=422, detail=str(err)) from err
        return SweepResponse(
            results=[RoundResponse(**round_to_payload(r)) for r in results],
            failures=[FailureModel(**asdict(f)) for f in failures],
            comparison=format_comparison(results) if results else "",
        )

    return app
