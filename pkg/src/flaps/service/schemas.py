"""Request and response bodies for the round service.

These mirror the experiment config sections field for field; semantic
validation (budget bounds, dataset requirements) stays in the core config
parser so the HTTP layer and the CLI can never drift apart.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict


class DatasetModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "csv", "idx"] = "synthetic"
    n_examples: int = 5000
    dim: int = 16
    n_classes: int = 10
    noise: float = 0.06
    seed: int = 0
    test_fraction: float = 0.25
    path: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


class DropsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ready: float = 0.0
    report: float = 0.0
    train: float = 0.0
    aggregate: float = 0.0


class TrainModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["rmsprop", "sgd"] = "rmsprop"
    learning_rate: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    tol: float = 1e-4
    patience: int = 3


class _CohortFields(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetModel = DatasetModel()
    n_clients: int = 200
    hidden: list[int] = []
    drops: DropsModel = DropsModel()
    train: TrainModel = TrainModel()
    transport: Literal["sim", "tcp"] = "sim"
    n_shufflers: int = 12


class RoundRequest(_CohortFields):
    """One round of a single mode."""

    mode: Literal["flaps", "fl", "central"] = "flaps"
    k: int | None = None
    seed: int = 0


class SweepRequest(_CohortFields):
    """A full grid of (mode, k, seed) rounds."""

    modes: list[Literal["flaps", "fl", "central"]] = ["flaps", "fl", "central"]
    k_list: list[int] = list(range(2, 21))
    seeds: list[int] = [0]
    out_dir: str = ""


class MetricsModel(BaseModel):
    loss: float
    auc: float
    fscore: float
    accuracy: float


class TimingModel(BaseModel):
    t1: float
    t2: float
    t3: float
    t4: float
    total: float


class RoundResponse(BaseModel):
    mode: str
    k: int | None
    seed: int
    metrics: MetricsModel
    timing: TimingModel
    message_counts: dict[str, dict[str, int]]
    dropped_clients: list[int]
    heads: list[int]
    attempts: int


class FailureModel(BaseModel):
    mode: str
    k: int | None
    seed: int
    reason: str


class SweepResponse(BaseModel):
    results: list[RoundResponse]
    failures: list[FailureModel]
    comparison: str


class HealthResponse(BaseModel):
    status: str
    version: str
