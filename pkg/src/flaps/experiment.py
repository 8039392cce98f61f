"""Experiment sweeps: parse a config, run every (mode, k, seed) round, and
emit the timing and quality tables as CSV.

A config is JSON (file or mapping) with full defaults, so an empty mapping
is already a valid experiment. Unknown keys anywhere are rejected rather
than ignored. Result rows sort by (mode, k, seed) with the baselines'
missing k ordered first, so identical configs yield identically ordered
tables.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .data import LabeledDataset, load_csv, load_idx, make_synthetic, partition_random
from .learning import ModelArch, TrainConfig
from .orchestrator import (
    MODES,
    DropModel,
    RoundAborted,
    RoundConfig,
    RoundFailed,
    RoundResult,
    restart_round,
    run_round,
)

TIME_HEADER = ("mode", "k", "seed", "t1", "t2", "t3", "t4", "total")
METRICS_HEADER = ("mode", "k", "seed", "loss", "auc", "fscore", "accuracy")
OUT_DIR_ENV = "FLAPS_OUT_DIR"

DATASET_KINDS = ("synthetic", "csv", "idx")


class ConfigError(ValueError):
    """A config file or mapping failed validation."""


@dataclass(frozen=True)
class DatasetSpec:
    """Where the experiment's data comes from.

    synthetic: generated blobs, n_examples training rows plus a held-out
    fraction. csv: one labeled file, shuffled and split. idx: explicit
    binary train/test pairs, test_fraction unused.
    """

    kind: str = "synthetic"
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

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got '{self.kind}'")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")
        if self.kind == "synthetic" and (self.n_examples < 10 or self.dim < 1 or self.n_classes < 2):
            raise ConfigError("dataset: synthetic needs n_examples >= 10, dim >= 1, n_classes >= 2")
        if self.kind == "csv" and not self.path:
            raise ConfigError("dataset.path is required when kind is 'csv'")
        if self.kind == "idx" and not all(
            (self.train_images, self.train_labels, self.test_images, self.test_labels)
        ):
            raise ConfigError("dataset: idx needs all four image/label paths")


@dataclass(frozen=True)
class ExperimentConfig:
    """A full sweep: dataset, cohort size, modes, budgets, seeds, knobs."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    n_clients: int = 200
    modes: tuple[str, ...] = MODES
    k_list: tuple[int, ...] = tuple(range(2, 21))
    seeds: tuple[int, ...] = (0,)
    hidden: tuple[int, ...] = ()
    drops: DropModel = field(default_factory=DropModel)
    train: TrainConfig = field(default_factory=TrainConfig)
    transport: str = "sim"
    n_shufflers: int = 12
    out_dir: str = ""

    def __post_init__(self) -> None:
        if self.n_clients < 3:
            raise ConfigError("n_clients must be at least 3")
        if not self.modes:
            raise ConfigError("modes must not be empty")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode '{mode}', expected a subset of {MODES}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("modes must not repeat")
        if not self.k_list and "flaps" in self.modes:
            raise ConfigError("k_list must not be empty when sweeping flaps")
        for k in self.k_list:
            if not 2 <= k < self.n_clients:
                raise ConfigError(f"k_list values must satisfy 2 <= k < {self.n_clients}, got {k}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.transport not in ("sim", "tcp"):
            raise ConfigError(f"transport must be 'sim' or 'tcp', got '{self.transport}'")


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, "results")


def _build_section(name: str, cls, raw: Mapping[str, Any]):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    coerced = {
        key: tuple(value) if isinstance(value, list) else value for key, value in raw.items()
    }
    try:
        return cls(**coerced)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {name} section: {err}") from err


def parse_config(source: str | Path | Mapping[str, Any]) -> ExperimentConfig:
    """Build a fully-defaulted config from a JSON file path or a mapping."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    else:
        raw = dict(source)

    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    parsed: dict[str, Any] = {}
    if "dataset" in raw:
        parsed["dataset"] = _build_section("dataset", DatasetSpec, raw["dataset"])
    if "drops" in raw:
        parsed["drops"] = _build_section("drops", DropModel, raw["drops"])
    if "train" in raw:
        parsed["train"] = _build_section("train", TrainConfig, raw["train"])
    for key, value in raw.items():
        if key in ("dataset", "drops", "train"):
            continue
        parsed[key] = tuple(value) if isinstance(value, list) else value
    config = _build_section("config", ExperimentConfig, parsed)
    if not config.out_dir:
        config = replace(config, out_dir=default_out_dir())
    return config


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Canonical JSON-ready form; parse_config(config_to_dict(c)) == c."""
    out = asdict(config)
    for key in ("modes", "k_list", "seeds", "hidden"):
        out[key] = list(out[key])
    return out


def build_dataset(spec: DatasetSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Materialize (train, test) for a dataset spec."""
    if spec.kind == "idx":
        return (
            load_idx(spec.train_images, spec.train_labels),
            load_idx(spec.test_images, spec.test_labels),
        )
    if spec.kind == "synthetic":
        n_test = max(1, round(spec.n_examples * spec.test_fraction))
        full = make_synthetic(
            spec.n_examples + n_test, spec.dim, spec.n_classes, seed=spec.seed, noise=spec.noise
        )
        return full.subset(np.arange(spec.n_examples)), full.subset(
            np.arange(spec.n_examples, len(full))
        )
    full = load_csv(spec.path)
    if len(full) < 10:
        raise ConfigError("csv dataset too small to split")
    order = np.random.default_rng(np.random.SeedSequence((spec.seed, 1))).permutation(len(full))
    n_test = max(1, round(len(full) * spec.test_fraction))
    return full.subset(order[:-n_test]), full.subset(order[-n_test:])


@dataclass(frozen=True)
class SweepFailure:
    """One round that could not finish, with its sweep coordinates."""

    mode: str
    k: int | None
    seed: int
    reason: str


def _sort_key(result: RoundResult) -> tuple:
    return (result.mode, result.k if result.k is not None else -1, result.seed)


def expand_jobs(config: ExperimentConfig) -> list[tuple[str, int | None, int]]:
    """Every (mode, k, seed) cell the sweep will run, in run order."""
    jobs: list[tuple[str, int | None, int]] = []
    for mode in config.modes:
        budgets = list(config.k_list) if mode == "flaps" else [None]
        for k in budgets:
            for seed in config.seeds:
                jobs.append((mode, k, seed))
    return jobs


def build_cohort(config: ExperimentConfig):
    """Materialize the shared experiment state: (train, test, shards, arch)."""
    train, test = build_dataset(config.dataset)
    if config.n_clients > len(train):
        raise ConfigError(
            f"n_clients={config.n_clients} exceeds the {len(train)} training examples"
        )
    shards = partition_random(len(train), config.n_clients, seed=config.dataset.seed)
    arch = ModelArch(train.dim, train.n_classes, tuple(config.hidden))
    return train, test, shards, arch


def run_sweep(
    config: ExperimentConfig,
) -> tuple[list[RoundResult], list[SweepFailure]]:
    """Run the full grid. Aborted rounds are restarted per protocol; a round
    that exhausts its restarts (or otherwise errors) becomes a failure entry
    carrying its (mode, k, seed) coordinates, and the sweep continues."""
    train, test, shards, arch = build_cohort(config)
    results: list[RoundResult] = []
    failures: list[SweepFailure] = []
    for mode, k, seed in expand_jobs(config):
        round_config = RoundConfig(
            train=train,
            test=test,
            shards=shards,
            arch=arch,
            train_config=config.train,
            seed=seed,
            k=k,
            drops=config.drops,
            n_shufflers=config.n_shufflers,
            transport_kind=config.transport,
        )
        try:
            try:
                results.append(run_round(mode, round_config))
            except RoundAborted as aborted:
                results.append(restart_round(aborted.result, round_config))
        except (RoundFailed, ValueError, RuntimeError) as err:
            failures.append(SweepFailure(mode, k, seed, str(err)))
    results.sort(key=_sort_key)
    return results, failures


def _format_k(k: int | None) -> str:
    return "" if k is None else str(k)


def write_time_csv(results: list[RoundResult], path: str | Path) -> None:
    """Emit mode,k,seed,t1,t2,t3,t4,total with 6-decimal durations."""
    if not results:
        raise ValueError("no results to write")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TIME_HEADER)
        for r in results:
            t = r.timing
            writer.writerow(
                [r.mode, _format_k(r.k), r.seed]
                + [f"{v:.6f}" for v in (t.t1, t.t2, t.t3, t.t4, t.total)]
            )


def write_metrics_csv(results: list[RoundResult], path: str | Path) -> None:
    """Emit mode,k,seed,loss,auc,fscore,accuracy with 6-decimal values."""
    if not results:
        raise ValueError("no results to write")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in results:
            m = r.metrics
            writer.writerow(
                [r.mode, _format_k(r.k), r.seed]
                + [f"{v:.6f}" for v in (m.loss, m.auc, m.fscore, m.accuracy)]
            )


def _read_rows(path: str | Path, header: tuple[str, ...]) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if tuple(first) != header:
            raise ValueError(f"{path}: header {first} does not match {list(header)}")
        rows = []
        for line in reader:
            if len(line) != len(header):
                raise ValueError(f"{path}: row has {len(line)} fields, expected {len(header)}")
            row: dict[str, Any] = {"mode": line[0], "k": int(line[1]) if line[1] else None,
                                   "seed": int(line[2])}
            for name, cell in zip(header[3:], line[3:]):
                row[name] = float(cell)
            rows.append(row)
    return rows


def read_time_csv(path: str | Path) -> list[dict[str, Any]]:
    return _read_rows(path, TIME_HEADER)


def read_metrics_csv(path: str | Path) -> list[dict[str, Any]]:
    return _read_rows(path, METRICS_HEADER)


def format_comparison(results: list[RoundResult]) -> str:
    """Per-budget quality table: clustered round vs both baselines.

    F-scores are averaged over seeds; deltas are clustered minus baseline,
    so positive numbers favor the clustered round.
    """
    by_mode_k: dict[tuple[str, int | None], list[float]] = {}
    for r in results:
        if r.metrics is not None:
            by_mode_k.setdefault((r.mode, r.k), []).append(r.metrics.fscore)

    def mean_of(mode: str, k: int | None) -> float | None:
        values = by_mode_k.get((mode, k))
        return sum(values) / len(values) if values else None

    fl_mean = mean_of("fl", None)
    central_mean = mean_of("central", None)
    budgets = sorted({k for mode, k in by_mode_k if mode == "flaps"})
    lines = ["k     flaps_f1   fl_f1      central_f1  vs_fl      vs_central"]
    for k in budgets:
        flaps_mean = mean_of("flaps", k)
        cells = [f"{k:<5}", f"{flaps_mean:<10.6f}"]
        for other in (fl_mean, central_mean):
            cells.append(f"{other:<10.6f}" if other is not None else "n/a       ")
        for other in (fl_mean, central_mean):
            if other is None or flaps_mean is None:
                cells.append("n/a")
            else:
                cells.append(f"{flaps_mean - other:+.6f}")
        lines.append(" ".join(cells).rstrip())
    if not budgets:
        for mode, label in (("fl", "fl"), ("central", "central")):
            value = mean_of(mode, None)
            if value is not None:
                lines.append(f"{label:<5} {value:<10.6f}")
    return "\n".join(lines) + "\n"
