"""Round execution: a ready poll with clustering, shuffled data reports to
cluster heads, per-head local training, and privatized weight aggregation,
plus the plain federated and centralized baselines.

All traffic flows through a transport speaking the binary frame codec. The
server is node 0 and a client with user id u is node u + 1. Every random
draw comes from a stream keyed by (seed, purpose tag, node), so results
never depend on scheduling or on how many drop draws happened elsewhere.

Timing mirrors a four-phase split: t1 covers the poll, budget, and
clustering; t2 the data reports; t3 the mean per-head training segment
(heads are concurrent in spirit, so the mean, not the sum); t4 aggregation
and evaluation. The recorded total is t1+t2+t3+t4.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from statistics import fmean
from typing import Mapping

import numpy as np

from .ara import aggregate_weight_reports, fed_avg, merge_data_reports
from .buds import AttributeTable, ShuffledReport, iterative_shuffle, reduce_attributes, weight_report
from .clustering import choose_budget, client_features, kmeans
from .data import ClientShard, LabeledDataset, OneHotCodec
from .learning import (
    Metrics,
    ModelArch,
    ModelParams,
    TrainConfig,
    evaluate,
    init_model,
    train_until_converged,
)
from .messages import (
    SERVER_ID,
    BudgetBroadcast,
    ClusterAssign,
    DataReport,
    Envelope,
    GlobalUpdate,
    ModelDownload,
    Payload,
    ReadyAck,
    ReadyQuery,
    WeightReport,
)
from .transport import make_transport

MODES = ("flaps", "fl", "central")
PHASES = ("ready", "report", "train", "aggregate")
EDGE_CLASSES = ("server_broadcast", "server_transfer", "client_to_head")

# stream tags: one integer per random purpose, so streams never collide
_TAG_BUDGET, _TAG_KMEANS, _TAG_INIT, _TAG_REPORT, _TAG_TRAIN, _TAG_UPLOAD, _TAG_DROP, _TAG_ATTEMPT = range(1, 9)

_EDGE_BY_VARIANT: dict[type, str] = {
    ReadyQuery: "server_broadcast",
    ReadyAck: "server_broadcast",
    BudgetBroadcast: "server_broadcast",
    ClusterAssign: "server_broadcast",
    GlobalUpdate: "server_broadcast",
    ModelDownload: "server_transfer",
    WeightReport: "server_transfer",
    DataReport: "client_to_head",
}


def _stream(seed: int, tag: int, node: int | None = None) -> np.random.Generator:
    entropy = (seed, tag) if node is None else (seed, tag, node)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _subseed(seed: int, tag: int, node: int | None = None) -> int:
    entropy = (seed, tag) if node is None else (seed, tag, node)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass(frozen=True)
class DropModel:
    """Per-phase probability that a device silently leaves the round."""

    ready: float = 0.0
    report: float = 0.0
    train: float = 0.0
    aggregate: float = 0.0

    def __post_init__(self) -> None:
        for phase in PHASES:
            p = getattr(self, phase)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"drop probability for '{phase}' must lie in [0, 1], got {p}")

    def probability(self, phase: str) -> float:
        if phase not in PHASES:
            raise ValueError(f"unknown phase '{phase}', expected one of {PHASES}")
        return getattr(self, phase)

    def any_active(self) -> bool:
        return any(getattr(self, phase) > 0.0 for phase in PHASES)


def apply_drop_model(
    phase: str,
    clients: list[int],
    drops: DropModel,
    rng: np.random.Generator,
) -> list[int]:
    """Survivors of one phase: each client leaves independently with p_phase.

    Draws come from the dedicated drop stream, so enabling drops never
    perturbs clustering, shuffling, or training randomness.
    """
    p = drops.probability(phase)
    clients = list(clients)
    if p == 0.0 or not clients:
        return clients
    keep = rng.random(len(clients)) >= p
    return [c for c, kept in zip(clients, keep) if kept]


@dataclass(frozen=True)
class TimingRecord:
    """Phase durations in seconds; total is the sequential sum."""

    t1: float = 0.0
    t2: float = 0.0
    t3: float = 0.0
    t4: float = 0.0
    total: float = 0.0

    def __post_init__(self) -> None:
        parts = (self.t1, self.t2, self.t3, self.t4, self.total)
        if any(t < 0 for t in parts):
            raise ValueError("durations must be non-negative")
        if self.total < max(parts[:4]):
            raise ValueError("total cannot undercut the longest phase")

    @classmethod
    def sequential(cls, t1: float, t2: float, t3: float, t4: float) -> "TimingRecord":
        return cls(t1, t2, t3, t4, t1 + t2 + t3 + t4)


@dataclass
class RoundResult:
    """Outcome of one round: quality, timing, traffic, and casualty list."""

    mode: str
    k: int | None
    seed: int
    metrics: Metrics | None
    timing: TimingRecord
    message_counts: dict[str, dict[str, int]]
    dropped_clients: list[int]
    heads: list[int] = field(default_factory=list)
    attempts: int = 1
    aborted: bool = False
    abort_reason: str = ""
    message_log: list[Envelope] | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'")
        if not self.aborted and self.metrics is None:
            raise ValueError("a completed round must carry metrics")
        for edge_class, per_variant in self.message_counts.items():
            if edge_class not in EDGE_CLASSES:
                raise ValueError(f"unknown edge class '{edge_class}'")
            if any(n < 0 for n in per_variant.values()):
                raise ValueError("message counters must be non-negative")


class RoundAborted(RuntimeError):
    """The round died before aggregation; carries the partial result so the
    caller can hand it to restart_round."""

    def __init__(self, reason: str, result: RoundResult):
        super().__init__(reason)
        self.result = result


class RoundFailed(RuntimeError):
    """Every allowed attempt aborted."""


@dataclass
class RoundConfig:
    """Everything one round needs: data, model, seeds, drops, transport."""

    train: LabeledDataset
    test: LabeledDataset
    shards: list[ClientShard]
    arch: ModelArch
    train_config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    k: int | None = None
    drops: DropModel = field(default_factory=DropModel)
    n_shufflers: int = 12
    transport_kind: str = "sim"
    transport: object | None = None
    max_attempts: int = 3
    retry_delay: float = 0.0
    keep_log: bool = True

    def __post_init__(self) -> None:
        if not self.shards:
            raise ValueError("need at least one client shard")
        if self.k is not None and not 2 <= self.k < len(self.shards):
            raise ValueError(
                f"cluster budget must satisfy 2 <= k < {len(self.shards)} clients, got {self.k}"
            )
        top = max(s.max_index for s in self.shards)
        if top >= len(self.train):
            raise ValueError("shard index ranges exceed the training set")
        if self.arch.input_dim != self.train.dim or self.arch.n_classes != self.train.n_classes:
            raise ValueError("model shape does not match the dataset")
        if self.n_shufflers < 5:
            raise ValueError("need at least 5 shufflers to cover a report's column groups")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")
        if self.retry_delay < 0:
            raise ValueError("retry_delay must be non-negative")


def fit_report_codecs(shards: list[ClientShard]) -> dict[str, OneHotCodec]:
    """One-hot codecs for the metadata attributes a data report carries."""
    rows = [s.attributes() for s in shards]
    return {
        "user_id": OneHotCodec.fit(rows, ["user_id"]),
        "count": OneHotCodec.fit(rows, ["count"]),
    }


def build_data_report(
    shard: ClientShard,
    codecs: Mapping[str, OneHotCodec],
    n_shufflers: int,
    rng: np.random.Generator,
) -> ShuffledReport:
    """One-row shuffled report of a shard's metadata.

    The user id and example count ride as one-hot bit cells; the index range
    is a tied (max, min) pair heads union into their training set; the
    cluster id stays scalar for membership checks.
    """
    attrs = shard.attributes()
    row = [
        codecs["user_id"].encode({"user_id": attrs["user_id"]}),
        codecs["count"].encode({"count": attrs["count"]}),
        attrs["max_index"],
        attrs["min_index"],
    ]
    columns = ["user_id", "count", "max_index", "min_index"]
    if "cluster_id" in attrs:
        columns.append("cluster_id")
        row.append(attrs["cluster_id"])
    table = AttributeTable(tuple(columns), [tuple(row)])
    tied = reduce_attributes(table, {"max_index", "min_index"})
    return iterative_shuffle(tied, n_shufflers, rng)


def _empty_counts() -> dict[str, dict[str, int]]:
    return {edge_class: {} for edge_class in EDGE_CLASSES}


class _Round:
    """Shared plumbing for one round: transport, log, counters, drops."""

    def __init__(self, config: RoundConfig):
        self.config = config
        self.owns_transport = config.transport is None
        self.transport = config.transport or make_transport(config.transport_kind)
        self.log: list[Envelope] | None = [] if config.keep_log else None
        self.counts = _empty_counts()
        self.drop_rng = _stream(config.seed, _TAG_DROP)
        self.dropped: list[int] = []

    def send(self, sender: int, receiver: int, payload: Payload) -> None:
        envelope = Envelope(sender, receiver, payload, timestamp=time.perf_counter())
        edge_class = _EDGE_BY_VARIANT[type(payload)]
        name = type(payload).__name__
        self.counts[edge_class][name] = self.counts[edge_class].get(name, 0) + 1
        if self.log is not None:
            self.log.append(envelope)
        self.transport.send(envelope)

    def drop(self, phase: str, clients: list[int]) -> list[int]:
        survivors = apply_drop_model(phase, clients, self.config.drops, self.drop_rng)
        self.dropped.extend(sorted(set(clients) - set(survivors)))
        return survivors

    def close(self) -> None:
        if self.owns_transport:
            self.transport.close()

    def result(
        self,
        mode: str,
        k: int | None,
        metrics: Metrics | None,
        timing: TimingRecord,
        heads: list[int],
        aborted: bool = False,
        abort_reason: str = "",
    ) -> RoundResult:
        return RoundResult(
            mode=mode,
            k=k,
            seed=self.config.seed,
            metrics=metrics,
            timing=timing,
            message_counts=self.counts,
            dropped_clients=sorted(set(self.dropped)),
            heads=heads,
            aborted=aborted,
            abort_reason=abort_reason,
            message_log=self.log,
        )


def _node(user_id: int) -> int:
    return user_id + 1


def run_flaps_round(config: RoundConfig) -> RoundResult:
    """Run the clustered round: poll, cluster, report, train at heads,
    aggregate privatized weights, evaluate.

    Raises RoundAborted when no client answers the poll or every cluster
    head vanishes before its members' data arrives.
    """
    seed = config.seed
    ctx = _Round(config)
    try:
        shard_by_uid = {s.user_id: s for s in config.shards}
        all_uids = [s.user_id for s in config.shards]

        # phase 1: ready poll, budget, clustering
        tick = time.perf_counter()
        for uid in all_uids:
            ctx.send(SERVER_ID, _node(uid), ReadyQuery())
        ready = ctx.drop("ready", all_uids)
        for uid in ready:
            ctx.transport.receive(_node(uid), 1)  # consume the poll
            ctx.send(_node(uid), SERVER_ID, ReadyAck())
        if len(ready) < 2:
            raise RoundAborted(
                "fewer than two clients answered the ready poll",
                ctx.result("flaps", config.k, None, TimingRecord(), [], True,
                           "fewer than two clients answered the ready poll"),
            )
        ctx.transport.receive(SERVER_ID, len(ready))
        k = config.k if config.k is not None else choose_budget(_stream(seed, _TAG_BUDGET))
        features = client_features([shard_by_uid[uid] for uid in ready])
        k = min(k, len(ready), len(np.unique(features, axis=0)))
        for uid in ready:
            ctx.send(SERVER_ID, _node(uid), BudgetBroadcast(k=k))
        assignment = kmeans(features, k, seed=_subseed(seed, _TAG_KMEANS))
        head_uids = [ready[i] for i in assignment.heads]
        cluster_of = {uid: int(assignment.labels[i]) for i, uid in enumerate(ready)}
        for uid in ready:
            head = head_uids[cluster_of[uid]]
            ctx.send(SERVER_ID, _node(uid), ClusterAssign(cluster_id=cluster_of[uid], head_id=_node(head)))
        t1 = time.perf_counter() - tick

        # phase 2: per-client shuffled data reports to cluster heads
        tick = time.perf_counter()
        codecs = fit_report_codecs(config.shards)
        reporters = ctx.drop("report", ready)
        live_heads = [uid for uid in head_uids if uid in reporters]
        if not live_heads:
            raise RoundAborted(
                "every cluster head dropped before data delivery",
                ctx.result("flaps", k, None, TimingRecord(), [], True,
                           "every cluster head dropped before data delivery"),
            )
        own_reports: dict[int, ShuffledReport] = {}
        senders_per_head: dict[int, int] = {uid: 0 for uid in live_heads}
        for uid in reporters:
            ctx.transport.receive(_node(uid), 2)  # consume budget + assignment
            head = head_uids[cluster_of[uid]]
            shard = replace(shard_by_uid[uid], cluster_id=cluster_of[uid])
            report = build_data_report(shard, codecs, config.n_shufflers, _stream(seed, _TAG_REPORT, uid))
            if uid == head:
                own_reports[uid] = report
            elif head in live_heads:
                ctx.send(_node(uid), _node(head), DataReport(report=report))
                senders_per_head[head] += 1
            # members of a headless cluster have nowhere to send
        reports_at_head: dict[int, list[ShuffledReport]] = {}
        for uid in live_heads:
            arrived = ctx.transport.receive(_node(uid), senders_per_head[uid])
            reports_at_head[uid] = [own_reports[uid]] + [e.payload.report for e in arrived]
        t2 = time.perf_counter() - tick

        # phase 3: heads merge, download the model, train, upload weights
        survivors = ctx.drop("train", [uid for uid in reporters if uid not in live_heads])
        global_init = init_model(config.arch, seed=_subseed(seed, _TAG_INIT))
        durations = []
        for uid in live_heads:
            tick = time.perf_counter()
            ctx.send(SERVER_ID, _node(uid), ModelDownload(params=global_init))
            download = ctx.transport.receive(_node(uid), 1)[0].payload.params
            indices = merge_data_reports(reports_at_head[uid])
            local = config.train.subset(indices)
            outcome = train_until_converged(
                download, local.features, local.labels, config.train_config,
                _stream(seed, _TAG_TRAIN, uid),
            )
            report = weight_report(
                outcome.params.flatten(), cluster_of[uid], len(indices),
                _stream(seed, _TAG_UPLOAD, uid),
            )
            ctx.send(_node(uid), SERVER_ID, WeightReport(report=report))
            durations.append(time.perf_counter() - tick)
        t3 = fmean(durations)

        # phase 4: aggregate privatized weights, broadcast, evaluate
        tick = time.perf_counter()
        uploads = ctx.transport.receive(SERVER_ID, len(live_heads))
        uploads.sort(key=lambda e: e.sender)
        entries = aggregate_weight_reports([e.payload.report for e in uploads])
        if not entries:
            raise RoundAborted(
                "no valid weight report survived aggregation",
                ctx.result("flaps", k, None, TimingRecord(), live_heads, True,
                           "no valid weight report survived aggregation"),
            )
        fed = fed_avg(entries)
        global_model = ModelParams.unflatten(config.arch, fed.params)
        survivors = ctx.drop("aggregate", survivors)
        for uid in live_heads + survivors:
            ctx.send(SERVER_ID, _node(uid), GlobalUpdate(weights=fed))
            ctx.transport.receive(_node(uid), 1)
        metrics = evaluate(global_model, config.test.features, config.test.labels)
        t4 = time.perf_counter() - tick

        return ctx.result("flaps", k, metrics, TimingRecord.sequential(t1, t2, t3, t4), live_heads)
    finally:
        ctx.close()


def run_fl_baseline(config: RoundConfig) -> RoundResult:
    """Plain federated round: every client trains on its own shard and the
    server averages all of them. No poll, no clustering, no drop model."""
    seed = config.seed
    ctx = _Round(config)
    try:
        uids = [s.user_id for s in config.shards]
        global_init = init_model(config.arch, seed=_subseed(seed, _TAG_INIT))
        durations = []
        for shard in config.shards:
            tick = time.perf_counter()
            ctx.send(SERVER_ID, _node(shard.user_id), ModelDownload(params=global_init))
            download = ctx.transport.receive(_node(shard.user_id), 1)[0].payload.params
            local = config.train.subset(shard.indices())
            outcome = train_until_converged(
                download, local.features, local.labels, config.train_config,
                _stream(seed, _TAG_TRAIN, shard.user_id),
            )
            report = weight_report(
                outcome.params.flatten(), shard.user_id, shard.count,
                _stream(seed, _TAG_UPLOAD, shard.user_id),
            )
            ctx.send(_node(shard.user_id), SERVER_ID, WeightReport(report=report))
            durations.append(time.perf_counter() - tick)
        t3 = fmean(durations)

        tick = time.perf_counter()
        uploads = ctx.transport.receive(SERVER_ID, len(uids))
        uploads.sort(key=lambda e: e.sender)
        entries = aggregate_weight_reports([e.payload.report for e in uploads])
        fed = fed_avg(entries)
        global_model = ModelParams.unflatten(config.arch, fed.params)
        for uid in uids:
            ctx.send(SERVER_ID, _node(uid), GlobalUpdate(weights=fed))
            ctx.transport.receive(_node(uid), 1)
        metrics = evaluate(global_model, config.test.features, config.test.labels)
        t4 = time.perf_counter() - tick

        return ctx.result("fl", None, metrics, TimingRecord.sequential(0.0, 0.0, t3, t4), [])
    finally:
        ctx.close()


def run_central_baseline(config: RoundConfig) -> RoundResult:
    """Train one model on the pooled training set; no messages at all."""
    seed = config.seed
    ctx = _Round(config)
    try:
        tick = time.perf_counter()
        params = init_model(config.arch, seed=_subseed(seed, _TAG_INIT))
        outcome = train_until_converged(
            params, config.train.features, config.train.labels, config.train_config,
            _stream(seed, _TAG_TRAIN, SERVER_ID),
        )
        t3 = time.perf_counter() - tick
        tick = time.perf_counter()
        metrics = evaluate(outcome.params, config.test.features, config.test.labels)
        t4 = time.perf_counter() - tick
        return ctx.result("central", None, metrics, TimingRecord.sequential(0.0, 0.0, t3, t4), [])
    finally:
        ctx.close()


_RUNNERS = {
    "flaps": run_flaps_round,
    "fl": run_fl_baseline,
    "central": run_central_baseline,
}


def run_round(mode: str, config: RoundConfig) -> RoundResult:
    """Dispatch one round by mode name."""
    if mode not in _RUNNERS:
        raise ValueError(f"unknown mode '{mode}', expected one of {MODES}")
    return _RUNNERS[mode](config)


def restart_round(previous: RoundResult, config: RoundConfig) -> RoundResult:
    """Re-run an aborted round with per-attempt reseeding.

    Attempt m draws its master seed from (seed, attempt tag, m), so a retry
    never replays the original stream. Raises RoundFailed once the attempt
    budget is spent.
    """
    if not previous.aborted:
        raise ValueError("previous round did not abort; nothing to restart")
    reason = previous.abort_reason
    for attempt in range(previous.attempts + 1, config.max_attempts + 1):
        if config.retry_delay:
            time.sleep(config.retry_delay)
        retry = replace(config, seed=_subseed(config.seed, _TAG_ATTEMPT, attempt))
        try:
            result = run_flaps_round(retry)
        except RoundAborted as aborted:
            reason = aborted.result.abort_reason
            continue
        result.attempts = attempt
        result.seed = config.seed
        return result
    raise RoundFailed(
        f"gave up after {config.max_attempts} attempts; last abort: {reason}"
    )


def count_messages(result: RoundResult) -> dict[str, dict[str, int]]:
    """Tally a round's message log by edge class and variant."""
    if result.message_log is None:
        raise ValueError("round was run without a message log")
    counts = _empty_counts()
    for envelope in result.message_log:
        edge_class = _EDGE_BY_VARIANT[type(envelope.payload)]
        name = type(envelope.payload).__name__
        counts[edge_class][name] = counts[edge_class].get(name, 0) + 1
    return counts
