"""Protocol messages and their length-prefixed binary frames.

Every message travels as: 1-byte variant tag, 4-byte big-endian sender id,
4-byte big-endian receiver id, 8-byte big-endian payload length, payload.
Both transports use exactly this encoding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ara import FedWeights
from .buds import ShuffledReport, deserialize_report, serialize_report
from .learning import ModelParams, params_from_bytes, params_to_bytes

HEADER_SIZE = 17
SERVER_ID = 0


@dataclass(frozen=True)
class ReadyQuery:
    """Server asks a client whether it can join the round."""


@dataclass(frozen=True)
class ReadyAck:
    """Client confirms participation."""


@dataclass(frozen=True)
class BudgetBroadcast:
    k: int


@dataclass(frozen=True)
class ClusterAssign:
    cluster_id: int
    head_id: int


@dataclass(frozen=True)
class DataReport:
    report: ShuffledReport


@dataclass(frozen=True)
class ModelDownload:
    params: ModelParams


@dataclass(frozen=True)
class WeightReport:
    report: ShuffledReport


@dataclass(frozen=True)
class GlobalUpdate:
    weights: FedWeights


Payload = (
    ReadyQuery | ReadyAck | BudgetBroadcast | ClusterAssign
    | DataReport | ModelDownload | WeightReport | GlobalUpdate
)

_TAGS: dict[type, int] = {
    ReadyQuery: 1,
    ReadyAck: 2,
    BudgetBroadcast: 3,
    ClusterAssign: 4,
    DataReport: 5,
    ModelDownload: 6,
    WeightReport: 7,
    GlobalUpdate: 8,
}
_BY_TAG = {tag: cls for cls, tag in _TAGS.items()}


@dataclass
class Envelope:
    """One message in flight; the timestamp is local, never on the wire."""

    sender: int
    receiver: int
    payload: Payload
    timestamp: float = 0.0

    @property
    def variant(self) -> str:
        return type(self.payload).__name__


def _encode_payload(payload: Payload) -> bytes:
    if isinstance(payload, (ReadyQuery, ReadyAck)):
        return b""
    if isinstance(payload, BudgetBroadcast):
        return struct.pack(">I", payload.k)
    if isinstance(payload, ClusterAssign):
        return struct.pack(">II", payload.cluster_id, payload.head_id)
    if isinstance(payload, (DataReport, WeightReport)):
        return serialize_report(payload.report)
    if isinstance(payload, ModelDownload):
        return params_to_bytes(payload.params)
    if isinstance(payload, GlobalUpdate):
        vector = np.asarray(payload.weights.params, dtype=np.float64)
        return (
            struct.pack(">QI", payload.weights.total_examples, len(vector))
            + vector.astype(">f8").tobytes()
        )
    raise ValueError(f"cannot encode payload type {type(payload).__name__}")


def _decode_payload(tag: int, data: bytes) -> Payload:
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise ValueError(f"unknown message tag 0x{tag:02x}")
    if cls in (ReadyQuery, ReadyAck):
        if data:
            raise ValueError(f"{cls.__name__} carries no payload")
        return cls()
    if cls is BudgetBroadcast:
        (k,) = struct.unpack(">I", data)
        return BudgetBroadcast(k=k)
    if cls is ClusterAssign:
        cluster_id, head_id = struct.unpack(">II", data)
        return ClusterAssign(cluster_id=cluster_id, head_id=head_id)
    if cls is DataReport:
        return DataReport(report=deserialize_report(data))
    if cls is WeightReport:
        return WeightReport(report=deserialize_report(data))
    if cls is ModelDownload:
        return ModelDownload(params=params_from_bytes(data))
    total, length = struct.unpack_from(">QI", data, 0)
    expected = 12 + 8 * length
    if len(data) != expected:
        raise ValueError(f"global update payload: expected {expected} bytes, got {len(data)}")
    vector = np.frombuffer(data, dtype=">f8", count=length, offset=12).astype(np.float64)
    return GlobalUpdate(weights=FedWeights(params=vector, total_examples=int(total)))


def encode_message(envelope: Envelope) -> bytes:
    payload = _encode_payload(envelope.payload)
    header = struct.pack(
        ">BIIQ", _TAGS[type(envelope.payload)], envelope.sender, envelope.receiver, len(payload)
    )
    return header + payload


def parse_header(header: bytes) -> tuple[int, int, int, int]:
    """Split a frame header into (tag, sender, receiver, payload length)."""
    if len(header) != HEADER_SIZE:
        raise ValueError(f"frame header must be {HEADER_SIZE} bytes, got {len(header)}")
    tag, sender, receiver, length = struct.unpack(">BIIQ", header)
    return tag, sender, receiver, length


def decode_message(data: bytes) -> Envelope:
    if len(data) < HEADER_SIZE:
        raise ValueError(f"frame shorter than header: {len(data)} bytes")
    tag, sender, receiver, length = parse_header(data[:HEADER_SIZE])
    payload = data[HEADER_SIZE:]
    if len(payload) != length:
        raise ValueError(f"payload length {len(payload)} != header claim {length}")
    try:
        decoded = _decode_payload(tag, payload)
    except struct.error as exc:
        raise ValueError(f"malformed payload for tag 0x{tag:02x}: {exc}") from None
    return Envelope(sender=sender, receiver=receiver, payload=decoded)
