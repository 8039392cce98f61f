"""Wire format and transport tests."""

import struct

import numpy as np
import pytest

from flaps.ara import FedWeights
from flaps.buds import weight_report
from flaps.learning import ModelArch, init_model
from flaps.messages import (
    HEADER_SIZE,
    BudgetBroadcast,
    ClusterAssign,
    DataReport,
    Envelope,
    GlobalUpdate,
    ModelDownload,
    ReadyAck,
    ReadyQuery,
    WeightReport,
    decode_message,
    encode_message,
)
from flaps.transport import SimTransport, TcpTransport, TransportError, make_transport


def sample_report(seed=0):
    return weight_report(np.arange(6.0), 1, 12, np.random.default_rng(seed))


def all_payloads():
    model = init_model(ModelArch(4, 3, hidden=(2,)), seed=1)
    return [
        ReadyQuery(),
        ReadyAck(),
        BudgetBroadcast(k=10),
        ClusterAssign(cluster_id=2, head_id=7),
        DataReport(report=sample_report(2)),
        ModelDownload(params=model),
        WeightReport(report=sample_report(3)),
        GlobalUpdate(weights=FedWeights(np.linspace(-1, 1, 19), 240)),
    ]


def assert_payload_equal(a, b):
    assert type(a) is type(b)
    if isinstance(a, (DataReport, WeightReport)):
        assert a.report.plan_digest == b.report.plan_digest
        assert a.report.table.rows == b.report.table.rows
        assert a.report.table.columns == b.report.table.columns
    elif isinstance(a, ModelDownload):
        assert a.params.arch == b.params.arch
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())
    elif isinstance(a, GlobalUpdate):
        assert a.weights.total_examples == b.weights.total_examples
        np.testing.assert_array_equal(a.weights.params, b.weights.params)
    else:
        assert a == b


class TestCodec:
    def test_every_variant_round_trips(self):
        for payload in all_payloads():
            env = Envelope(sender=3, receiver=9, payload=payload)
            back = decode_message(encode_message(env))
            assert back.sender == 3
            assert back.receiver == 9
            assert_payload_equal(back.payload, payload)

    def test_frame_layout(self):
        env = Envelope(sender=0, receiver=3, payload=BudgetBroadcast(k=5))
        frame = encode_message(env)
        assert frame[0] == 3  # budget broadcast tag
        assert struct.unpack(">I", frame[1:5]) == (0,)
        assert struct.unpack(">I", frame[5:9]) == (3,)
        assert struct.unpack(">Q", frame[9:17]) == (4,)
        assert struct.unpack(">I", frame[17:21]) == (5,)
        assert len(frame) == HEADER_SIZE + 4

    def test_empty_payload_frame(self):
        frame = encode_message(Envelope(1, 0, ReadyAck()))
        assert len(frame) == HEADER_SIZE
        assert struct.unpack(">Q", frame[9:17]) == (0,)

    def test_unknown_tag_rejected(self):
        frame = bytearray(encode_message(Envelope(0, 1, ReadyQuery())))
        frame[0] = 99
        with pytest.raises(ValueError, match="tag"):
            decode_message(bytes(frame))

    def test_truncated_frame_rejected(self):
        frame = encode_message(Envelope(0, 1, BudgetBroadcast(k=2)))
        with pytest.raises(ValueError, match="length"):
            decode_message(frame[:-2])

    def test_short_header_rejected(self):
        with pytest.raises(ValueError, match="header"):
            decode_message(b"\x01\x02")

    def test_timestamp_not_on_wire(self):
        env = Envelope(4, 5, ReadyQuery(), timestamp=123.456)
        back = decode_message(encode_message(env))
        assert back.timestamp == 0.0


class TestSimTransport:
    def test_fifo_delivery(self):
        transport = SimTransport()
        for k in (3, 5, 7):
            transport.send(Envelope(0, 1, BudgetBroadcast(k=k)))
        got = transport.receive(1, 3)
        assert [e.payload.k for e in got] == [3, 5, 7]
        assert all(e.timestamp > 0 for e in got)

    def test_shortfall_raises(self):
        transport = SimTransport()
        transport.send(Envelope(0, 1, ReadyQuery()))
        with pytest.raises(TransportError, match="wanted 2"):
            transport.receive(1, 2)

    def test_pending_counts(self):
        transport = SimTransport()
        assert transport.pending(4) == 0
        transport.send(Envelope(0, 4, ReadyQuery()))
        assert transport.pending(4) == 1


class TestTcpTransport:
    def test_routes_between_nodes(self):
        transport = TcpTransport()
        try:
            for payload in all_payloads():
                transport.send(Envelope(sender=2, receiver=6, payload=payload))
            got = transport.receive(6, len(all_payloads()))
            for sent, received in zip(all_payloads(), got):
                assert received.sender == 2
                assert_payload_equal(received.payload, sent)
        finally:
            transport.close()

    def test_send_before_receiver_registers(self):
        transport = TcpTransport()
        try:
            transport.send(Envelope(0, 42, BudgetBroadcast(k=9)))
            got = transport.receive(42, 1)
            assert got[0].payload.k == 9
        finally:
            transport.close()

    def test_timeout_reports_shortfall(self):
        transport = TcpTransport()
        try:
            transport.send(Envelope(0, 5, ReadyQuery()))
            with pytest.raises(TransportError, match="wanted 2"):
                transport.receive(5, 2, timeout=0.3)
        finally:
            transport.close()


class TestMakeTransport:
    def test_builds_both_kinds(self):
        sim = make_transport("sim")
        assert isinstance(sim, SimTransport)
        tcp = make_transport("tcp")
        try:
            assert isinstance(tcp, TcpTransport)
        finally:
            tcp.close()

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown transport"):
            make_transport("pigeon")
