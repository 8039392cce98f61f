"""Message delivery: an in-memory mailbox fabric and a TCP hub.

Both carry the same binary frames. The simulated transport is the default:
deterministic, ordered, optionally delayed by a fixed-plus-jitter latency.
The TCP transport runs a small localhost hub that routes frames between
per-node socket connections.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from collections import deque

import numpy as np

from .messages import HEADER_SIZE, Envelope, decode_message, encode_message, parse_header


class TransportError(RuntimeError):
    pass


class SimTransport:
    """Deterministic in-process mailboxes, one FIFO queue per node."""

    def __init__(self, latency: float = 0.0, jitter: float = 0.0, seed: int = 0):
        if latency < 0 or jitter < 0:
            raise ValueError("latency and jitter must be non-negative")
        self.latency = latency
        self.jitter = jitter
        self._rng = np.random.default_rng(seed)
        self._mailboxes: dict[int, deque[bytes]] = {}

    def send(self, envelope: Envelope) -> None:
        frame = encode_message(envelope)
        if self.latency or self.jitter:
            time.sleep(self.latency + self.jitter * float(self._rng.uniform()))
        self._mailboxes.setdefault(envelope.receiver, deque()).append(frame)

    def receive(self, node_id: int, count: int, timeout: float = 5.0) -> list[Envelope]:
        box = self._mailboxes.get(node_id, deque())
        if len(box) < count:
            raise TransportError(
                f"node {node_id}: wanted {count} messages, only {len(box)} delivered"
            )
        out = []
        for _ in range(count):
            envelope = decode_message(box.popleft())
            envelope.timestamp = time.perf_counter()
            out.append(envelope)
        return out

    def pending(self, node_id: int) -> int:
        return len(self._mailboxes.get(node_id, deque()))

    def close(self) -> None:
        self._mailboxes.clear()


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


class _Hub:
    """Routes frames between registered node connections."""

    def __init__(self):
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind(("127.0.0.1", 0))
        self._server.listen(512)
        self.address = self._server.getsockname()
        self._lock = threading.Lock()
        self._conns: dict[int, socket.socket] = {}
        self._undelivered: dict[int, list[bytes]] = {}
        self._closing = False
        self._threads: list[threading.Thread] = []
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            reader = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            reader.start()
            self._threads.append(reader)

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            (node_id,) = struct.unpack(">I", _read_exact(conn, 4))
            with self._lock:
                self._conns[node_id] = conn
                backlog = self._undelivered.pop(node_id, [])
                for frame in backlog:
                    conn.sendall(frame)
            while True:
                header = _read_exact(conn, HEADER_SIZE)
                _, _, receiver, length = parse_header(header)
                frame = header + (_read_exact(conn, length) if length else b"")
                self._route(receiver, frame)
        except (TransportError, OSError):
            return

    def _route(self, receiver: int, frame: bytes) -> None:
        with self._lock:
            conn = self._conns.get(receiver)
            if conn is None:
                self._undelivered.setdefault(receiver, []).append(frame)
                return
            conn.sendall(frame)

    def close(self) -> None:
        self._closing = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()


class TcpTransport:
    """One localhost socket per node, frames routed through a hub."""

    def __init__(self, timeout: float = 10.0):
        self._hub = _Hub()
        self._timeout = timeout
        self._sockets: dict[int, socket.socket] = {}

    def _socket_for(self, node_id: int) -> socket.socket:
        sock = self._sockets.get(node_id)
        if sock is None:
            sock = socket.create_connection(self._hub.address, timeout=self._timeout)
            sock.sendall(struct.pack(">I", node_id))
            self._sockets[node_id] = sock
        return sock

    def send(self, envelope: Envelope) -> None:
        self._socket_for(envelope.receiver)  # ensure the receiver can be routed to
        self._socket_for(envelope.sender).sendall(encode_message(envelope))

    def receive(self, node_id: int, count: int, timeout: float | None = None) -> list[Envelope]:
        sock = self._socket_for(node_id)
        sock.settimeout(timeout if timeout is not None else self._timeout)
        out = []
        try:
            for _ in range(count):
                header = _read_exact(sock, HEADER_SIZE)
                _, _, _, length = parse_header(header)
                payload = _read_exact(sock, length) if length else b""
                envelope = decode_message(header + payload)
                envelope.timestamp = time.perf_counter()
                out.append(envelope)
        except socket.timeout:
            raise TransportError(
                f"node {node_id}: wanted {count} messages, got {len(out)} before timeout"
            ) from None
        return out

    def close(self) -> None:
        for sock in self._sockets.values():
            try:
                sock.close()
            except OSError:
                pass
        self._sockets.clear()
        self._hub.close()


def make_transport(kind: str, latency: float = 0.0, jitter: float = 0.0, seed: int = 0):
    """Build a transport by name: 'sim' or 'tcp'."""
    if kind == "sim":
        return SimTransport(latency=latency, jitter=jitter, seed=seed)
    if kind == "tcp":
        return TcpTransport()
    raise ValueError(f"unknown transport '{kind}' (expected 'sim' or 'tcp')")
