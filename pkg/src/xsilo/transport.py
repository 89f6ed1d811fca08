"""Message transports and transport-backed secure-sum rounds.

Parties exchange opaque byte strings through a :class:`Transport`. Two
implementations pass the same protocol tests: in-process queues and loopback
TCP sockets. Delivery is reliable and ordered per sender/receiver pair; a
receive that outlasts its deadline raises :class:`TransportTimeout`, which the
round runners turn into :class:`~xsilo.securesum.IncompleteRound`.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import socket
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .fixedpoint import FixedPointCodec, FixedVector
from .prg import named_rng
from .securesum import (
    AggregateReport,
    IncompleteRound,
    Protocol,
    WireMessage,
    dca_finalize,
    dca_make_shares,
    dca_node_aggregate,
    make_keyrings,
    pairwise_aggregate,
    pairwise_encrypt,
    validate_node_assignment,
)

log = logging.getLogger(__name__)


class TransportTimeout(TimeoutError):
    pass


@dataclass
class TranscriptEntry:
    round: int
    sender: int
    receiver: int
    nbytes: int
    digest: str
    chain: str


@dataclass
class Transcript:
    """Append-only message log whose entries hash-chain to the previous one."""

    entries: list[TranscriptEntry] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=lambda: defaultdict(float))
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, round: int, sender: int, receiver: int, payload: bytes) -> None:
        digest = hashlib.sha256(payload).hexdigest()
        with self._lock:
            prev = self.entries[-1].chain if self.entries else ""
            link = hashlib.sha256(f"{prev}|{round}|{sender}|{receiver}|{len(payload)}|{digest}".encode()).hexdigest()
            self.entries.append(TranscriptEntry(round, sender, receiver, len(payload), digest, link))

    def verify_chain(self) -> bool:
        prev = ""
        for e in self.entries:
            link = hashlib.sha256(f"{prev}|{e.round}|{e.sender}|{e.receiver}|{e.nbytes}|{e.digest}".encode()).hexdigest()
            if link != e.chain:
                return False
            prev = link
        return True

    def add_time(self, phase: str, seconds: float) -> None:
        with self._lock:
            self.timings[phase] += seconds

    def bytes_sent(self, senders: Sequence[int] | None = None) -> int:
        return sum(e.nbytes for e in self.entries if senders is None or e.sender in senders)

    def round_shape(self, round: int) -> list[tuple[int, int, int]]:
        """(sender, receiver, nbytes) per message of a round, in send order."""
        return [(e.sender, e.receiver, e.nbytes) for e in self.entries if e.round == round]


class Endpoint:
    def __init__(self, transport: "Transport", party_id: int):
        self.transport = transport
        self.party_id = party_id

    def send(self, dest: int, payload: bytes, round: int = 0) -> None:
        self.transport._send(self.party_id, dest, payload, round)

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        return self.transport._recv(self.party_id, timeout)


class Transport:
    def __init__(self, transcript: Transcript | None = None):
        self.transcript = transcript if transcript is not None else Transcript()
        self.endpoints: dict[int, Endpoint] = {}
        self.drop: Callable[[int, int, int], bool] | None = None

    def register(self, party_id: int) -> Endpoint:
        if party_id in self.endpoints:
            return self.endpoints[party_id]
        self._open(party_id)
        ep = Endpoint(self, party_id)
        self.endpoints[party_id] = ep
        return ep

    def _send(self, src: int, dest: int, payload: bytes, round: int) -> None:
        if dest not in self.endpoints:
            raise KeyError(f"party {dest} is not registered")
        self.transcript.record(round, src, dest, payload)
        if self.drop is not None and self.drop(src, dest, round):
            log.debug("dropping message %d -> %d in round %d", src, dest, round)
            return
        self._deliver(src, dest, payload)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _open(self, party_id: int) -> None:
        raise NotImplementedError

    def _deliver(self, src: int, dest: int, payload: bytes) -> None:
        raise NotImplementedError

    def _recv(self, party_id: int, timeout: float | None) -> tuple[int, bytes]:
        raise NotImplementedError


class InMemoryTransport(Transport):
    def __init__(self, transcript: Transcript | None = None):
        super().__init__(transcript)
        self._queues: dict[int, queue.Queue] = {}

    def _open(self, party_id: int) -> None:
        self._queues[party_id] = queue.Queue()

    def _deliver(self, src: int, dest: int, payload: bytes) -> None:
        self._queues[dest].put((src, payload))

    def _recv(self, party_id: int, timeout: float | None) -> tuple[int, bytes]:
        try:
            return self._queues[party_id].get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"party {party_id} timed out after {timeout}s") from None


_FRAME = struct.Struct("<IQ")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


class SocketTransport(Transport):
    """Loopback TCP; one listening socket per party, one connection per ordered pair."""

    def __init__(self, transcript: Transcript | None = None, host: str = "127.0.0.1"):
        super().__init__(transcript)
        self.host = host
        self._queues: dict[int, queue.Queue] = {}
        self._listeners: dict[int, socket.socket] = {}
        self._addresses: dict[int, tuple[str, int]] = {}
        self._conns: dict[tuple[int, int], socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._closed = threading.Event()

    def _open(self, party_id: int) -> None:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((self.host, 0))
        srv.listen()
        self._listeners[party_id] = srv
        self._addresses[party_id] = srv.getsockname()
        self._queues[party_id] = queue.Queue()
        t = threading.Thread(target=self._accept_loop, args=(party_id, srv), daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, party_id: int, srv: socket.socket) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            t = threading.Thread(target=self._read_loop, args=(party_id, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _read_loop(self, party_id: int, conn: socket.socket) -> None:
        with conn:
            while not self._closed.is_set():
                try:
                    src, length = _FRAME.unpack(_recv_exact(conn, _FRAME.size))
                    payload = _recv_exact(conn, length)
                except (ConnectionError, OSError):
                    return
                self._queues[party_id].put((src, payload))

    def _connection(self, src: int, dest: int) -> socket.socket:
        with self._conn_lock:
            conn = self._conns.get((src, dest))
            if conn is None:
                conn = socket.create_connection(self._addresses[dest])
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._conns[(src, dest)] = conn
            return conn

    def _deliver(self, src: int, dest: int, payload: bytes) -> None:
        self._connection(src, dest).sendall(_FRAME.pack(src, len(payload)) + payload)

    def _recv(self, party_id: int, timeout: float | None) -> tuple[int, bytes]:
        try:
            return self._queues[party_id].get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"party {party_id} timed out after {timeout}s") from None

    def close(self) -> None:
        self._closed.set()
        for c in self._conns.values():
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
        for s in self._listeners.values():
            s.close()


def make_transport(kind: str, transcript: Transcript | None = None) -> Transport:
    if kind in ("memory", "inmemory"):
        return InMemoryTransport(transcript)
    if kind in ("socket", "tcp"):
        return SocketTransport(transcript)
    raise ValueError(f"unknown transport {kind!r}")


# ---------------------------------------------------------------------------
# Secure-sum rounds over a transport
# ---------------------------------------------------------------------------

# Adversarial hook on a client's outgoing message: (sender, message) -> message
Interceptor = Callable[[int, WireMessage], WireMessage]


def _collect(ep: Endpoint, expected: int, round: int, codec: FixedPointCodec, deadline: float) -> list[WireMessage]:
    got: list[WireMessage] = []
    while len(got) < expected:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise IncompleteRound(f"party {ep.party_id} got {len(got)} of {expected} messages in round {round}")
        try:
            _, data = ep.recv(timeout=remaining)
        except TransportTimeout:
            raise IncompleteRound(
                f"party {ep.party_id} got {len(got)} of {expected} messages in round {round}"
            ) from None
        msg = WireMessage.from_bytes(data, codec)
        if msg.round != round:
            log.warning("party %d discarding stale message for round %d", ep.party_id, msg.round)
            continue
        got.append(msg)
    return got


class SecureSum:
    """Transport-backed secure summation shared by all rounds of a run.

    ``__call__(payloads, round)`` runs one round: each client in ``payloads``
    masks or secret-shares its vector and sends it, the aggregator or compute
    nodes add what they receive, and the master returns the modular sum.
    Phase timings and message sizes accumulate in ``transport.transcript``.
    """

    AGGREGATOR = 1_000_000
    NODE_BASE = 2_000_000

    def __init__(
        self,
        protocol: str,
        party_ids: Sequence[int],
        codec: FixedPointCodec,
        seed: bytes | int,
        transport: Transport | None = None,
        compute_nodes: int = 2,
        group_size: int | None = None,
        node_assignment: Mapping[int, Sequence[int]] | None = None,
        timeout: float = 10.0,
        interceptors: Mapping[int, Interceptor] | None = None,
    ):
        if protocol not in ("pairwise", "dca"):
            raise ValueError(f"unknown protocol {protocol!r}")
        self.protocol = protocol
        self.party_ids = sorted(party_ids)
        self.codec = codec
        self.seed = seed
        self.transport = transport if transport is not None else InMemoryTransport()
        self.M = compute_nodes
        self.timeout = timeout
        self.interceptors = dict(interceptors or {})
        self.endpoints = {i: self.transport.register(i) for i in self.party_ids}
        self.master = self.transport.register(self.AGGREGATOR)
        if protocol == "pairwise":
            self.keyrings = make_keyrings(self.party_ids, seed, group_size)
        else:
            if compute_nodes < 1:
                raise ValueError("DCA needs at least one compute node")
            self.assignment = {i: list(range(compute_nodes)) for i in self.party_ids}
            if node_assignment:
                validate_node_assignment(node_assignment, compute_nodes)
                self.assignment.update({int(k): list(v) for k, v in node_assignment.items()})
            self.nodes = {l: self.transport.register(self.NODE_BASE + l) for l in range(compute_nodes)}
            self.share_rngs = {i: named_rng(seed, "dca-shares", i) for i in self.party_ids}

    @property
    def transcript(self) -> Transcript:
        return self.transport.transcript

    def _timed(self, phase: str, t0: float) -> float:
        t1 = time.perf_counter()
        self.transcript.add_time(phase, t1 - t0)
        return t1

    def _emit(self, ep: Endpoint, dest: int, msg: WireMessage) -> None:
        if ep.party_id in self.interceptors:
            msg = self.interceptors[ep.party_id](ep.party_id, msg)
        ep.send(dest, msg.to_bytes(), msg.round)

    def __call__(self, payloads: Mapping[int, FixedVector], round: int) -> FixedVector:
        missing = set(self.party_ids) - set(payloads)
        if missing:
            raise IncompleteRound(f"no payload from parties {sorted(missing)}")
        if self.protocol == "pairwise":
            return self._pairwise(payloads, round)
        return self._dca(payloads, round)

    def _pairwise(self, payloads: Mapping[int, FixedVector], round: int) -> FixedVector:
        deadline = time.monotonic() + self.timeout
        for i in self.party_ids:
            t0 = time.perf_counter()
            masked = pairwise_encrypt(payloads[i], self.keyrings[i], round)
            t0 = self._timed("mask", t0)
            self._emit(self.endpoints[i], self.AGGREGATOR, WireMessage(Protocol.PAIRWISE, round, i, masked))
            self._timed("transport", t0)
        t0 = time.perf_counter()
        msgs = _collect(self.master, len(self.party_ids), round, self.codec, deadline)
        t0 = self._timed("transport", t0)
        total = pairwise_aggregate([m.payload for m in msgs], expected=len(self.party_ids))
        self._timed("aggregate", t0)
        return total

    def _dca(self, payloads: Mapping[int, FixedVector], round: int) -> FixedVector:
        deadline = time.monotonic() + self.timeout
        expected = defaultdict(int)
        for i in self.party_ids:
            nodes = self.assignment[i]
            t0 = time.perf_counter()
            shares = dca_make_shares(payloads[i], len(nodes), self.share_rngs[i]) if len(nodes) > 1 else None
            t0 = self._timed("mask", t0)
            parts = shares.shares if shares is not None else (payloads[i],)
            for l, share in zip(nodes, parts):
                expected[l] += 1
                self._emit(self.endpoints[i], self.NODE_BASE + l, WireMessage(Protocol.DCA_SHARE, round, i, share, l))
            self._timed("transport", t0)
        for l, ep in self.nodes.items():
            if expected[l] == 0:
                continue
            t0 = time.perf_counter()
            msgs = _collect(ep, expected[l], round, self.codec, deadline)
            t0 = self._timed("transport", t0)
            report = dca_node_aggregate(l, [m.payload for m in msgs], expected[l])
            t0 = self._timed("aggregate", t0)
            ep.send(
                self.AGGREGATOR,
                WireMessage(Protocol.DCA_REPORT, round, self.NODE_BASE + l, report.partial_sum, l).to_bytes(),
                round,
            )
            self._timed("transport", t0)
        active = sum(1 for l in self.nodes if expected[l])
        t0 = time.perf_counter()
        reports = _collect(self.master, active, round, self.codec, deadline)
        t0 = self._timed("transport", t0)
        total = dca_finalize([AggregateReport(m.node, m.payload, 0) for m in reports], M=active)
        self._timed("aggregate", t0)
        return total

    def client_bytes(self) -> int:
        return self.transcript.bytes_sent(self.party_ids)


def plain_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return np.sum(np.stack(list(vectors)), axis=0)
