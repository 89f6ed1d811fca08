import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xsilo.fixedpoint import FixedPointCodec, FixedVector, encode
from xsilo.securesum import IncompleteRound, WireMessage
from xsilo.transport import (
    InMemoryTransport,
    SecureSum,
    SocketTransport,
    Transcript,
    TransportTimeout,
    make_transport,
    plain_sum,
)

CODEC = FixedPointCodec()
R = CODEC.modulus
TRANSPORTS = ["memory", "socket"]


@pytest.fixture(params=TRANSPORTS)
def transport(request):
    t = make_transport(request.param)
    yield t
    t.close()


def oracle(payloads):
    vals = list(payloads.values())
    return [sum(int(v.values[k]) for v in vals) % R for k in range(len(vals[0]))]


def test_loopback_echo_large(transport):
    a, b = transport.register(0), transport.register(1)
    v = FixedVector(np.random.default_rng(0).integers(0, R, 10**6), CODEC)
    data = v.to_bytes()
    a.send(1, data)
    src, got = b.recv(timeout=10)
    assert src == 0 and got == data
    assert FixedVector.from_bytes(got, CODEC) == v


def test_ordered_per_pair(transport):
    a, b = transport.register(0), transport.register(1)
    for k in range(50):
        a.send(1, bytes([k]))
    assert [b.recv(timeout=5)[1][0] for _ in range(50)] == list(range(50))


def test_timeout(transport):
    ep = transport.register(0)
    with pytest.raises(TransportTimeout):
        ep.recv(timeout=0.05)


def test_unregistered_destination(transport):
    with pytest.raises(KeyError):
        transport.register(0).send(99, b"x")


@pytest.mark.parametrize("protocol", ["pairwise", "dca"])
def test_round_matches_oracle(transport, protocol):
    rng = np.random.default_rng(1)
    ids = list(range(10))
    payloads = {i: FixedVector(rng.integers(0, R, 17), CODEC) for i in ids}
    ss = SecureSum(protocol, ids, CODEC, 5, transport=transport, compute_nodes=3)
    for rnd in range(3):
        assert ss(payloads, rnd).values.tolist() == oracle(payloads)


def test_cross_transport_equivalence():
    rng = np.random.default_rng(2)
    payloads = {i: encode(rng.uniform(-3, 3, 64), CODEC) for i in range(10)}
    results, shapes = [], []
    for kind in TRANSPORTS:
        with make_transport(kind) as t:
            ss = SecureSum("pairwise", range(10), CODEC, 7, transport=t)
            results.append(ss(payloads, 0))
            shapes.append([(e.sender, e.receiver, e.nbytes, e.digest) for e in t.transcript.entries])
    assert results[0] == results[1]
    assert shapes[0] == shapes[1]


@pytest.mark.parametrize("protocol", ["pairwise", "dca"])
def test_dropped_message_aborts_within_timeout(transport, protocol):
    payloads = {i: encode([1.0, 2.0], CODEC) for i in range(4)}
    ss = SecureSum(protocol, range(4), CODEC, 0, transport=transport, timeout=0.3)
    transport.drop = lambda src, dest, rnd: src == 2
    t0 = time.monotonic()
    with pytest.raises(IncompleteRound):
        ss(payloads, 0)
    assert time.monotonic() - t0 < 2.0


def test_missing_payload_aborts():
    ss = SecureSum("pairwise", range(3), CODEC, 0)
    with pytest.raises(IncompleteRound):
        ss({0: encode([1.0], CODEC), 1: encode([1.0], CODEC)}, 0)


def test_stale_round_messages_are_discarded():
    t = InMemoryTransport()
    ss = SecureSum("pairwise", range(2), CODEC, 0, transport=t)
    stale = WireMessage(1, 99, 0, encode([5.0], CODEC))
    ss.endpoints[0].send(ss.AGGREGATOR, stale.to_bytes(), 99)
    payloads = {i: encode([1.0], CODEC) for i in range(2)}
    assert ss(payloads, 0).values.tolist() == oracle(payloads)


def test_node_assignment_variant():
    rng = np.random.default_rng(3)
    payloads = {i: FixedVector(rng.integers(0, R, 5), CODEC) for i in range(6)}
    assignment = {0: [0, 1], 1: [1, 2], 2: [0, 2], 3: [3], 4: [0, 1, 2, 3], 5: [2, 3]}
    ss = SecureSum("dca", range(6), CODEC, 0, compute_nodes=4, node_assignment=assignment)
    assert ss(payloads, 0).values.tolist() == oracle(payloads)
    counts = {}
    for e in ss.transcript.entries:
        if e.sender < 6:
            counts[e.sender] = counts.get(e.sender, 0) + 1
    assert counts == {i: len(v) for i, v in assignment.items()}


@settings(max_examples=20)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_round_shapes_do_not_depend_on_payload(n, M, seed):
    rng = np.random.default_rng(seed)
    ss = SecureSum("dca", range(n), CODEC, seed, compute_nodes=M)
    zeros = {i: FixedVector.zeros(8, CODEC) for i in range(n)}
    full = {i: FixedVector(rng.integers(0, R, 8), CODEC) for i in range(n)}
    ss(zeros, 0)
    ss(full, 1)
    strip = lambda shape: [(s, r, b) for s, r, b in shape]
    assert strip(ss.transcript.round_shape(0)) == strip(ss.transcript.round_shape(1))


def test_transcript_chain_detects_edits():
    ss = SecureSum("pairwise", range(3), CODEC, 0)
    ss({i: encode([float(i)], CODEC) for i in range(3)}, 0)
    tr = ss.transcript
    assert tr.verify_chain() and len(tr.entries) == 3
    tr.entries[1].nbytes += 1
    assert not tr.verify_chain()


def test_timings_and_bytes():
    ss = SecureSum("dca", range(4), CODEC, 0, compute_nodes=2)
    ss({i: encode([1.0] * 10, CODEC) for i in range(4)}, 0)
    assert {"mask", "transport", "aggregate"} <= set(ss.transcript.timings)
    # 4 clients x 2 shares x (header 21 + length 4 + 10 words x 4 bytes)
    assert ss.client_bytes() == 4 * 2 * (21 + 4 + 40)


def test_plain_sum_and_factory():
    assert np.array_equal(plain_sum([np.ones(3), np.ones(3)]), 2 * np.ones(3))
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon")
    assert isinstance(make_transport("tcp"), SocketTransport)
    with pytest.raises(ValueError):
        SecureSum("bogus", [0], CODEC, 0)


def test_custom_transcript_is_shared():
    tr = Transcript()
    t = make_transport("memory", tr)
    assert t.transcript is tr
