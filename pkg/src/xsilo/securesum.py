"""Additively homomorphic secure summation.

Two protocols over :class:`~xsilo.fixedpoint.FixedVector` payloads:

* pairwise masking for a few fat clients: party ``i`` sends
  ``y_i + sum_{j != i} k_ij mod R`` where ``k_ij + k_ji = 0 mod R``, so the
  masks vanish in the aggregate;
* the Distributed Compute Algorithm (DCA) for many thin clients: each client
  splits its payload into ``M`` additive shares, one per compute node, and the
  final aggregator adds the per-node partial sums.

Neither protocol recovers from dropouts. A missing message aborts the round
with :class:`IncompleteRound`.
"""

from __future__ import annotations

import enum
import secrets
import struct
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .fixedpoint import FixedPointCodec, FixedVector, add_mod, negate, sum_mod
from .prg import derive_seed, hash_words

PAIRMASK_DOMAIN = b"xsilo-pairmask"


class IncompleteRound(RuntimeError):
    """Expected protocol messages did not all arrive; the round is aborted."""


class MissingPeerSeed(KeyError):
    pass


class DegeneratePrivacyWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Pairwise masking
# ---------------------------------------------------------------------------


@dataclass
class PairwiseKeyring:
    party_id: int
    pair_seeds: dict[int, bytes]
    round_counter: int = 0
    peers: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.party_id in self.pair_seeds:
            raise ValueError("a party shares no seed with itself")
        if self.peers is None:
            self.peers = tuple(sorted(self.pair_seeds))

    def next_counter(self) -> int:
        c = self.round_counter
        self.round_counter += 1
        return c


def make_keyrings(
    party_ids: Sequence[int],
    master_seed: bytes | int,
    group_size: int | None = None,
) -> dict[int, PairwiseKeyring]:
    """Pre-shared pair seeds standing in for a Diffie-Hellman setup.

    With ``group_size`` set, parties are split into consecutive groups and
    only mask with peers inside their own group.
    """
    ids = sorted(party_ids)
    if group_size is None or group_size >= len(ids):
        groups = [ids]
    else:
        if group_size < 2:
            raise ValueError("group_size must be at least 2")
        groups = [ids[i : i + group_size] for i in range(0, len(ids), group_size)]
        if len(groups) > 1 and len(groups[-1]) < 2:
            groups[-2].extend(groups.pop())
    rings = {}
    for group in groups:
        for i in group:
            seeds = {j: derive_seed(master_seed, "pair", min(i, j), max(i, j)) for j in group if j != i}
            rings[i] = PairwiseKeyring(i, seeds)
    return rings


def pair_mask(seed: bytes, counter: int, length: int, codec: FixedPointCodec) -> np.ndarray:
    """Raw pair keystream reduced mod R (before the sign convention)."""
    if not codec.power_of_two:
        raise ValueError("mask derivation requires a power-of-two modulus")
    return codec.reduce(hash_words(seed, counter, length, PAIRMASK_DOMAIN))


def derive_pairwise_masks(
    keyring: PairwiseKeyring,
    counter: int,
    length: int,
    codec: FixedPointCodec,
    expected_peers: Sequence[int] | None = None,
) -> FixedVector:
    """``sum_{j != i} k_ij mod R``; the larger id of each pair negates its mask."""
    peers = keyring.peers if expected_peers is None else expected_peers
    total = FixedVector.zeros(length, codec)
    for j in peers:
        if j == keyring.party_id:
            continue
        try:
            seed = keyring.pair_seeds[j]
        except KeyError:
            raise MissingPeerSeed(f"party {keyring.party_id} has no seed for peer {j}") from None
        k = FixedVector(pair_mask(seed, counter, length, codec), codec)
        total = add_mod(total, negate(k) if keyring.party_id > j else k)
    return total


def pairwise_encrypt(y: FixedVector, keyring: PairwiseKeyring, counter: int) -> FixedVector:
    return add_mod(y, derive_pairwise_masks(keyring, counter, len(y), y.codec))


def pairwise_aggregate(messages: Sequence[FixedVector], expected: int | None = None) -> FixedVector:
    if not messages:
        raise IncompleteRound("no messages received")
    if expected is not None and len(messages) != expected:
        raise IncompleteRound(f"received {len(messages)} of {expected} messages")
    return sum_mod(messages)


# ---------------------------------------------------------------------------
# Distributed Compute Algorithm
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShareSet:
    shares: tuple[FixedVector, ...]

    def __len__(self) -> int:
        return len(self.shares)

    def reconstruct(self) -> FixedVector:
        return sum_mod(self.shares)


@dataclass(frozen=True)
class AggregateReport:
    node_id: int
    partial_sum: FixedVector
    contributor_count: int


def uniform_words(length: int, codec: FixedPointCodec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform integers on ``[0, R)``; ``rng=None`` draws from the OS CSPRNG."""
    if rng is None:
        if not codec.power_of_two:
            return np.array([secrets.randbelow(codec.modulus) for _ in range(length)], dtype=np.uint64)
        raw = np.frombuffer(secrets.token_bytes(8 * length), dtype="<u8").astype(np.uint64)
        return codec.reduce(raw)
    if codec.power_of_two:
        raw = rng.integers(0, np.iinfo(np.uint64).max, size=length, dtype=np.uint64, endpoint=True)
        return codec.reduce(raw)
    return rng.integers(0, codec.modulus, size=length, dtype=np.uint64)


def dca_make_shares(y: FixedVector, M: int, rng: np.random.Generator | None = None) -> ShareSet:
    """Split ``y`` into ``M`` shares summing to ``y`` mod R.

    Share 1 carries ``y + u_1``; shares ``2..M-1`` are uniform and share ``M``
    is minus the sum of the others' masks.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if M == 1:
        warnings.warn("DCA with a single compute node provides no privacy", DegeneratePrivacyWarning, stacklevel=2)
        return ShareSet((y,))
    codec = y.codec
    masks = [FixedVector(uniform_words(len(y), codec, rng), codec) for _ in range(M - 1)]
    last = negate(sum_mod(masks))
    return ShareSet((add_mod(y, masks[0]), *masks[1:], last))


def dca_node_aggregate(
    node_id: int, messages: Sequence[FixedVector], expected: int | None = None
) -> AggregateReport:
    if not messages:
        raise IncompleteRound(f"node {node_id} received no messages")
    if expected is not None and len(messages) != expected:
        raise IncompleteRound(f"node {node_id} received {len(messages)} of {expected} messages")
    return AggregateReport(node_id, sum_mod(messages), len(messages))


def dca_finalize(reports: Sequence[AggregateReport], M: int | None = None) -> FixedVector:
    if not reports:
        raise IncompleteRound("no compute-node reports")
    if M is not None and len({r.node_id for r in reports}) != M:
        raise IncompleteRound(f"received reports from {len(reports)} of {M} compute nodes")
    return sum_mod([r.partial_sum for r in reports])


def validate_node_assignment(assignment: Mapping[int, Sequence[int]], n_nodes: int) -> None:
    """Client-to-node-subset map for the reduced-fanout DCA variant."""
    for client, nodes in assignment.items():
        if not nodes:
            raise ValueError(f"client {client} is assigned no compute nodes")
        if len(set(nodes)) != len(nodes):
            raise ValueError(f"client {client} has duplicate node assignments")
        if any(not 0 <= l < n_nodes for l in nodes):
            raise ValueError(f"client {client} assigned to an unknown node")


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------


class Protocol(enum.IntEnum):
    PAIRWISE = 1
    DCA_SHARE = 2
    DCA_REPORT = 3
    RESULT = 4
    PLAIN = 5


NO_NODE = 0xFFFFFFFF
_HEADER = struct.Struct("<BQIII")


@dataclass(frozen=True)
class WireMessage:
    """Header ``(protocol u8, round u64, sender u32, node u32, length u32)`` + payload words."""

    protocol: Protocol
    round: int
    sender: int
    payload: FixedVector
    node: int = NO_NODE

    def to_bytes(self) -> bytes:
        return _HEADER.pack(int(self.protocol), self.round, self.sender, self.node, len(self.payload)) + (
            self.payload.to_bytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes, codec: FixedPointCodec) -> "WireMessage":
        protocol, rnd, sender, node, length = _HEADER.unpack_from(data, 0)
        payload, end = FixedVector.read_from(data, codec, _HEADER.size)
        if len(payload) != length or end != len(data):
            raise ValueError("malformed wire message")
        return cls(Protocol(protocol), rnd, sender, payload, node)
