"""Token list generation by a decryption mixnet.

Every party onion-encrypts its random tokens under all parties' public keys
(party 1 outermost). The parties then take turns, in order, peeling their
layer from every entry and publishing a fresh random permutation. After the
last step the list holds plaintext tokens whose owners only they know.

Parties check after each step that the list size is unchanged and, once the
list is in plaintext, that all their own tokens are present.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

TOKEN_BYTES = 16


class DecryptionFailure(ValueError):
    pass


class TokenCollision(RuntimeError):
    pass


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes = field(repr=False)
    party_id: int = 0


def _random_bytes(n: int, rng: np.random.Generator | None) -> bytes:
    return os.urandom(n) if rng is None else rng.bytes(n)


class PublicKeyScheme(Protocol):
    """Randomized, authenticated public-key encryption."""

    overhead: int

    def generate(self, party_id: int, rng: np.random.Generator | None = None) -> KeyPair: ...

    def encrypt(self, public_key: bytes, plaintext: bytes, rng: np.random.Generator | None = None) -> bytes: ...

    def decrypt(self, secret_key: bytes, ciphertext: bytes) -> bytes: ...


class X25519SealedBox:
    """Ephemeral X25519 + BLAKE2b KDF + ChaCha20-Poly1305.

    Ciphertext is ``ephemeral_pk (32) || aead(plaintext) (len + 16)``.
    """

    overhead = 48

    def generate(self, party_id: int, rng: np.random.Generator | None = None) -> KeyPair:
        sk = X25519PrivateKey.from_private_bytes(_random_bytes(32, rng))
        pk = sk.public_key().public_bytes_raw()
        return KeyPair(pk, sk.private_bytes_raw(), party_id)

    @staticmethod
    def _key(shared: bytes, epk: bytes, pk: bytes) -> bytes:
        return hashlib.blake2b(shared + epk + pk, digest_size=32, person=b"xsilo-sealbox").digest()

    def encrypt(self, public_key: bytes, plaintext: bytes, rng: np.random.Generator | None = None) -> bytes:
        esk = X25519PrivateKey.from_private_bytes(_random_bytes(32, rng))
        epk = esk.public_key().public_bytes_raw()
        shared = esk.exchange(X25519PublicKey.from_public_bytes(public_key))
        key = self._key(shared, epk, public_key)
        return epk + ChaCha20Poly1305(key).encrypt(b"\x00" * 12, plaintext, None)

    def decrypt(self, secret_key: bytes, ciphertext: bytes) -> bytes:
        if len(ciphertext) < self.overhead:
            raise DecryptionFailure("ciphertext too short")
        sk = X25519PrivateKey.from_private_bytes(secret_key)
        epk = ciphertext[:32]
        try:
            shared = sk.exchange(X25519PublicKey.from_public_bytes(epk))
            key = self._key(shared, epk, sk.public_key().public_bytes_raw())
            return ChaCha20Poly1305(key).decrypt(b"\x00" * 12, ciphertext[32:], None)
        except (InvalidTag, ValueError) as exc:
            raise DecryptionFailure("authenticated decryption failed") from exc


class SimulationSealedBox:
    """Hash-only stand-in with the same interface, for large statistical runs.

    The public key is a hash of the secret key and the per-message key is
    derived from the public key and a random nonce, so anyone holding the
    public key can decrypt. Randomization, authentication and layering behave
    like the real scheme; confidentiality does not. Never use outside tests.
    """

    overhead = 32

    def generate(self, party_id: int, rng: np.random.Generator | None = None) -> KeyPair:
        sk = _random_bytes(32, rng)
        return KeyPair(self._public(sk), sk, party_id)

    @staticmethod
    def _public(sk: bytes) -> bytes:
        return hashlib.blake2b(sk, digest_size=32, person=b"xsilo-simpk").digest()

    @staticmethod
    def _stream(key: bytes, n: int) -> bytes:
        out = b""
        block = 0
        while len(out) < n:
            out += hashlib.blake2b(key + struct.pack("<Q", block), digest_size=64).digest()
            block += 1
        return out[:n]

    def encrypt(self, public_key: bytes, plaintext: bytes, rng: np.random.Generator | None = None) -> bytes:
        nonce = _random_bytes(16, rng)
        key = hashlib.blake2b(public_key + nonce, digest_size=32).digest()
        body = bytes(a ^ b for a, b in zip(plaintext, self._stream(key, len(plaintext))))
        tag = hmac.digest(key, nonce + body, "blake2s")[:16]
        return nonce + tag + body

    def decrypt(self, secret_key: bytes, ciphertext: bytes) -> bytes:
        if len(ciphertext) < self.overhead:
            raise DecryptionFailure("ciphertext too short")
        nonce, tag, body = ciphertext[:16], ciphertext[16:32], ciphertext[32:]
        key = hashlib.blake2b(self._public(secret_key) + nonce, digest_size=32).digest()
        if not hmac.compare_digest(tag, hmac.digest(key, nonce + body, "blake2s")[:16]):
            raise DecryptionFailure("authentication tag mismatch")
        return bytes(a ^ b for a, b in zip(body, self._stream(key, len(body))))


DEFAULT_PKE = X25519SealedBox()


@dataclass(frozen=True)
class TokenList:
    entries: tuple[bytes, ...]
    layer: int
    total_count: int

    def __len__(self) -> int:
        return len(self.entries)


class Verdict(str, enum.Enum):
    CLEAN = "clean"
    TAMPERED = "tampered"


@dataclass(frozen=True)
class RoundVerdict:
    verdict: Verdict
    reason: str = ""

    def __bool__(self) -> bool:
        return self.verdict is Verdict.CLEAN


def make_tokens(count: int, rng: np.random.Generator | None = None) -> list[bytes]:
    tokens = [_random_bytes(TOKEN_BYTES, rng) for _ in range(count)]
    if len(set(tokens)) != count:
        raise TokenCollision("duplicate token drawn; aborting setup")
    return tokens


def onion_encrypt(
    token: bytes,
    public_keys: Sequence[bytes],
    pke: PublicKeyScheme = DEFAULT_PKE,
    rng: np.random.Generator | None = None,
) -> bytes:
    """``Enc_k1(Enc_k2(... Enc_kN(token)))``; party 1 peels first."""
    ct = token
    for pk in reversed(public_keys):
        ct = pke.encrypt(pk, ct, rng)
    return ct


def peel(list_: TokenList, secret_key: bytes, pke: PublicKeyScheme = DEFAULT_PKE) -> list[bytes]:
    if list_.layer < 1:
        raise ValueError("list is already fully decrypted")
    return [pke.decrypt(secret_key, e) for e in list_.entries]


def mix_with_permutation(
    list_: TokenList,
    secret_key: bytes,
    rng: np.random.Generator,
    pke: PublicKeyScheme = DEFAULT_PKE,
) -> tuple[TokenList, np.ndarray]:
    """Peel one layer and shuffle; ``out[k] = peeled[perm[k]]``."""
    peeled = peel(list_, secret_key, pke)
    perm = rng.permutation(len(peeled))
    out = TokenList(tuple(peeled[p] for p in perm), list_.layer - 1, list_.total_count)
    return out, perm


def mix_step(
    list_: TokenList,
    secret_key: bytes,
    rng: np.random.Generator,
    pke: PublicKeyScheme = DEFAULT_PKE,
) -> TokenList:
    return mix_with_permutation(list_, secret_key, rng, pke)[0]


def verify_round(list_: TokenList, own_tokens: Sequence[bytes], expected_count: int) -> RoundVerdict:
    if len(list_.entries) != expected_count or list_.total_count != expected_count:
        return RoundVerdict(Verdict.TAMPERED, f"count {len(list_.entries)} != {expected_count}")
    if list_.layer > 0:
        return RoundVerdict(Verdict.CLEAN)
    present = set(list_.entries)
    if len(present) != len(list_.entries):
        return RoundVerdict(Verdict.TAMPERED, "duplicate plaintext tokens")
    missing = sum(1 for t in own_tokens if t not in present)
    if missing:
        return RoundVerdict(Verdict.TAMPERED, f"{missing} own token(s) missing")
    return RoundVerdict(Verdict.CLEAN)


Tamper = Callable[[TokenList, np.random.Generator], TokenList]


def drop_entry(list_: TokenList, rng: np.random.Generator) -> TokenList:
    i = int(rng.integers(len(list_.entries)))
    entries = list_.entries[:i] + list_.entries[i + 1 :]
    return TokenList(entries, list_.layer, list_.total_count)


def substitute_entry(list_: TokenList, rng: np.random.Generator, index: int | None = None) -> TokenList:
    i = int(rng.integers(len(list_.entries))) if index is None else index
    garbage = rng.bytes(len(list_.entries[i]))
    entries = list_.entries[:i] + (garbage,) + list_.entries[i + 1 :]
    return TokenList(entries, list_.layer, list_.total_count)


@dataclass
class MixResult:
    final: TokenList | None
    lists: list[TokenList]
    permutations: list[np.ndarray]
    verdicts: dict[int, list[RoundVerdict]]
    initial_owner: list[int]

    @property
    def tampering_detected(self) -> bool:
        return any(not v for vs in self.verdicts.values() for v in vs)


def run_mixnet(
    tokens: Mapping[int, Sequence[bytes]],
    keypairs: Sequence[KeyPair],
    rngs: Mapping[int, np.random.Generator],
    pke: PublicKeyScheme = DEFAULT_PKE,
    tamper: Mapping[int, Tamper] | None = None,
) -> MixResult:
    """Full token-list protocol over parties ordered as in ``keypairs``.

    ``tamper`` maps a mixer's party id to a deviation applied to the list it
    publishes. A decryption failure at an honest mixer stops the run and is
    reported as a tampering verdict for that mixer.
    """
    tamper = tamper or {}
    order = [kp.party_id for kp in keypairs]
    pks = [kp.public_key for kp in keypairs]
    entries, owners = [], []
    for pid in order:
        for tok in tokens.get(pid, ()):
            entries.append(onion_encrypt(tok, pks, pke, rngs[pid]))
            owners.append(pid)
    n = len(entries)
    current = TokenList(tuple(entries), len(order), n)
    lists, perms = [current], []
    verdicts: dict[int, list[RoundVerdict]] = {pid: [] for pid in order}
    for kp in keypairs:
        try:
            current, perm = mix_with_permutation(current, kp.secret_key, rngs[kp.party_id], pke)
        except DecryptionFailure as exc:
            verdicts[kp.party_id].append(RoundVerdict(Verdict.TAMPERED, f"decryption failure: {exc}"))
            return MixResult(None, lists, perms, verdicts, owners)
        if kp.party_id in tamper:
            current = tamper[kp.party_id](current, rngs[kp.party_id])
        lists.append(current)
        perms.append(perm)
        for pid in order:
            verdicts[pid].append(verify_round(current, tokens.get(pid, ()), n))
        if any(not verdicts[pid][-1] for pid in order):
            return MixResult(current if current.layer == 0 else None, lists, perms, verdicts, owners)
    return MixResult(current, lists, perms, verdicts, owners)


def link_guess_accuracy(result: MixResult, hidden_step: int, guess: np.ndarray) -> float:
    """Fraction of initial entries an observer maps to the right final position.

    The observer knows every permutation except ``hidden_step`` and supplies
    ``guess`` in its place; the score compares the composed guessed mapping to
    the true one.
    """

    def track(perms):
        # position[k] = index of the initial entry sitting at position k
        position = np.arange(len(result.lists[0]))
        for p in perms:
            position = position[p]
        return position

    true = track(result.permutations)
    guessed = list(result.permutations)
    guessed[hidden_step] = guess
    return float(np.mean(track(guessed) == true))


def roster_hash(public_keys: Sequence[bytes]) -> bytes:
    h = hashlib.sha256()
    for pk in public_keys:
        h.update(struct.pack("<I", len(pk)) + pk)
    return h.digest()


_FILE_MAGIC = b"XSTL"
_FILE_HEADER = struct.Struct("<4sBII32s")


def write_token_list(path: str | Path, final: TokenList, public_keys: Sequence[bytes]) -> None:
    """Persist a layer-0 list: header ``(magic, version, n, N, roster hash)`` then tokens."""
    if final.layer != 0:
        raise ValueError("only a fully decrypted list can be persisted")
    if any(len(t) != TOKEN_BYTES for t in final.entries):
        raise ValueError("unexpected token size")
    header = _FILE_HEADER.pack(_FILE_MAGIC, 1, len(final.entries), len(public_keys), roster_hash(public_keys))
    Path(path).write_bytes(header + b"".join(final.entries))


def read_token_list(path: str | Path, public_keys: Sequence[bytes] | None = None) -> TokenList:
    data = Path(path).read_bytes()
    magic, version, n, n_parties, roster = _FILE_HEADER.unpack_from(data, 0)
    if magic != _FILE_MAGIC or version != 1:
        raise ValueError("not a token list file")
    body = data[_FILE_HEADER.size :]
    if len(body) != n * TOKEN_BYTES:
        raise ValueError("token list file is truncated")
    if public_keys is not None and (len(public_keys) != n_parties or roster_hash(public_keys) != roster):
        raise ValueError("token list was generated for a different party roster")
    entries = tuple(body[i * TOKEN_BYTES : (i + 1) * TOKEN_BYTES] for i in range(n))
    return TokenList(entries, 0, n)
