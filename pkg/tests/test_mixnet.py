import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from xsilo.mixnet import (
    TOKEN_BYTES,
    DecryptionFailure,
    SimulationSealedBox,
    TokenList,
    Verdict,
    X25519SealedBox,
    drop_entry,
    make_tokens,
    mix_step,
    mix_with_permutation,
    onion_encrypt,
    read_token_list,
    roster_hash,
    run_mixnet,
    substitute_entry,
    verify_round,
    write_token_list,
)

SCHEMES = [X25519SealedBox(), SimulationSealedBox()]


def setup(n_parties, per_party, pke, seed=0):
    rng = np.random.default_rng(seed)
    keypairs = [pke.generate(i, rng) for i in range(n_parties)]
    tokens = {i: make_tokens(per_party, rng) for i in range(n_parties)}
    rngs = {i: np.random.default_rng(seed * 100 + i) for i in range(n_parties)}
    return keypairs, tokens, rngs


@pytest.mark.parametrize("pke", SCHEMES, ids=lambda p: type(p).__name__)
@given(msg=st.binary(max_size=64))
def test_pke_roundtrip_and_randomized(pke, msg):
    kp = pke.generate(0)
    c1, c2 = pke.encrypt(kp.public_key, msg), pke.encrypt(kp.public_key, msg)
    assert pke.decrypt(kp.secret_key, c1) == msg
    assert c1 != c2
    assert len(c1) == len(msg) + pke.overhead


@pytest.mark.parametrize("pke", SCHEMES, ids=lambda p: type(p).__name__)
def test_tampered_ciphertext_fails(pke):
    kp = pke.generate(0)
    ct = bytearray(pke.encrypt(kp.public_key, b"token"))
    ct[-1] ^= 1
    with pytest.raises(DecryptionFailure):
        pke.decrypt(kp.secret_key, bytes(ct))
    with pytest.raises(DecryptionFailure):
        pke.decrypt(kp.secret_key, b"short")


def test_single_layer_onion():
    pke = X25519SealedBox()
    kp = pke.generate(0)
    tok = make_tokens(1)[0]
    assert pke.decrypt(kp.secret_key, onion_encrypt(tok, [kp.public_key], pke)) == tok


def test_onion_layer_order():
    pke = X25519SealedBox()
    kps = [pke.generate(i) for i in range(3)]
    tok = make_tokens(1)[0]
    onion = onion_encrypt(tok, [k.public_key for k in kps], pke)
    assert onion != onion_encrypt(tok, [k.public_key for k in kps], pke)
    for order in itertools.permutations(range(3)):
        ct = onion
        try:
            for i in order:
                ct = pke.decrypt(kps[i].secret_key, ct)
        except DecryptionFailure:
            assert order != (0, 1, 2)
        else:
            assert order == (0, 1, 2) and ct == tok


def test_single_entry_mix_peels_one_layer():
    pke = X25519SealedBox()
    kp = pke.generate(0)
    inner = b"x" * 16
    lst = TokenList((pke.encrypt(kp.public_key, inner),), 1, 1)
    out = mix_step(lst, kp.secret_key, np.random.default_rng(0), pke)
    assert out.entries == (inner,) and out.layer == 0


def test_corrupted_input_raises():
    pke = X25519SealedBox()
    kp = pke.generate(0)
    with pytest.raises(DecryptionFailure):
        mix_step(TokenList((b"\x00" * 64,), 1, 1), kp.secret_key, np.random.default_rng(0), pke)


@pytest.mark.parametrize("n_parties,per_party", [(1, 3), (3, 4), (5, 2)])
def test_honest_run_clean_and_complete(n_parties, per_party):
    pke = X25519SealedBox()
    keypairs, tokens, rngs = setup(n_parties, per_party, pke)
    res = run_mixnet(tokens, keypairs, rngs, pke)
    assert not res.tampering_detected
    assert all(v.verdict is Verdict.CLEAN for vs in res.verdicts.values() for v in vs)
    n = n_parties * per_party
    assert [len(l) for l in res.lists] == [n] * (n_parties + 1)
    assert [l.layer for l in res.lists] == list(range(n_parties, -1, -1))
    # every onion at a layer has the same length, so sizes leak nothing about owners
    assert all(len({len(e) for e in l.entries}) == 1 for l in res.lists)
    assert sorted(res.final.entries) == sorted(t for ts in tokens.values() for t in ts)
    assert all(len(t) == TOKEN_BYTES for t in res.final.entries)


def test_permutation_bookkeeping():
    pke = SimulationSealedBox()
    keypairs, tokens, rngs = setup(3, 3, pke)
    res = run_mixnet(tokens, keypairs, rngs, pke)
    for k, perm in enumerate(res.permutations):
        peeled = [pke.decrypt(keypairs[k].secret_key, e) for e in res.lists[k].entries]
        assert list(res.lists[k + 1].entries) == [peeled[p] for p in perm]


@pytest.mark.parametrize("mixer", [0, 1, 2])
def test_drop_detected(mixer):
    pke = SimulationSealedBox()
    keypairs, tokens, rngs = setup(3, 3, pke, seed=mixer)
    res = run_mixnet(tokens, keypairs, rngs, pke, {mixer: drop_entry})
    assert res.tampering_detected
    assert res.final is None or len(res.final) != 9
    assert all(vs[-1].verdict is Verdict.TAMPERED for vs in res.verdicts.values())


@pytest.mark.parametrize("mixer", [0, 1, 2])
def test_substitution_detected(mixer):
    pke = SimulationSealedBox()
    keypairs, tokens, rngs = setup(3, 3, pke, seed=10 + mixer)
    res = run_mixnet(tokens, keypairs, rngs, pke, {mixer: substitute_entry})
    assert res.tampering_detected


def test_verify_round_rules():
    toks = make_tokens(3, np.random.default_rng(0))
    assert verify_round(TokenList(tuple(toks), 0, 3), toks[:1], 3)
    assert not verify_round(TokenList(tuple(toks[:2]), 0, 3), [], 3)
    assert not verify_round(TokenList((toks[0], toks[0], toks[1]), 0, 3), [], 3)
    assert not verify_round(TokenList(tuple(toks), 0, 3), [b"\x00" * 16], 3)
    # intermediate layers: count only
    assert verify_round(TokenList(tuple(toks), 2, 3), [b"\x00" * 16], 3)


def test_permutation_uniformity_small():
    pke = SimulationSealedBox()
    kp = pke.generate(0, np.random.default_rng(0))
    inner = [bytes([i]) * 16 for i in range(3)]
    lst = TokenList(tuple(pke.encrypt(kp.public_key, t) for t in inner), 1, 3)
    rng = np.random.default_rng(1)
    counts = {}
    for _ in range(6000):
        _, perm = mix_with_permutation(lst, kp.secret_key, rng, pke)
        counts[tuple(perm)] = counts.get(tuple(perm), 0) + 1
    assert len(counts) == 6
    assert stats.chisquare(list(counts.values())).pvalue > 0.001


def test_token_list_file_roundtrip(tmp_path):
    pke = X25519SealedBox()
    keypairs, tokens, rngs = setup(2, 3, pke)
    res = run_mixnet(tokens, keypairs, rngs, pke)
    pks = [k.public_key for k in keypairs]
    path = tmp_path / "tokens.xstl"
    write_token_list(path, res.final, pks)
    assert read_token_list(path, pks) == res.final
    with pytest.raises(ValueError, match="roster"):
        read_token_list(path, pks[::-1])
    with pytest.raises(ValueError):
        write_token_list(path, res.lists[0], pks)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError, match="truncated"):
        read_token_list(path)


def test_roster_hash_is_order_sensitive():
    assert roster_hash([b"a", b"b"]) != roster_hash([b"b", b"a"])
    assert roster_hash([b"ab"]) != roster_hash([b"a", b"b"])


def test_deterministic_keys_from_rng():
    pke = X25519SealedBox()
    a = pke.generate(0, np.random.default_rng(3))
    b = pke.generate(0, np.random.default_rng(3))
    assert a == b
