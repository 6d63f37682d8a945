"""Primitive-level checks: hashing, signatures, AEAD, sharing, PRG."""

import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2

from teebft import crypto
from teebft.crypto import (
    AuthenticationFailure, DuplicateShareIndex, Prg, Share, SHARE_PRIME,
    WrongShareCount, digest, get_provider, random_secret, reconstruct,
    share_secret,
)

# Published SHA-256 vector for the empty input.
SHA256_EMPTY = bytes.fromhex(
    "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
)


def independent_reconstruct(shares, prime):
    """Textbook Lagrange interpolation at x=0, written separately on
    purpose so the library result is checked against a second route."""
    total = 0
    for xi, yi in shares:
        num = den = 1
        for xj, _ in shares:
            if xj == xi:
                continue
            num = (num * (0 - xj)) % prime
            den = (den * (xi - xj)) % prime
        total = (total + yi * num * pow(den, prime - 2, prime)) % prime
    return total


def test_hash_empty_vector():
    assert digest(b"") == SHA256_EMPTY
    assert digest(b"") == hashlib.sha256(b"").digest()


def test_hash_deterministic_and_sensitive():
    rng = Prg(b"hash-sensitivity")
    for _ in range(10_000):
        x = rng.next_bytes(rng.randrange(64) + 1)
        d = digest(x)
        assert d == digest(x)
        flip = rng.randrange(len(x) * 8)
        mutated = bytearray(x)
        mutated[flip // 8] ^= 1 << (flip % 8)
        assert digest(bytes(mutated)) != d


@pytest.mark.parametrize("name", ["sim", "real"])
def test_sign_roundtrip_and_bitflips(name):
    prov = get_provider(name)
    sk, pk = prov.keygen(b"seed-A")
    msg = digest(b"message")
    sig = prov.sign(sk, msg)
    assert prov.verify(pk, msg, sig)
    # every single-bit corruption of the message must be rejected
    for bit in range(len(msg) * 8):
        bad = bytearray(msg)
        bad[bit // 8] ^= 1 << (bit % 8)
        assert not prov.verify(pk, bytes(bad), sig)
    # corrupt signatures rejected too (sample of bit positions)
    for bit in range(0, len(sig) * 8, 7):
        bad = bytearray(sig)
        bad[bit // 8] ^= 1 << (bit % 8)
        assert not prov.verify(pk, msg, bytes(bad))
    _, pk2 = prov.keygen(b"seed-B")
    assert not prov.verify(pk2, msg, sig)


@pytest.mark.parametrize("name", ["sim", "real"])
def test_sign_deterministic(name):
    prov = get_provider(name)
    sk, _ = prov.keygen(b"seed-A")
    assert prov.sign(sk, b"x") == prov.sign(sk, b"x")


@pytest.mark.parametrize("name", ["sim", "real"])
def test_aead_roundtrip_and_tamper(name):
    prov = get_provider(name)
    key = digest(b"k")[:16]
    pt = b"the quick brown fox"
    ct = prov.encrypt(key, pt, Prg(b"nonce-seed"))
    assert prov.decrypt(key, ct) == pt
    for bit in range(len(ct.body) * 8):
        bad = bytearray(ct.body)
        bad[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(AuthenticationFailure):
            prov.decrypt(key, crypto.Ciphertext(ct.nonce, bytes(bad)))
    with pytest.raises(AuthenticationFailure):
        prov.decrypt(digest(b"other")[:16], ct)


def test_aead_deterministic_given_rng():
    prov = get_provider("sim")
    key = digest(b"k")[:16]
    a = prov.encrypt(key, b"payload", Prg(b"s"))
    b = prov.encrypt(key, b"payload", Prg(b"s"))
    assert (a.nonce, a.body) == (b.nonce, b.body)


def test_share_exhaustive_small_configs():
    """Every f+1 subset reconstructs; library agrees with the textbook route."""
    from itertools import combinations

    rng = Prg(b"shamir-exhaustive")
    for n in range(2, 8):
        for f in range(1, n):
            secret = random_secret(rng)
            shares = share_secret(secret, f, n, rng)
            for subset in combinations(shares, f + 1):
                got = reconstruct(list(subset), f + 1)
                assert got == secret
                ref = independent_reconstruct(
                    [(s.index, s.value) for s in subset], SHARE_PRIME)
                assert ref == secret


def test_share_errors():
    rng = Prg(b"shamir-errors")
    shares = share_secret(12345, 1, 3, rng)
    with pytest.raises(DuplicateShareIndex):
        reconstruct([shares[0], shares[0]], 2)
    with pytest.raises(WrongShareCount):
        reconstruct([shares[0]], 2)
    with pytest.raises(WrongShareCount):
        reconstruct(list(shares), 2)
    with pytest.raises(crypto.CryptoError):
        share_secret(0, 1, 3, rng)
    with pytest.raises(crypto.CryptoError):
        share_secret(SHARE_PRIME, 1, 3, rng)


def test_share_hiding_against_forgeries():
    """f real shares plus one adversarial share: the reconstruction must
    not land on the secret.  With a 127-bit field, expect zero hits."""
    rng = Prg(b"hiding")
    hits = 0
    for _ in range(10_000):
        secret = random_secret(rng)
        shares = share_secret(secret, 2, 5, rng)
        forged = Share(shares[2].index, rng.randrange(SHARE_PRIME))
        got = reconstruct([shares[0], shares[1], forged], 3)
        if got == secret:
            hits += 1
    assert hits == 0


def test_secret_range():
    rng = Prg(b"secrets")
    for _ in range(1000):
        s = random_secret(rng)
        assert 0 < s < SHARE_PRIME


@settings(max_examples=60)
@given(
    secret=st.integers(min_value=1, max_value=SHARE_PRIME - 1),
    f=st.integers(min_value=1, max_value=5),
    extra=st.integers(min_value=1, max_value=6),
    seed=st.binary(min_size=1, max_size=8),
)
def test_share_roundtrip_property(secret, f, extra, seed):
    n = 2 * f + extra
    shares = share_secret(secret, f, n, Prg(seed))
    assert reconstruct(shares[-(f + 1):], f + 1) == secret


def test_prg_deterministic_and_seed_sensitive():
    a = Prg(b"seed")
    b = Prg(b"seed")
    assert [a.next_u64() for _ in range(64)] == [b.next_u64() for _ in range(64)]
    c = Prg(b"seed2")
    assert a.fork("x").next_bytes(32) != a.fork("y").next_bytes(32)
    assert Prg(b"seed").next_bytes(64) != c.next_bytes(64)


def test_prg_uniformity_chi_square():
    """next_u64 mod 8 over 1e5 draws, alpha = 0.01."""
    rng = Prg(b"uniformity")
    counts = [0] * 8
    draws = 100_000
    for _ in range(draws):
        counts[rng.next_u64() % 8] += 1
    expected = draws / 8
    stat = sum((c - expected) ** 2 / expected for c in counts)
    assert stat < chi2.ppf(0.99, df=7)


def test_prg_randrange_bounds():
    rng = Prg(b"bounds")
    for n in (1, 2, 3, 7, 100, 2**40):
        for _ in range(50):
            assert 0 <= rng.randrange(n) < n
    with pytest.raises(ValueError):
        rng.randrange(0)
