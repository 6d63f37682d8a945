"""Cryptographic primitives: hashing, signatures, AEAD, secret sharing, PRG.

Two interchangeable providers are offered.  The "sim" provider builds
signatures from keyed hashes and AEAD from a hash keystream plus a MAC,
which keeps runs fast and bit-reproducible.  The "real" provider uses
Ed25519 and AES-GCM from the cryptography package.  Both are deterministic
given the caller-supplied randomness, so simulation traces replay exactly.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import NamedTuple

DIGEST_LEN = 32

# Prime field for the share arithmetic: 2**127 - 1 (a Mersenne prime).
# Secrets fit in 16 bytes and reconstruction uses exact integer math.
SHARE_PRIME = (1 << 127) - 1
SECRET_LEN = 16


class CryptoError(Exception):
    """Base class for failures raised by this module."""


class AuthenticationFailure(CryptoError):
    """Ciphertext or signature failed verification."""


class DuplicateShareIndex(CryptoError):
    """Two shares carry the same evaluation point."""


class WrongShareCount(CryptoError):
    """Reconstruction called with a share count other than the threshold."""


def digest(data: bytes) -> bytes:
    """SHA-256 of data; 32 bytes."""
    return hashlib.sha256(data).digest()


class Share(NamedTuple):
    index: int   # evaluation point, 1-based; never 0
    value: int   # field element


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes  # payload with authentication tag appended


class Prg:
    """Deterministic byte stream: SHA-256 over (seed, block counter).

    Independent streams come from distinct seeds; fork() derives a labeled
    child stream so components cannot accidentally share draws.
    """

    def __init__(self, seed: bytes):
        self._seed = bytes(seed)
        self._block = 0
        self._buf = b""

    def fork(self, label: str) -> "Prg":
        return Prg(digest(self._seed + b"/" + label.encode()))

    def next_bytes(self, n: int) -> bytes:
        while len(self._buf) < n:
            block = hashlib.sha256(
                self._seed + self._block.to_bytes(8, "little")
            ).digest()
            self._block += 1
            self._buf += block
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def next_u64(self) -> int:
        return int.from_bytes(self.next_bytes(8), "little")

    def randrange(self, n: int) -> int:
        """Uniform in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("empty range")
        bits = max(n - 1, 1).bit_length()
        nbytes = (bits + 7) // 8
        limit = (1 << (8 * nbytes)) - ((1 << (8 * nbytes)) % n)
        while True:
            x = int.from_bytes(self.next_bytes(nbytes), "little")
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]


# ---------------------------------------------------------------------------
# Shamir sharing over GF(SHARE_PRIME)

def share_secret(secret: int, f: int, n: int, rng: Prg) -> list[Share]:
    """Split secret with a degree-f polynomial; any f+1 shares reconstruct."""
    if not 0 < secret < SHARE_PRIME:
        raise CryptoError("secret out of field range")
    if not 0 <= f < n:
        raise CryptoError("need 0 <= f < n")
    coeffs = [secret] + [rng.randrange(SHARE_PRIME) for _ in range(f)]
    shares = []
    for x in range(1, n + 1):
        acc = 0
        for coef in reversed(coeffs):
            acc = (acc * x + coef) % SHARE_PRIME
        shares.append(Share(x, acc))
    return shares


def reconstruct(shares: list[Share], threshold: int) -> int:
    """Lagrange interpolation at zero from exactly `threshold` shares."""
    if len(shares) != threshold:
        raise WrongShareCount(f"got {len(shares)}, need {threshold}")
    seen = set()
    for s in shares:
        if s.index in seen:
            raise DuplicateShareIndex(f"index {s.index} repeated")
        seen.add(s.index)
    acc = 0
    for i, si in enumerate(shares):
        num, den = 1, 1
        for j, sj in enumerate(shares):
            if i == j:
                continue
            num = (num * (-sj.index)) % SHARE_PRIME
            den = (den * (si.index - sj.index)) % SHARE_PRIME
        acc = (acc + si.value * num * pow(den, -1, SHARE_PRIME)) % SHARE_PRIME
    return acc


def random_secret(rng: Prg) -> int:
    """Uniform nonzero field element."""
    return 1 + rng.randrange(SHARE_PRIME - 1)


def secret_to_bytes(secret: int) -> bytes:
    return secret.to_bytes(SECRET_LEN, "big")


def secret_from_bytes(raw: bytes) -> int:
    return int.from_bytes(raw, "big")


# ---------------------------------------------------------------------------
# Providers

class SimCrypto:
    """Keyed-hash stand-ins with real-crypto shapes.

    Signature: HMAC-SHA256 where the "public" key equals the MAC key.  In
    the simulation nobody computes forgeries; tampering is detected because
    mutated bytes no longer match the MAC.
    """

    name = "sim"
    SIG_LEN = 32

    def keygen(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = digest(seed + b"/sig")
        return sk, sk

    def sign(self, sk: bytes, message: bytes) -> bytes:
        return hmac.new(sk, message, hashlib.sha256).digest()

    def verify(self, pk: bytes, message: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(
            hmac.new(pk, message, hashlib.sha256).digest(), sig
        )

    def encrypt(self, key: bytes, plaintext: bytes, rng: Prg) -> Ciphertext:
        nonce = rng.next_bytes(12)
        body = self._xor_stream(key, nonce, plaintext)
        tag = hmac.new(key, b"ct" + nonce + body, hashlib.sha256).digest()[:16]
        return Ciphertext(nonce, body + tag)

    def decrypt(self, key: bytes, ct: Ciphertext) -> bytes:
        if len(ct.body) < 16:
            raise AuthenticationFailure("truncated ciphertext")
        body, tag = ct.body[:-16], ct.body[-16:]
        want = hmac.new(key, b"ct" + ct.nonce + body, hashlib.sha256).digest()[:16]
        if not hmac.compare_digest(want, tag):
            raise AuthenticationFailure("AEAD tag mismatch")
        return self._xor_stream(key, ct.nonce, body)

    @staticmethod
    def _xor_stream(key: bytes, nonce: bytes, data: bytes) -> bytes:
        out = bytearray()
        block = 0
        while len(out) < len(data):
            pad = hashlib.sha256(
                key + nonce + block.to_bytes(8, "little")
            ).digest()
            out += pad
            block += 1
        return bytes(x ^ y for x, y in zip(data, out[: len(data)]))


class RealCrypto:
    """Ed25519 signatures and AES-GCM, both deterministic per inputs."""

    name = "real"
    SIG_LEN = 64

    def __init__(self):
        from cryptography.hazmat.primitives.asymmetric import ed25519
        from cryptography.hazmat.primitives.ciphers.aead import AESGCM

        self._ed25519 = ed25519
        self._aesgcm = AESGCM

    def keygen(self, seed: bytes) -> tuple[bytes, bytes]:
        sk = self._ed25519.Ed25519PrivateKey.from_private_bytes(digest(seed + b"/sig"))
        from cryptography.hazmat.primitives import serialization

        pk = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return digest(seed + b"/sig"), pk

    def sign(self, sk: bytes, message: bytes) -> bytes:
        key = self._ed25519.Ed25519PrivateKey.from_private_bytes(sk)
        return key.sign(message)

    def verify(self, pk: bytes, message: bytes, sig: bytes) -> bool:
        try:
            key = self._ed25519.Ed25519PublicKey.from_public_bytes(pk)
            key.verify(sig, message)
            return True
        except Exception:
            return False

    def encrypt(self, key: bytes, plaintext: bytes, rng: Prg) -> Ciphertext:
        nonce = rng.next_bytes(12)
        return Ciphertext(nonce, self._aesgcm(key).encrypt(nonce, plaintext, b""))

    def decrypt(self, key: bytes, ct: Ciphertext) -> bytes:
        try:
            return self._aesgcm(key).decrypt(ct.nonce, ct.body, b"")
        except Exception as exc:
            raise AuthenticationFailure("AEAD decryption failed") from exc


_PROVIDERS = {"sim": SimCrypto, "real": RealCrypto}


def get_provider(name: str):
    try:
        return _PROVIDERS[name]()
    except KeyError:
        raise CryptoError(f"unknown crypto provider {name!r}") from None
