"""Keyed envelope primitives for escrowed piece exchange.

Three schemes are supported:

* ``TWO_KEY``    -- lock/release pair: data is encrypted under one key and can
  only be opened with a second, non-derivable key that the sender withholds
  until it wants to release the plaintext.
* ``SYMMETRIC``  -- a single shared key encrypts and decrypts.
* ``ASYMMETRIC`` -- public/private pair, used to wrap symmetric keys in the
  hybrid handshake.

TWO_KEY and ASYMMETRIC are both realized as small-modulus textbook RSA
(64-bit by default) so that thousands of exchanges stay cheap inside the
simulator.  This is a correctness-grade model for protocol logic, not
hardened cryptography: no padding, tiny moduli, deterministic keystreams.
Every envelope carries a short keyed checksum over the plaintext so that a
wrong key or a corrupted payload is always detected instead of returning
garbage.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import random
from dataclasses import dataclass

TWO_KEY = "TWO_KEY"
SYMMETRIC = "SYMMETRIC"
ASYMMETRIC = "ASYMMETRIC"
SCHEMES = (TWO_KEY, SYMMETRIC, ASYMMETRIC)

# Roles a piece of key material can play.  "sym" both encrypts and decrypts.
KIND_ENC = "enc"
KIND_DEC = "dec"
KIND_SYM = "sym"

_CHECK_LEN = 8
_SYM_KEY_LEN = 16
DEFAULT_RSA_BITS = 64


class CryptoError(Exception):
    """Base class for envelope/key failures."""


class EmptyPayload(CryptoError):
    """Refused to encrypt zero bytes."""


class KeyMismatch(CryptoError):
    """The supplied key does not belong to this envelope's pair."""


class CorruptEnvelope(CryptoError):
    """Ciphertext or checksum does not verify under the matching key."""


@dataclass(frozen=True)
class KeyMaterial:
    """One usable key: the pair id it belongs to, its role, and raw bytes."""

    key_id: str
    kind: str
    data: bytes

    def to_bytes(self) -> bytes:
        """Serialize so the material can itself be encrypted and shipped."""
        return f"{self.key_id}|{self.kind}|".encode("ascii") + self.data

    @classmethod
    def from_bytes(cls, raw: bytes) -> "KeyMaterial":
        try:
            key_id, kind, data = raw.split(b"|", 2)
            material = cls(key_id.decode("ascii"), kind.decode("ascii"), data)
        except (ValueError, UnicodeDecodeError) as exc:
            raise CorruptEnvelope(f"cannot parse key material: {exc}") from exc
        if material.kind not in (KIND_ENC, KIND_DEC, KIND_SYM):
            raise CorruptEnvelope(f"unknown key kind {material.kind!r}")
        return material


@dataclass(frozen=True)
class KeyPair:
    """Matched encrypt/decrypt material produced by one keygen call."""

    key_id: str
    scheme: str
    enc_key: KeyMaterial
    dec_key: KeyMaterial


@dataclass(frozen=True)
class CipherEnvelope:
    """Encrypted payload plus everything needed to verify a decryption."""

    key_id: str
    payload: bytes
    plaintext_len: int
    check: bytes


def _checksum(key_id: str, plaintext: bytes) -> bytes:
    return hmac.new(key_id.encode("ascii"), plaintext, hashlib.sha256).digest()[:_CHECK_LEN]


# Deterministic Miller-Rabin: this witness set is exact for n < 3.3e24,
# far above any modulus we generate.
_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in _MR_WITNESSES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng: random.Random) -> int:
    # Top two bits set so p*q always reaches the full modulus width.
    while True:
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if _is_prime(candidate):
            return candidate


def _rsa_components(bits: int, rng: random.Random) -> tuple[int, int, int]:
    half = bits // 2
    if half < 8:
        raise ValueError(f"modulus of {bits} bits is too small")
    p = _random_prime(half, rng)
    q = _random_prime(half, rng)
    while q == p:
        q = _random_prime(half, rng)
    n = p * q
    lam = math.lcm(p - 1, q - 1)
    for e in (65537, 257, 17, 5, 3):
        if math.gcd(e, lam) == 1:
            d = pow(e, -1, lam)
            return n, e, d
    raise ValueError("no usable public exponent")  # pragma: no cover


def _pack_ints(*values: int) -> bytes:
    out = bytearray()
    for v in values:
        chunk = v.to_bytes((v.bit_length() + 7) // 8 or 1, "big")
        out += len(chunk).to_bytes(2, "big") + chunk
    return bytes(out)


def _unpack_ints(raw: bytes, count: int) -> list[int]:
    values, pos = [], 0
    for _ in range(count):
        if pos + 2 > len(raw):
            raise CorruptEnvelope("truncated key material")
        size = int.from_bytes(raw[pos:pos + 2], "big")
        pos += 2
        if pos + size > len(raw):
            raise CorruptEnvelope("truncated key material")
        values.append(int.from_bytes(raw[pos:pos + size], "big"))
        pos += size
    return values


def keygen(scheme: str, rng: random.Random, bits: int = DEFAULT_RSA_BITS) -> KeyPair:
    """Generate a fresh key pair for ``scheme``.

    All randomness comes from ``rng``, so identically seeded generators
    produce byte-identical pairs.  ``bits`` sets the RSA modulus width for
    the TWO_KEY and ASYMMETRIC schemes and is ignored for SYMMETRIC.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    key_id = f"{rng.getrandbits(64):016x}"
    if scheme == SYMMETRIC:
        secret = rng.getrandbits(8 * _SYM_KEY_LEN).to_bytes(_SYM_KEY_LEN, "big")
        material = KeyMaterial(key_id, KIND_SYM, secret)
        return KeyPair(key_id, scheme, material, material)
    n, e, d = _rsa_components(bits, rng)
    enc = KeyMaterial(key_id, KIND_ENC, _pack_ints(n, e))
    dec = KeyMaterial(key_id, KIND_DEC, _pack_ints(n, d))
    return KeyPair(key_id, scheme, enc, dec)


def _keystream(secret: bytes, length: int) -> bytes:
    # SHA-256 in counter mode; deterministic for a given key.
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(secret + counter.to_bytes(8, "big")).digest()
        counter += 1
    return bytes(out[:length])


def _xor(data: bytes, stream: bytes) -> bytes:
    return bytes(a ^ b for a, b in zip(data, stream))


def _rsa_apply(raw: bytes, material: KeyMaterial, forward: bool) -> bytes:
    n, exp = _unpack_ints(material.data, 2)
    width = (n.bit_length() + 7) // 8
    if forward:
        in_size, out_size = width - 1, width
    else:
        in_size, out_size = width, width - 1
        if len(raw) % in_size != 0:
            raise CorruptEnvelope("payload length does not match modulus width")
    out = bytearray()
    for pos in range(0, len(raw), in_size):
        block = int.from_bytes(raw[pos:pos + in_size], "big")
        if block >= n:
            raise CorruptEnvelope("block exceeds modulus")
        try:
            out += pow(block, exp, n).to_bytes(out_size, "big")
        except OverflowError as exc:
            # Only reachable when inverting a tampered block.
            raise CorruptEnvelope("block does not invert cleanly") from exc
    return bytes(out)


def encrypt(data: bytes, key: KeyMaterial) -> CipherEnvelope:
    """Seal ``data`` under ``key`` (an enc or sym material).

    Raises EmptyPayload for zero-length data and KeyMismatch when handed
    decrypt-only material.
    """
    if not data:
        raise EmptyPayload("refusing to encrypt an empty payload")
    if key.kind == KIND_DEC:
        raise KeyMismatch("decryption key cannot encrypt")
    if key.kind == KIND_SYM:
        payload = _xor(data, _keystream(key.data, len(data)))
    else:
        # Chunked so every block value stays below the modulus.  The last
        # chunk is length-padded; plaintext_len restores the exact size.
        n, _ = _unpack_ints(key.data, 2)
        chunk = (n.bit_length() + 7) // 8 - 1
        padded = data + b"\x00" * (-len(data) % chunk)
        payload = _rsa_apply(padded, key, forward=True)
    return CipherEnvelope(key.key_id, payload, len(data), _checksum(key.key_id, data))


def decrypt(env: CipherEnvelope, key: KeyMaterial) -> bytes:
    """Open ``env`` with ``key`` (a dec or sym material).

    Raises KeyMismatch when the key belongs to a different pair or has the
    wrong role, and CorruptEnvelope when the payload fails to verify.
    """
    if key.kind == KIND_ENC:
        raise KeyMismatch("encryption key cannot decrypt")
    if key.key_id != env.key_id:
        raise KeyMismatch(f"envelope was sealed under pair {env.key_id}, got {key.key_id}")
    if key.kind == KIND_SYM:
        if len(env.payload) != env.plaintext_len:
            raise CorruptEnvelope("payload length disagrees with plaintext_len")
        plaintext = _xor(env.payload, _keystream(key.data, len(env.payload)))
    else:
        padded = _rsa_apply(env.payload, key, forward=False)
        if env.plaintext_len > len(padded):
            raise CorruptEnvelope("plaintext_len exceeds decrypted size")
        plaintext = padded[:env.plaintext_len]
    if not hmac.compare_digest(_checksum(env.key_id, plaintext), env.check):
        raise CorruptEnvelope("plaintext checksum mismatch")
    return plaintext


def wrap_key(inner: KeyMaterial, outer: KeyMaterial) -> CipherEnvelope:
    """Encrypt key material under another key (hybrid key transport)."""
    return encrypt(inner.to_bytes(), outer)


def unwrap_key(env: CipherEnvelope, outer: KeyMaterial) -> KeyMaterial:
    """Inverse of wrap_key; returns the reconstructed inner material."""
    return KeyMaterial.from_bytes(decrypt(env, outer))
