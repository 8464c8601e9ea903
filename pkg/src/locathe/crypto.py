"""Deterministic cryptographic primitives shared by every protocol stage.

prf is HMAC-SHA256 and prf+ is the iterated expansion T1 = prf(K, S | 0x01),
Ti = prf(K, T(i-1) | S | i). Password stretching is PBKDF2-HMAC-SHA256.
Authenticated encryption is ChaCha20-Poly1305; the deliberately
non-authenticated mode is raw ChaCha20 keystream XOR, whose decryption is
total: any 32-octet key yields some plaintext of the same length, which is
what defeats offline dictionary attacks against the password-proof nonce.

All randomness flows through :class:`Rng`, an HMAC-counter generator that is
either seeded (fully reproducible) or keyed from ``os.urandom``. A single Rng
is not safe for concurrent draws; give each concurrent actor its own child
stream via :meth:`Rng.child`.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher as _Cipher
from cryptography.hazmat.primitives.ciphers.algorithms import ChaCha20 as _ChaCha20
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305 as _AEAD

from . import ec
from .ec import Point, InvalidPoint, MalformedSignature  # re-exported

KEY_LEN = 32
NONCE_LEN = 12
PRF_OUT_LEN = 32
PRF_PLUS_MAX = 255 * PRF_OUT_LEN
KDF_DEFAULT_ITERATIONS = 10_000

PRF_ID = "HMAC-SHA256"
CURVE_ID = ec.CURVE_ID


class CryptoError(Exception):
    pass


class AuthenticationFailed(CryptoError):
    """AEAD tag check failed: tampered ciphertext, wrong key, or wrong aad."""


class InvalidPeerPoint(CryptoError):
    """Peer supplied the identity or an off-curve point."""


class LengthTooLarge(CryptoError):
    pass


class EmptySecret(CryptoError):
    pass


def _check_prf_key(key: bytes):
    if not 1 <= len(key) <= 64:
        raise CryptoError(f"prf key must be 1..64 octets, got {len(key)}")


def prf(key: bytes, data: bytes) -> bytes:
    _check_prf_key(key)
    return _hmac.new(key, data, hashlib.sha256).digest()


def prf_plus(key: bytes, data: bytes, out_len: int) -> bytes:
    if out_len > PRF_PLUS_MAX:
        raise LengthTooLarge(f"prf+ output capped at {PRF_PLUS_MAX} octets")
    _check_prf_key(key)
    out = bytearray()
    block = b""
    i = 1
    while len(out) < out_len:
        block = prf(key, block + data + bytes([i]))
        out += block
        i += 1
    return bytes(out[:out_len])


def kdf_stretch(secret: bytes, salt: bytes, iterations: int = KDF_DEFAULT_ITERATIONS) -> bytes:
    if not secret:
        raise EmptySecret("cannot stretch an empty secret")
    return hashlib.pbkdf2_hmac("sha256", secret, salt, iterations, dklen=KEY_LEN)


# ---------------------------------------------------------------------------
# Randomness

class Rng:
    """HMAC-counter byte stream, seeded (deterministic) or from os.urandom.

    Stateful: draws advance an internal counter. Not safe for concurrent
    use; hand each concurrent component its own ``child`` stream.
    """

    def __init__(self, seed: int | bytes | None = None):
        if seed is None:
            key = os.urandom(KEY_LEN)
        else:
            if isinstance(seed, int):
                seed = seed.to_bytes(8, "big", signed=False)
            key = _hmac.new(b"LOCATHE-RNG", seed, hashlib.sha256).digest()
        self._key = key
        self._ctr = 0

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += prf(self._key, b"GEN" + self._ctr.to_bytes(8, "big"))
            self._ctr += 1
        return bytes(out[:n])

    def nonce(self) -> bytes:
        return self.bytes(NONCE_LEN)

    def scalar(self) -> int:
        """Uniform scalar in [1, group order - 1] by rejection sampling."""
        while True:
            v = int.from_bytes(self.bytes(32), "big")
            if 1 <= v < ec.N:
                return v

    def child(self, label: bytes | str) -> "Rng":
        if isinstance(label, str):
            label = label.encode()
        return Rng(prf(self._key, b"CHILD" + label))


# ---------------------------------------------------------------------------
# Group operations

def scalar_bytes(k: int) -> bytes:
    return k.to_bytes(32, "big")


def scalar_from_bytes(data: bytes) -> int:
    """Total decoder: reduces into [1, order - 1], never rejects.

    Used on the password-proof path, where a wrong key must still produce a
    well-formed scalar rather than an error signal.
    """
    v = int.from_bytes(data, "big") % ec.N
    return v if v else 1


def ecdhe_keypair(rng: Rng) -> tuple[int, Point]:
    k = rng.scalar()
    return k, ec.base_mult(k)


def dh(my_scalar: int, peer_point: Point) -> Point:
    if peer_point.is_identity:
        raise InvalidPeerPoint("peer sent the identity point")
    if not peer_point.on_curve():
        raise InvalidPeerPoint("peer point not on curve")
    if not 1 <= my_scalar < ec.N:
        raise CryptoError("scalar out of range")
    return peer_point.mul(my_scalar)


# ---------------------------------------------------------------------------
# Symmetric encryption

def _check_key_nonce(key: bytes, nonce: bytes):
    if len(key) != KEY_LEN:
        raise CryptoError(f"key must be {KEY_LEN} octets")
    if len(nonce) != NONCE_LEN:
        raise CryptoError(f"nonce must be {NONCE_LEN} octets")


def enc_auth(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    _check_key_nonce(key, nonce)
    return _AEAD(key).encrypt(nonce, plaintext, aad)


def dec_auth(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    _check_key_nonce(key, nonce)
    try:
        return _AEAD(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag:
        raise AuthenticationFailed("ciphertext rejected") from None


def _keystream_xor(key: bytes, nonce: bytes, data: bytes) -> bytes:
    # 16-octet ChaCha20 nonce = 4-octet block counter (zero) | 12-octet nonce
    cipher = _Cipher(_ChaCha20(key, b"\x00\x00\x00\x00" + nonce), mode=None)
    return cipher.encryptor().update(data)


def enc_plain(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    _check_key_nonce(key, nonce)
    return _keystream_xor(key, nonce, plaintext)


def dec_plain(key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    """Total by design: never fails, any key yields a same-length plaintext."""
    _check_key_nonce(key, nonce)
    return _keystream_xor(key, nonce, ciphertext)


# ---------------------------------------------------------------------------
# Signatures (ECDSA over the same curve, deterministic nonce)

def signature_keypair(rng: Rng) -> tuple[int, Point]:
    return ecdhe_keypair(rng)


def sign(secret: int, data: bytes) -> bytes:
    return ec.ecdsa_sign(secret, data)


def verify(pub: Point, data: bytes, sig: bytes) -> bool:
    return ec.ecdsa_verify(pub, data, sig)


# ---------------------------------------------------------------------------
# Token authenticator

@dataclass(frozen=True)
class TokenSeed:
    seed: bytes
    step_seconds: int = 30
    digits: int = 8

    def __post_init__(self):
        if not 20 <= len(self.seed) <= 64:
            raise ValueError("token seed must be 20..64 octets")
        if self.step_seconds <= 0:
            raise ValueError("step_seconds must be positive")
        if not 6 <= self.digits <= 9:
            raise ValueError("digits must be 6..9")


def totp(seed: TokenSeed, now: float) -> str:
    """Time-based token: dynamic truncation of prf(seed, epoch)."""
    if now < 0:
        raise ValueError("negative timestamp")
    epoch = int(now // seed.step_seconds)
    mac = prf(seed.seed, epoch.to_bytes(8, "big"))
    offset = mac[-1] & 0x0F
    code = int.from_bytes(mac[offset:offset + 4], "big") & 0x7FFFFFFF
    return str(code % 10 ** seed.digits).zfill(seed.digits)


def fingerprint(value: bytes) -> str:
    """Loggable 8-hex-char handle for a secret; never the secret itself."""
    return prf(value, b"FP")[:4].hex()
