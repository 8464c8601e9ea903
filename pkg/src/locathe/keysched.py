"""Session key schedule and authentication-payload derivations.

Every derived value in the handshake funnels through here: the ECDHE seed,
the six directional session keys, both privacy-tier authentication payloads,
the password-proof chain (Spwd -> Kpwd -> ENONCE -> GE -> LSK/LPK), the
token binding GTK, the final mutual-authentication payloads, and the
long-term key. Each derivation carries a distinct ASCII domain-separation
tag so no two contexts can collide.

All functions are pure; byte layouts are pinned and covered by the emitted
test vectors (see the ``vectors`` CLI subcommand).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import crypto, ec
from .crypto import Point, prf, prf_plus

ROLE_INITIATOR = 0x49  # 'I'
ROLE_RESPONDER = 0x52  # 'R'

SPI_LEN = 8
SK_SLICE_LEN = 192  # six 32-octet keys
ANON_ID_TAG = b"\x00"
TAG_TIER1 = b"LOCATHE-T1"
TAG_TIER2 = b"LOCATHE-T2"
TAG_TIER2_SKP = b"LOCATHE-T2-SKP"
TAG_LTK = b"LOCATHE-LTK"
TAG_NO_TOKEN = b"LOCATHE-T1-NOTOKEN"

LONG_TERM_TTL = 3600.0


class KeyScheduleError(crypto.CryptoError):
    pass


class IdentitySharedSecret(KeyScheduleError):
    pass


class DegenerateGE(KeyScheduleError):
    """s*G + SharedSecret landed on the identity; abort and renegotiate."""


@dataclass(frozen=True)
class SessionIds:
    spi_i: bytes
    spi_r: bytes

    def __post_init__(self):
        if len(self.spi_i) != SPI_LEN or len(self.spi_r) != SPI_LEN:
            raise ValueError("SPIs must be 8 octets")
        if self.spi_i == bytes(SPI_LEN) or self.spi_r == bytes(SPI_LEN):
            raise ValueError("SPIs must be nonzero")
        if self.spi_i == self.spi_r:
            raise ValueError("SPIs must differ")


@dataclass(frozen=True)
class KeySchedule:
    keyseed: bytes
    sk_ei: bytes
    sk_ai: bytes
    sk_er: bytes
    sk_ar: bytes
    sk_pi: bytes
    sk_pr: bytes

    def enc_key(self, role: int) -> bytes:
        return self.sk_ei if role == ROLE_INITIATOR else self.sk_er

    def prf_key(self, role: int) -> bytes:
        return self.sk_pi if role == ROLE_INITIATOR else self.sk_pr

    def all_keys(self):
        return (self.sk_ei, self.sk_ai, self.sk_er, self.sk_ar,
                self.sk_pi, self.sk_pr)


@dataclass(frozen=True)
class LongTermSecret:
    key: bytes
    created_at: float
    ttl_seconds: float = LONG_TERM_TTL

    def is_valid(self, now: float) -> bool:
        return self.created_at <= now < self.created_at + self.ttl_seconds


@dataclass
class Tier2State:
    """Initiator- or responder-side password-proof intermediates."""
    kpwd: bytes
    s: int | None
    ge: Point
    lsk: int | None
    lpk: Point


def compute_keyseed(shared: Point, n_i: bytes, n_r: bytes) -> bytes:
    if shared.is_identity:
        raise IdentitySharedSecret("shared secret is the identity point")
    return prf(n_i + n_r, shared.encode())


def derive_sks(keyseed: bytes, n_i: bytes, n_r: bytes, ids: SessionIds) -> KeySchedule:
    material = prf_plus(keyseed, n_i + n_r + ids.spi_i + ids.spi_r, SK_SLICE_LEN)
    ks = [material[i:i + 32] for i in range(0, SK_SLICE_LEN, 32)]
    return KeySchedule(keyseed, *ks)


def build_signed_octets(transcript: bytes, peer_nonce: bytes, sk_p: bytes,
                        id_payload: bytes | None = None) -> bytes:
    """Transcript binding octets; anonymous unless an identity is supplied."""
    return transcript + peer_nonce + prf(sk_p, id_payload if id_payload else ANON_ID_TAG)


def compute_auth_tier1(role: int, n_b: bytes, n_i: bytes, n_r: bytes,
                       ke_r: Point, signed_octets: bytes) -> bytes:
    # the inner prf hides n_b: only a transformation of it ever leaves a party
    inner = prf(n_b, TAG_TIER1 + bytes([role]) + n_i + n_r)
    return prf(inner, signed_octets + ke_r.encode())


def derive_kpwd(spwd: bytes, n_i: bytes, n_r: bytes, ids: SessionIds) -> bytes:
    return prf(spwd, n_i + n_r + ids.spi_i + ids.spi_r)


def make_enonce(kpwd: bytes, s: int, nonce: bytes) -> bytes:
    """Password-proof carrier: nonce | unauthenticated encryption of s."""
    return nonce + crypto.enc_plain(kpwd, nonce, crypto.scalar_bytes(s))


def open_enonce(kpwd: bytes, enonce: bytes) -> int:
    """Total: any kpwd yields a well-formed scalar, never an error."""
    if len(enonce) != crypto.NONCE_LEN + 32:
        raise KeyScheduleError("ENONCE must be 44 octets")
    nonce, body = enonce[:crypto.NONCE_LEN], enonce[crypto.NONCE_LEN:]
    return crypto.scalar_from_bytes(crypto.dec_plain(kpwd, nonce, body))


def compute_ge(s: int, shared: Point) -> Point:
    if shared.is_identity:
        raise IdentitySharedSecret("shared secret is the identity point")
    ge = ec.base_mult(s) + shared
    if ge.is_identity:
        raise DegenerateGE("mapped generator is the identity")
    return ge


def tier2_keypair(ge: Point, rng: crypto.Rng) -> tuple[int, Point]:
    if ge.is_identity:
        raise DegenerateGE("cannot key against the identity")
    lsk = rng.scalar()
    return lsk, ge.mul(lsk)


def compute_auth_tier2(n_b: bytes, transcript: bytes, sk_p: bytes) -> bytes:
    inner = prf(n_b, TAG_TIER2)
    return prf(inner, transcript + prf(sk_p, TAG_TIER2_SKP))


def compute_auth_shared_secret(my_lsk: int, peer_lpk: Point) -> Point:
    if peer_lpk.is_identity:
        raise crypto.InvalidPeerPoint("peer tier-2 public key is the identity")
    if not peer_lpk.on_curve():
        raise crypto.InvalidPeerPoint("peer tier-2 public key not on curve")
    return peer_lpk.mul(my_lsk)


def compute_gtk(ge: Point, tk: str) -> bytes:
    """Token binding: proves token possession without transmitting the token."""
    return prf(ge.encode(), tk.encode())


def no_token_gtk(auth_shared: Point) -> bytes:
    """Tier-1 stand-in when no per-user token seed exists (anonymous mode)."""
    return prf(auth_shared.encode(), TAG_NO_TOKEN)


def compute_final_auth(role: int, signed_octets: bytes, auth_shared: Point,
                       gtk: bytes) -> bytes:
    return prf(prf(auth_shared.encode(), gtk + bytes([role])), signed_octets)


def compute_long_term_secret(auth_shared: Point, n_i: bytes, n_r: bytes,
                             ids: SessionIds, now: float) -> LongTermSecret:
    key = prf(auth_shared.encode(),
              TAG_LTK + n_i + n_r + ids.spi_i + ids.spi_r)
    return LongTermSecret(key=key, created_at=now)
