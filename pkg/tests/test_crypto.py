"""Primitive-level checks: prf/prf+, stretching, group ops, both encryption
modes, signatures and the token authenticator."""

import hashlib
import random

import pytest

from locathe import crypto, ec
from locathe.crypto import Rng, TokenSeed


# ---------------------------------------------------------------------------
# prf

def hmac_sha256_reference(key: bytes, data: bytes) -> bytes:
    """Independent HMAC built straight from the ipad/opad definition."""
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key + bytes(block - len(key))
    inner = hashlib.sha256(bytes(k ^ 0x36 for k in key) + data).digest()
    return hashlib.sha256(bytes(k ^ 0x5C for k in key) + inner).digest()


# HMAC-SHA256 vectors from RFC 4231 (test cases 1 and 2)
RFC4231 = [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
]


def test_prf_matches_published_vectors():
    for key, data, expected in RFC4231:
        assert crypto.prf(key, data).hex() == expected


def test_prf_matches_independent_reference(rng):
    for _ in range(10):
        key, data = rng.bytes(32), rng.bytes(40)
        assert crypto.prf(key, data) == hmac_sha256_reference(key, data)


def test_prf_deterministic(rng):
    key, data = rng.bytes(32), rng.bytes(17)
    assert crypto.prf(key, data) == crypto.prf(key, data)
    assert len(crypto.prf(key, data)) == 32


def test_prf_distinct_over_corpus(rng):
    key = rng.bytes(32)
    outs = set()
    for _ in range(1000):
        outs.add(crypto.prf(key, rng.bytes(24)))
    assert len(outs) == 1000


def test_prf_key_length_limits():
    with pytest.raises(crypto.CryptoError):
        crypto.prf(b"", b"data")
    with pytest.raises(crypto.CryptoError):
        crypto.prf(b"x" * 65, b"data")
    crypto.prf(b"x", b"data")
    crypto.prf(b"x" * 64, b"data")


# ---------------------------------------------------------------------------
# prf+

def prf_plus_reference(key, data, out_len):
    """Hand-rolled iteration: T1 = prf(K, S|0x01), Ti = prf(K, T|S|i)."""
    out, t, i = b"", b"", 1
    while len(out) < out_len:
        t = hmac_sha256_reference(key, t + data + bytes([i]))
        out += t
        i += 1
    return out[:out_len]


def test_prf_plus_first_block_identity(rng):
    key, data = rng.bytes(32), rng.bytes(20)
    assert crypto.prf_plus(key, data, 32) == crypto.prf(key, data + b"\x01")


def test_prf_plus_prefix_property(rng):
    key, data = rng.bytes(32), rng.bytes(20)
    long = crypto.prf_plus(key, data, 192)
    for n in (1, 31, 32, 33, 64, 96, 191):
        assert crypto.prf_plus(key, data, n) == long[:n]


def test_prf_plus_matches_iteration_oracle(rng):
    for out_len in (96, 100, 255 * 32):
        key, data = rng.bytes(32), rng.bytes(12)
        assert crypto.prf_plus(key, data, out_len) == \
            prf_plus_reference(key, data, out_len)


def test_prf_plus_length_cap(rng):
    with pytest.raises(crypto.LengthTooLarge):
        crypto.prf_plus(rng.bytes(32), b"x", 255 * 32 + 1)


# ---------------------------------------------------------------------------
# kdf_stretch

def test_kdf_deterministic_and_salted(rng):
    secret = b"correct horse"
    salt1, salt2 = rng.bytes(16), rng.bytes(16)
    assert crypto.kdf_stretch(secret, salt1, 100) == \
        crypto.kdf_stretch(secret, salt1, 100)
    seen = set()
    for _ in range(50):
        seen.add(crypto.kdf_stretch(secret, rng.bytes(16), 10))
    assert len(seen) == 50
    assert crypto.kdf_stretch(secret, salt1, 100) != \
        crypto.kdf_stretch(secret, salt2, 100)


def test_kdf_single_iteration_oracle(rng):
    # PBKDF2 with c=1 and a 32-octet output is one keyed-hash application
    secret, salt = rng.bytes(20), rng.bytes(16)
    expected = hmac_sha256_reference(secret, salt + b"\x00\x00\x00\x01")
    assert crypto.kdf_stretch(secret, salt, 1) == expected


def test_kdf_empty_secret():
    with pytest.raises(crypto.EmptySecret):
        crypto.kdf_stretch(b"", b"salt")


# ---------------------------------------------------------------------------
# group operations

def test_ecdhe_keypair_properties(rng):
    scalar, point = crypto.ecdhe_keypair(rng)
    assert not point.is_identity
    assert point.on_curve()
    assert ec.base_mult(scalar) == point


def test_ecdhe_scalars_distinct(rng):
    scalars = {crypto.ecdhe_keypair(rng)[0] for _ in range(1000)}
    assert len(scalars) == 1000


def test_dh_commutativity(rng):
    for _ in range(100):
        ki, pi = crypto.ecdhe_keypair(rng)
        kr, pr = crypto.ecdhe_keypair(rng)
        assert crypto.dh(ki, pr) == crypto.dh(kr, pi)


def test_dh_scalar_identity(rng):
    _, p = crypto.ecdhe_keypair(rng)
    assert crypto.dh(1, p) == p


def test_dh_rejects_identity(rng):
    k, _ = crypto.ecdhe_keypair(rng)
    with pytest.raises(crypto.InvalidPeerPoint):
        crypto.dh(k, ec.Point.identity())


def test_point_codec_round_trip(rng):
    for _ in range(20):
        _, p = crypto.ecdhe_keypair(rng)
        assert ec.Point.decode(p.encode()) == p
    assert ec.Point.decode(b"\x00").is_identity
    with pytest.raises(ec.InvalidPoint):
        ec.Point.decode(b"\x05" + bytes(32))
    with pytest.raises(ec.InvalidPoint):
        ec.Point.decode(b"\x02" + b"\xff" * 32)  # x >= field prime


# ---------------------------------------------------------------------------
# authenticated encryption

def test_enc_auth_round_trip(rng):
    key, nonce = rng.bytes(32), rng.nonce()
    ct = crypto.enc_auth(key, nonce, b"payload", b"aad")
    assert crypto.dec_auth(key, nonce, ct, b"aad") == b"payload"


def test_enc_auth_rejects_any_bit_flip(rng):
    key, nonce = rng.bytes(32), rng.nonce()
    ct = crypto.enc_auth(key, nonce, b"payload bytes", b"aad")
    for i in range(len(ct)):
        bad = bytearray(ct)
        bad[i] ^= 0x01
        with pytest.raises(crypto.AuthenticationFailed):
            crypto.dec_auth(key, nonce, bytes(bad), b"aad")


def test_enc_auth_binds_key_nonce_aad(rng):
    key, nonce = rng.bytes(32), rng.nonce()
    ct = crypto.enc_auth(key, nonce, b"payload", b"aad")
    with pytest.raises(crypto.AuthenticationFailed):
        crypto.dec_auth(rng.bytes(32), nonce, ct, b"aad")
    with pytest.raises(crypto.AuthenticationFailed):
        crypto.dec_auth(key, rng.nonce(), ct, b"aad")
    with pytest.raises(crypto.AuthenticationFailed):
        crypto.dec_auth(key, nonce, ct, b"oops")


# ---------------------------------------------------------------------------
# non-authenticated encryption

def test_enc_plain_round_trip(rng):
    key, nonce = rng.bytes(32), rng.nonce()
    pt = rng.bytes(32)
    assert crypto.dec_plain(key, nonce, crypto.enc_plain(key, nonce, pt)) == pt


def test_dec_plain_is_total(rng):
    key, nonce = rng.bytes(32), rng.nonce()
    ct = crypto.enc_plain(key, nonce, b"s" * 32)
    wrong = crypto.dec_plain(rng.bytes(32), nonce, ct)
    assert len(wrong) == 32 and wrong != b"s" * 32


def test_dec_plain_no_rejection_signal(rng):
    # 100 wrong keys, 100 distinct plaintext candidates, zero errors
    key, nonce = rng.bytes(32), rng.nonce()
    ct = crypto.enc_plain(key, nonce, rng.bytes(32))
    outs = set()
    for _ in range(100):
        outs.add(crypto.dec_plain(rng.bytes(32), nonce, ct))
    assert len(outs) == 100


# ---------------------------------------------------------------------------
# signatures

def test_sign_verify_round_trip(rng):
    sk, pk = crypto.signature_keypair(rng)
    sig = crypto.sign(sk, b"broadcast body")
    assert crypto.verify(pk, b"broadcast body", sig)


def test_verify_rejects_altered_inputs(rng):
    sk, pk = crypto.signature_keypair(rng)
    sk2, pk2 = crypto.signature_keypair(rng)
    sig = crypto.sign(sk, b"message")
    assert not crypto.verify(pk, b"massage", sig)
    assert not crypto.verify(pk2, b"message", sig)
    flipped = bytearray(sig)
    flipped[7] ^= 0x01
    assert not crypto.verify(pk, b"message", bytes(flipped))


def test_verify_malformed_signature(rng):
    sk, pk = crypto.signature_keypair(rng)
    with pytest.raises(crypto.MalformedSignature):
        crypto.verify(pk, b"m", b"short")


def test_sign_deterministic(rng):
    sk, _ = crypto.signature_keypair(rng)
    assert crypto.sign(sk, b"m") == crypto.sign(sk, b"m")


# ---------------------------------------------------------------------------
# token authenticator

def test_totp_epoch_flooring(rng):
    seed = TokenSeed(seed=rng.bytes(32))
    assert crypto.totp(seed, 0) == crypto.totp(seed, 29.999)
    assert crypto.totp(seed, 0) != crypto.totp(seed, 30)


def test_totp_format(rng):
    for digits in (6, 7, 8, 9):
        seed = TokenSeed(seed=rng.bytes(32), digits=digits)
        tk = crypto.totp(seed, 12345)
        assert len(tk) == digits and tk.isdigit()


def test_token_seed_validation(rng):
    with pytest.raises(ValueError):
        TokenSeed(seed=rng.bytes(19))
    with pytest.raises(ValueError):
        TokenSeed(seed=rng.bytes(65))
    with pytest.raises(ValueError):
        TokenSeed(seed=rng.bytes(32), step_seconds=0)
    with pytest.raises(ValueError):
        TokenSeed(seed=rng.bytes(32), digits=5)


# ---------------------------------------------------------------------------
# randomness plumbing

def test_rng_deterministic_and_forkable():
    a, b = Rng(99), Rng(99)
    assert a.bytes(48) == b.bytes(48)
    assert Rng(99).child("x").bytes(16) != Rng(99).child("y").bytes(16)
    assert Rng(99).child("x").bytes(16) == Rng(99).child("x").bytes(16)


def test_rng_unseeded_differs():
    assert Rng().bytes(32) != Rng().bytes(32)


def test_fingerprint_short_and_stable(rng):
    value = rng.bytes(32)
    fp = crypto.fingerprint(value)
    assert len(fp) == 8 and fp == crypto.fingerprint(value)
    assert fp != value.hex()[:8]
