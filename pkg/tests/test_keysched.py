"""Derivation-level agreement, divergence and binding checks."""

import pytest

from locathe import crypto, ec, keysched
from locathe.crypto import Rng
from locathe.keysched import (ROLE_INITIATOR, ROLE_RESPONDER, SessionIds,
                              build_signed_octets, compute_auth_shared_secret,
                              compute_auth_tier1, compute_auth_tier2,
                              compute_final_auth, compute_ge, compute_gtk,
                              compute_keyseed, compute_long_term_secret,
                              derive_kpwd, derive_sks, make_enonce,
                              open_enonce, tier2_keypair)


def session_context(rng):
    n_i, n_r = rng.bytes(32), rng.bytes(32)
    ids = SessionIds(rng.bytes(8), rng.bytes(8))
    ki, ke_i = crypto.ecdhe_keypair(rng)
    kr, ke_r = crypto.ecdhe_keypair(rng)
    return n_i, n_r, ids, ki, ke_i, kr, ke_r


# ---------------------------------------------------------------------------
# keyseed and session keys

def test_keyseed_agreement_both_sides(rng):
    n_i, n_r, ids, ki, ke_i, kr, ke_r = session_context(rng)
    seed_i = compute_keyseed(crypto.dh(ki, ke_r), n_i, n_r)
    seed_r = compute_keyseed(crypto.dh(kr, ke_i), n_i, n_r)
    assert seed_i == seed_r


def test_keyseed_nonce_avalanche(rng):
    n_i, n_r, ids, ki, ke_i, kr, ke_r = session_context(rng)
    shared = crypto.dh(ki, ke_r)
    tweaked = bytearray(n_r)
    tweaked[5] ^= 0x01
    assert compute_keyseed(shared, n_i, n_r) != \
        compute_keyseed(shared, n_i, bytes(tweaked))


def test_keyseed_matches_composition_oracle(rng):
    for _ in range(10):
        n_i, n_r, ids, ki, ke_i, kr, ke_r = session_context(rng)
        shared = ke_r.mul(ki)  # manual two-step: raw multiply, then prf
        expected = crypto.prf(n_i + n_r, shared.encode())
        assert compute_keyseed(crypto.dh(ki, ke_r), n_i, n_r) == expected


def test_keyseed_rejects_identity(rng):
    with pytest.raises(keysched.IdentitySharedSecret):
        compute_keyseed(ec.Point.identity(), rng.bytes(32), rng.bytes(32))


def test_derive_sks_slice_order(rng):
    n_i, n_r, ids, *_ = session_context(rng)
    keyseed = rng.bytes(32)
    sched = derive_sks(keyseed, n_i, n_r, ids)
    material = crypto.prf_plus(keyseed, n_i + n_r + ids.spi_i + ids.spi_r, 192)
    assert sched.sk_ei == material[:32]
    assert sched.sk_ai == material[32:64]
    assert sched.sk_er == material[64:96]
    assert sched.sk_ar == material[96:128]
    assert sched.sk_pi == material[128:160]
    assert sched.sk_pr == material[160:192]
    assert len(set(sched.all_keys())) == 6


def test_derive_sks_spi_dependence(rng):
    n_i, n_r, ids, *_ = session_context(rng)
    keyseed = rng.bytes(32)
    other = SessionIds(rng.bytes(8), rng.bytes(8))
    a = derive_sks(keyseed, n_i, n_r, ids)
    b = derive_sks(keyseed, n_i, n_r, other)
    assert not set(a.all_keys()) & set(b.all_keys())


def test_session_ids_validation(rng):
    spi = rng.bytes(8)
    with pytest.raises(ValueError):
        SessionIds(spi, spi)
    with pytest.raises(ValueError):
        SessionIds(bytes(8), spi)
    with pytest.raises(ValueError):
        SessionIds(spi, rng.bytes(7))


# ---------------------------------------------------------------------------
# tier-1 authentication payloads

def test_auth_tier1_agreement_and_binding(rng):
    n_i, n_r, ids, ki, ke_i, kr, ke_r = session_context(rng)
    n_b = rng.bytes(32)
    sched = derive_sks(rng.bytes(32), n_i, n_r, ids)
    so = build_signed_octets(rng.bytes(80), n_r, sched.sk_pi)
    mine = compute_auth_tier1(ROLE_INITIATOR, n_b, n_i, n_r, ke_r, so)
    theirs = compute_auth_tier1(ROLE_INITIATOR, n_b, n_i, n_r, ke_r, so)
    assert mine == theirs
    wrong_nb = bytearray(n_b)
    wrong_nb[0] ^= 0x01
    assert compute_auth_tier1(ROLE_INITIATOR, bytes(wrong_nb), n_i, n_r,
                              ke_r, so) != mine
    assert compute_auth_tier1(ROLE_RESPONDER, n_b, n_i, n_r, ke_r, so) != mine


def test_signed_octets_anonymous_vs_identified(rng):
    sk_p = rng.bytes(32)
    transcript, peer_nonce = rng.bytes(64), rng.bytes(32)
    anon = build_signed_octets(transcript, peer_nonce, sk_p)
    named = build_signed_octets(transcript, peer_nonce, sk_p, b"user-7")
    assert anon != named
    assert b"user-7" not in anon


def test_signed_octets_transcript_bit_flip_sweep(rng):
    sk_p = rng.bytes(32)
    transcript, peer_nonce = rng.bytes(64), rng.bytes(32)
    base = build_signed_octets(transcript, peer_nonce, sk_p)
    for i in range(64):
        mutated = bytearray(transcript)
        mutated[i] ^= 0x01
        assert build_signed_octets(bytes(mutated), peer_nonce, sk_p) != base


# ---------------------------------------------------------------------------
# password-proof chain

def test_kpwd_session_dependence_and_oracle(rng):
    spwd = rng.bytes(32)
    n_i, n_r, ids, *_ = session_context(rng)
    kpwd = derive_kpwd(spwd, n_i, n_r, ids)
    assert kpwd == crypto.prf(spwd, n_i + n_r + ids.spi_i + ids.spi_r)
    n_i2, n_r2, ids2, *_ = session_context(rng)
    assert derive_kpwd(spwd, n_i2, n_r2, ids2) != kpwd


def test_enonce_round_trip_and_totality(rng):
    kpwd = rng.bytes(32)
    s = rng.scalar()
    enonce = make_enonce(kpwd, s, rng.nonce())
    assert open_enonce(kpwd, enonce) == s
    candidates = set()
    for _ in range(100):
        candidate = open_enonce(rng.bytes(32), enonce)
        assert 1 <= candidate < ec.N
        candidates.add(candidate)
    assert s not in candidates
    assert len(candidates) == 100


def test_ge_agreement_and_divergence(rng):
    _, _, _, ki, _, kr, ke_r = session_context(rng)
    shared = crypto.dh(ki, ke_r)
    s = rng.scalar()
    assert compute_ge(s, shared) == compute_ge(s, shared)
    assert compute_ge(rng.scalar(), shared) != compute_ge(s, shared)


def test_ge_degenerate_case(rng):
    s = rng.scalar()
    shared = -ec.base_mult(s)  # constructed so s*G + shared = identity
    with pytest.raises(keysched.DegenerateGE):
        compute_ge(s, shared)


def test_tier2_keypair_properties(rng):
    _, _, _, ki, _, _, ke_r = session_context(rng)
    ge = compute_ge(rng.scalar(), crypto.dh(ki, ke_r))
    lsk, lpk = tier2_keypair(ge, rng)
    assert lpk == ge.mul(lsk)
    assert not lpk.is_identity
    assert tier2_keypair(ge, rng)[0] != lsk


def test_auth_shared_secret_agreement(rng):
    _, _, _, ki, _, _, ke_r = session_context(rng)
    ge = compute_ge(rng.scalar(), crypto.dh(ki, ke_r))
    lsk_i, lpk_i = tier2_keypair(ge, rng)
    lsk_r, lpk_r = tier2_keypair(ge, rng)
    assert compute_auth_shared_secret(lsk_i, lpk_r) == \
        compute_auth_shared_secret(lsk_r, lpk_i)
    with pytest.raises(crypto.InvalidPeerPoint):
        compute_auth_shared_secret(lsk_i, ec.Point.identity())


def test_wrong_password_diverges_only_at_shared_secret(rng):
    # mismatched s (the wrong-Kpwd path) must flow through silently and
    # surface as disagreeing final secrets
    _, _, _, ki, _, _, ke_r = session_context(rng)
    shared = crypto.dh(ki, ke_r)
    s_true, s_wrong = rng.scalar(), rng.scalar()
    ge_i = compute_ge(s_true, shared)
    ge_r = compute_ge(s_wrong, shared)
    lsk_i, lpk_i = tier2_keypair(ge_i, rng)
    lsk_r, lpk_r = tier2_keypair(ge_r, rng)
    assert compute_auth_shared_secret(lsk_i, lpk_r) != \
        compute_auth_shared_secret(lsk_r, lpk_i)


# ---------------------------------------------------------------------------
# token binding, final auth, long-term key

def test_gtk_agreement_and_epoch_divergence(rng):
    seed = crypto.TokenSeed(seed=rng.bytes(32))
    _, _, _, ki, _, _, ke_r = session_context(rng)
    ge = compute_ge(rng.scalar(), crypto.dh(ki, ke_r))
    same = compute_gtk(ge, crypto.totp(seed, 61.0))
    assert compute_gtk(ge, crypto.totp(seed, 75.0)) == same  # same epoch
    assert compute_gtk(ge, crypto.totp(seed, 95.0)) != same  # adjacent epoch


def test_final_auth_binding(rng):
    _, _, _, ki, _, _, ke_r = session_context(rng)
    auth_shared = crypto.dh(ki, ke_r)
    gtk, so = rng.bytes(32), rng.bytes(120)
    mine = compute_final_auth(ROLE_INITIATOR, so, auth_shared, gtk)
    assert compute_final_auth(ROLE_INITIATOR, so, auth_shared, gtk) == mine
    assert compute_final_auth(ROLE_INITIATOR, so, auth_shared,
                              rng.bytes(32)) != mine
    assert compute_final_auth(ROLE_RESPONDER, so, auth_shared, gtk) != mine


def test_auth_tier2_transcript_truncation(rng):
    n_b, sk_p = rng.bytes(32), rng.bytes(32)
    transcript = rng.bytes(96)
    full = compute_auth_tier2(n_b, transcript, sk_p)
    assert compute_auth_tier2(n_b, transcript[:-1], sk_p) != full
    stale = bytearray(n_b)
    stale[3] ^= 0xFF
    assert compute_auth_tier2(bytes(stale), transcript, sk_p) != full


def test_long_term_secret_validity_window(rng):
    _, _, ids, ki, _, _, ke_r = session_context(rng)
    ltk = compute_long_term_secret(crypto.dh(ki, ke_r), rng.bytes(32),
                                   rng.bytes(32), ids, now=1000.0)
    assert ltk.ttl_seconds == 3600.0
    assert ltk.is_valid(1000.0)
    assert ltk.is_valid(1000.0 + 3599.0)
    assert not ltk.is_valid(1000.0 + 3600.0)  # closed-open
    assert not ltk.is_valid(999.0)


def test_long_term_secret_per_session(rng):
    n_i, n_r, ids, ki, _, _, ke_r = session_context(rng)
    shared = crypto.dh(ki, ke_r)
    a = compute_long_term_secret(shared, n_i, n_r, ids, 0.0)
    n_i2, n_r2, ids2, *_ = session_context(rng)
    b = compute_long_term_secret(shared, n_i2, n_r2, ids2, 0.0)
    assert a.key != b.key
