"""Attribute gate: policy evaluation vs the decrypt path, multi-authority
issuance, expiry, collusion binding and serialization."""

import itertools
import random

import pytest

from locathe import abe, crypto
from locathe.abe import And, Leaf, Or, Threshold
from locathe.crypto import Rng

ATTRS6 = [("a1", f"attr{i}") for i in range(3)] + \
         [("a2", f"attr{i}") for i in range(3)]


@pytest.fixture
def registry(rng):
    reg = abe.AbeRegistry()
    reg.setup_authority("a1", rng.child("a1"))
    reg.setup_authority("a2", rng.child("a2"))
    return reg


def issue(registry, gid, attrs, validity=1000.0, now=0.0):
    keys = []
    for authority_id in {a for a, _ in attrs}:
        granted = {(a, t) for a, t in attrs if a == authority_id}
        keys.append(abe.keygen(registry.authority(authority_id), gid, granted,
                               validity, now=now))
    return keys


# ---------------------------------------------------------------------------
# policy evaluation

def test_policy_satisfied_semantics():
    a, b = ("a1", "x"), ("a1", "y")
    assert abe.policy_satisfied(Or((Leaf(*a), Leaf(*b))), {b})
    assert not abe.policy_satisfied(And((Leaf(*a),)), set())
    assert abe.policy_satisfied(Threshold(2, (Leaf(*a), Leaf(*b),
                                              Leaf("a1", "z"))), {a, b})
    assert not abe.policy_satisfied(Threshold(2, (Leaf(*a), Leaf(*b),
                                                  Leaf("a1", "z"))), {a})


def test_policy_constructors_validate():
    with pytest.raises(ValueError):
        And(())
    with pytest.raises(ValueError):
        Or(())
    with pytest.raises(ValueError):
        Threshold(0, (Leaf("a1", "x"),))
    with pytest.raises(ValueError):
        Threshold(3, (Leaf("a1", "x"), Leaf("a1", "y")))


def random_policy(rnd, depth=3):
    if depth == 0 or rnd.random() < 0.35:
        return Leaf(*rnd.choice(ATTRS6))
    kind = rnd.choice(("and", "or", "threshold"))
    n = rnd.randint(1, 3) if kind != "threshold" else rnd.randint(2, 3)
    kids = tuple(random_policy(rnd, depth - 1) for _ in range(n))
    if kind == "and":
        return And(kids)
    if kind == "or":
        return Or(kids)
    return Threshold(rnd.randint(1, len(kids)), kids)


def test_policy_satisfied_against_subset_enumeration():
    # random trees vs exhaustive truth-table over all 64 subsets
    rnd = random.Random(7)
    for _ in range(25):
        policy = random_policy(rnd)
        for r in range(len(ATTRS6) + 1):
            for subset in itertools.combinations(ATTRS6, r):
                subset = set(subset)
                expected = _eval_reference(policy, subset)
                assert abe.policy_satisfied(policy, subset) == expected


def _eval_reference(node, attrs):
    if isinstance(node, Leaf):
        return (node.authority_id, node.attribute) in attrs
    results = [_eval_reference(c, attrs) for c in node.children]
    if isinstance(node, And):
        return all(results)
    if isinstance(node, Or):
        return any(results)
    return sum(results) >= node.k


# ---------------------------------------------------------------------------
# encrypt/decrypt agreement with the oracle

def test_decrypt_iff_policy_satisfied(registry, rng):
    rnd = random.Random(13)
    for _ in range(12):
        policy = random_policy(rnd)
        ct = registry.encrypt(policy, b"the broadcast nonce", rng)
        for r in range(len(ATTRS6) + 1):
            for subset in itertools.combinations(ATTRS6, r):
                keys = issue(registry, "bob", set(subset)) if subset else []
                should = abe.policy_satisfied(policy, set(subset))
                if should:
                    assert abe.decrypt(keys, ct, now=1.0) == b"the broadcast nonce"
                else:
                    with pytest.raises(abe.PolicyNotSatisfied):
                        abe.decrypt(keys, ct, now=1.0)


def test_threshold_subsets(registry, rng):
    pol = Threshold(2, (Leaf("a1", "attr0"), Leaf("a1", "attr1"),
                        Leaf("a1", "attr2")))
    ct = registry.encrypt(pol, b"m", rng)
    ok = issue(registry, "u", {("a1", "attr0"), ("a1", "attr2")})
    assert abe.decrypt(ok, ct, now=0.5) == b"m"
    short = issue(registry, "u", {("a1", "attr1")})
    with pytest.raises(abe.PolicyNotSatisfied):
        abe.decrypt(short, ct, now=0.5)


def test_two_authority_composition(registry, rng):
    pol = And((Leaf("a1", "attr0"), Leaf("a2", "attr0")))
    ct = registry.encrypt(pol, b"joint", rng)
    keys = issue(registry, "bob", {("a1", "attr0"), ("a2", "attr0")})
    assert len(keys) == 2  # one key object per authority, same gid
    assert abe.decrypt(keys, ct, now=0.0) == b"joint"


# ---------------------------------------------------------------------------
# authority lifecycle

def test_duplicate_authority(registry, rng):
    with pytest.raises(abe.DuplicateAuthority):
        registry.setup_authority("a1", rng)


def test_authority_independence(registry, rng):
    assert registry.authority("a1").master_secret != \
        registry.authority("a2").master_secret


def test_foreign_attribute(registry):
    with pytest.raises(abe.ForeignAttribute):
        abe.keygen(registry.authority("a1"), "u", {("a2", "attr0")}, 10.0)


def test_unknown_authority_at_encrypt(registry, rng):
    with pytest.raises(abe.UnknownAuthority):
        registry.encrypt(Leaf("nobody", "x"), b"m", rng)


def test_deleting_unrelated_authority_leaves_decryption_intact(registry, rng):
    pol = Leaf("a1", "attr0")
    ct = registry.encrypt(pol, b"m", rng)
    keys = issue(registry, "u", {("a1", "attr0")})
    registry.remove_authority("a2")
    assert abe.decrypt(keys, ct, now=0.0) == b"m"


# ---------------------------------------------------------------------------
# expiry

def test_expired_keys_raise_key_expired(registry, rng):
    ct = registry.encrypt(Leaf("a1", "attr0"), b"m", rng)
    keys = issue(registry, "u", {("a1", "attr0")}, validity=100.0, now=0.0)
    assert abe.decrypt(keys, ct, now=99.9) == b"m"
    with pytest.raises(abe.KeyExpired):
        abe.decrypt(keys, ct, now=100.0)  # closed-open validity
    with pytest.raises(abe.KeyExpired):
        abe.decrypt(keys, ct, now=5000.0)


def test_renewed_attribute_copy_supersedes_expired(registry, rng):
    ct = registry.encrypt(Leaf("a1", "attr0"), b"m", rng)
    old = issue(registry, "u", {("a1", "attr0")}, validity=10.0, now=0.0)
    fresh = issue(registry, "u", {("a1", "attr0")}, validity=10.0, now=50.0)
    assert abe.decrypt(old + fresh, ct, now=55.0) == b"m"


# ---------------------------------------------------------------------------
# collusion binding

def test_cross_gid_keys_never_combine(registry, rng):
    pol = And((Leaf("a1", "attr0"), Leaf("a2", "attr0")))
    ct = registry.encrypt(pol, b"m", rng)
    k_bob = issue(registry, "bob", {("a1", "attr0")})
    k_eve = issue(registry, "eve", {("a2", "attr0")})
    with pytest.raises(abe.PolicyNotSatisfied):
        abe.decrypt(k_bob + k_eve, ct, now=0.0)


def test_mixed_gid_shares_reconstruct_garbage(registry, rng):
    # bypass the per-gid grouping and mix leaf values algebraically
    pol = And((Leaf("a1", "attr0"), Leaf("a2", "attr0")))
    ct = registry.encrypt(pol, b"m", rng)
    k_bob = issue(registry, "bob", {("a1", "attr0"), ("a2", "attr0")})
    k_eve = issue(registry, "eve", {("a2", "attr0")})
    live_all, _ = abe._usable_shares(k_bob, 0.0)
    live_eve, _ = abe._usable_shares(k_eve, 0.0)
    good = abe._leaf_values(ct, live_all["bob"], abe._gid_field("bob"))
    z_good = abe._recover(ct.policy, good, [0])
    mixed = dict(good)
    mixed.update(abe._leaf_values(ct, live_eve["eve"], abe._gid_field("eve")))
    z_mixed = abe._recover(ct.policy, mixed, [0])
    assert z_mixed is not None and z_mixed != z_good


def test_relabelled_gid_share_rejected(registry, rng):
    # a key forged by renaming its gid loses its issuance binder
    ct = registry.encrypt(Leaf("a1", "attr0"), b"m", rng)
    (key,) = issue(registry, "bob", {("a1", "attr0")})
    forged = abe.UserAbeKey(user_gid="eve", shares=dict(key.shares),
                            issued_at=key.issued_at, expires_at=key.expires_at)
    with pytest.raises(abe.PolicyNotSatisfied):
        abe.decrypt([forged], ct, now=0.0)


def test_forged_share_values_never_reveal_plaintext(registry, rng):
    # satisfiable-looking keys with bogus share secrets fail the body check
    ct = registry.encrypt(Leaf("a1", "attr0"), b"m", rng)
    w_fake = rng.bytes(32)
    forged = abe.UserAbeKey(
        user_gid="mallory",
        shares={("a1", "attr0"): w_fake + abe._gid_binder(w_fake, "mallory")},
        issued_at=0.0, expires_at=10.0)
    with pytest.raises(crypto.AuthenticationFailed):
        abe.decrypt([forged], ct, now=0.0)


# ---------------------------------------------------------------------------
# serialization

def test_ciphertext_codec_round_trip(registry, rng):
    pol = Threshold(2, (Leaf("a1", "attr0"), Leaf("a2", "attr1"),
                        Leaf("a1", "attr2")))
    ct = registry.encrypt(pol, b"payload", rng)
    again = abe.AbeCiphertext.from_bytes(ct.to_bytes())
    assert again == ct
    keys = issue(registry, "u", {("a1", "attr0"), ("a2", "attr1")})
    assert abe.decrypt(keys, again, now=0.0) == b"payload"


def test_ciphertext_codec_rejects_damage(registry, rng):
    ct = registry.encrypt(Leaf("a1", "attr0"), b"m", rng).to_bytes()
    with pytest.raises(abe.MalformedCiphertext):
        abe.AbeCiphertext.from_bytes(b"\x7f" + ct[1:])  # format byte
    with pytest.raises(abe.MalformedCiphertext):
        abe.AbeCiphertext.from_bytes(ct[:10])            # truncation
    with pytest.raises(abe.MalformedCiphertext):
        abe.AbeCiphertext.from_bytes(ct + b"\x00")       # trailing octets


def test_policy_codec_round_trip():
    pol = And((Or((Leaf("a1", "x"), Leaf("a2", "y"))),
               Threshold(2, (Leaf("a1", "p"), Leaf("a1", "q"), Leaf("a2", "r")))))
    assert abe.policy_from_bytes(abe.policy_to_bytes(pol)) == pol


def test_tampered_embedded_policy_fails_body_check(registry, rng):
    # swapping the embedded policy for another one breaks the aad binding
    pol_a = Leaf("a1", "attr0")
    pol_b = Leaf("a1", "attr1")
    ct = registry.encrypt(And((pol_a,)), b"m", rng)
    forged = abe.AbeCiphertext(And((pol_b,)), ct.ct_nonce, ct.leaf_blocks,
                               ct.body_nonce, ct.body)
    keys = issue(registry, "u", {("a1", "attr0"), ("a1", "attr1")})
    with pytest.raises(crypto.AuthenticationFailed):
        abe.decrypt(keys, forged, now=0.0)
