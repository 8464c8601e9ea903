"""Multi-authority ciphertext-policy ABE gate with a desk-scale backend.

The interface (authority setup, per-attribute key issuance, policy-tree
encryption, decryption gated on attribute possession) is what the rest of
the protocol programs against. The reference backend is NOT a pairing
scheme: it linearly shares a fresh content key down the policy tree over a
256-bit prime field (AND = additive split, OR = replication, THRESHOLD =
Shamir), wraps each leaf share under a prf of that attribute's authority
secret, and binds decryption to a single user identity by carrying a
parallel sharing of zero that only cancels when every leaf is unwrapped
under the same user gid. A real pairing backend can be slotted in behind
the same functions.

Sharing layout per leaf, over field Z_q (q = the curve group order):

    A = lam + F(W_attr, nonce | idx | 0x01)      lam: share of the secret z
    B = omg + F(W_attr, nonce | idx | 0x02)      omg: share of zero

and the value entering reconstruction is (A - mask1) + h(gid) * (B - mask2),
so mixing gids perturbs the zero-sharing and reconstructs garbage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import crypto, ec
from .crypto import prf

FIELD_ORDER = ec.N
CT_FORMAT = 0x01
KEY_FORMAT = 0x01


class AbeError(Exception):
    pass


class DuplicateAuthority(AbeError):
    pass


class UnknownAuthority(AbeError):
    pass


class ForeignAttribute(AbeError):
    pass


class PolicyNotSatisfied(AbeError):
    pass


class KeyExpired(AbeError):
    """Every copy of some required attribute share is outside its validity."""


class MalformedCiphertext(AbeError):
    pass


# ---------------------------------------------------------------------------
# Access policies

@dataclass(frozen=True)
class Leaf:
    authority_id: str
    attribute: str


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("AND requires at least one child")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        if not self.children:
            raise ValueError("OR requires at least one child")


@dataclass(frozen=True)
class Threshold:
    k: int
    children: tuple

    def __post_init__(self):
        if not 1 <= self.k <= len(self.children):
            raise ValueError("threshold k must be in 1..len(children)")


def policy_satisfied(policy, attrs) -> bool:
    """Pure evaluation of a policy tree against a set of (authority, attr)."""
    if isinstance(policy, Leaf):
        return (policy.authority_id, policy.attribute) in attrs
    if isinstance(policy, And):
        return all(policy_satisfied(c, attrs) for c in policy.children)
    if isinstance(policy, Or):
        return any(policy_satisfied(c, attrs) for c in policy.children)
    if isinstance(policy, Threshold):
        return sum(policy_satisfied(c, attrs) for c in policy.children) >= policy.k
    raise TypeError(f"not a policy node: {policy!r}")


def policy_leaves(policy) -> list[Leaf]:
    """Leaves in depth-first order; the order fixes ciphertext share indices."""
    if isinstance(policy, Leaf):
        return [policy]
    out = []
    for c in policy.children:
        out.extend(policy_leaves(c))
    return out


def policy_to_bytes(policy) -> bytes:
    if isinstance(policy, Leaf):
        a = policy.authority_id.encode()
        t = policy.attribute.encode()
        return b"\x04" + struct.pack(">H", len(a)) + a + struct.pack(">H", len(t)) + t
    if isinstance(policy, And):
        tag = b"\x01" + bytes([len(policy.children)])
    elif isinstance(policy, Or):
        tag = b"\x02" + bytes([len(policy.children)])
    elif isinstance(policy, Threshold):
        tag = b"\x03" + bytes([policy.k, len(policy.children)])
    else:
        raise TypeError(f"not a policy node: {policy!r}")
    return tag + b"".join(policy_to_bytes(c) for c in policy.children)


def policy_from_bytes(data: bytes):
    node, rest = _parse_policy(data)
    if rest:
        raise MalformedCiphertext("trailing octets after policy")
    return node


def _parse_policy(data: bytes):
    if not data:
        raise MalformedCiphertext("truncated policy")
    tag = data[0]
    if tag == 0x04:
        if len(data) < 3:
            raise MalformedCiphertext("truncated leaf")
        alen = struct.unpack(">H", data[1:3])[0]
        off = 3 + alen
        if len(data) < off + 2:
            raise MalformedCiphertext("truncated leaf")
        tlen = struct.unpack(">H", data[off:off + 2])[0]
        end = off + 2 + tlen
        if len(data) < end:
            raise MalformedCiphertext("truncated leaf")
        return Leaf(data[1 + 2:off].decode(), data[off + 2:end].decode()), data[end:]
    if tag == 0x01 or tag == 0x02:
        if len(data) < 2:
            raise MalformedCiphertext("truncated gate")
        count, rest = data[1], data[2:]
        kids = []
        for _ in range(count):
            kid, rest = _parse_policy(rest)
            kids.append(kid)
        cls = And if tag == 0x01 else Or
        return cls(tuple(kids)), rest
    if tag == 0x03:
        if len(data) < 3:
            raise MalformedCiphertext("truncated threshold")
        k, count, rest = data[1], data[2], data[3:]
        kids = []
        for _ in range(count):
            kid, rest = _parse_policy(rest)
            kids.append(kid)
        return Threshold(k, tuple(kids)), rest
    raise MalformedCiphertext(f"unknown policy tag {tag:#x}")


# ---------------------------------------------------------------------------
# Authorities and keys

@dataclass(frozen=True)
class AuthorityKeys:
    authority_id: str
    master_secret: bytes
    public_params: bytes


@dataclass(frozen=True)
class UserAbeKey:
    user_gid: str
    shares: dict          # (authority_id, attribute) -> 64-octet W | delta
    issued_at: float
    expires_at: float

    def attributes(self):
        return frozenset(self.shares)


def _attr_secret(master_secret: bytes, attribute: str) -> bytes:
    return prf(master_secret, b"ATTR" + attribute.encode())


def _gid_binder(attr_secret: bytes, user_gid: str) -> bytes:
    return prf(attr_secret, b"GID" + user_gid.encode())


def _gid_field(user_gid: str) -> int:
    return int.from_bytes(prf(b"LOCATHE-ABE-H", user_gid.encode()), "big") % FIELD_ORDER


def _field_elt(key: bytes, data: bytes) -> int:
    return int.from_bytes(prf(key, data), "big") % FIELD_ORDER


class AbeRegistry:
    """Authority registry; read-mostly, setup calls must be serialized."""

    def __init__(self):
        self._authorities: dict[str, AuthorityKeys] = {}

    def setup_authority(self, authority_id: str, rng: crypto.Rng) -> AuthorityKeys:
        if authority_id in self._authorities:
            raise DuplicateAuthority(authority_id)
        master = rng.bytes(32)
        auth = AuthorityKeys(authority_id, master, prf(master, b"PUB"))
        self._authorities[authority_id] = auth
        return auth

    def authority(self, authority_id: str) -> AuthorityKeys:
        try:
            return self._authorities[authority_id]
        except KeyError:
            raise UnknownAuthority(authority_id) from None

    def remove_authority(self, authority_id: str):
        self._authorities.pop(authority_id, None)

    def __contains__(self, authority_id: str):
        return authority_id in self._authorities

    def encrypt(self, policy, plaintext: bytes, rng: crypto.Rng) -> "AbeCiphertext":
        return encrypt(self, policy, plaintext, rng)


def keygen(auth: AuthorityKeys, user_gid: str, attrs, validity: float,
           now: float = 0.0) -> UserAbeKey:
    """Issue one authority's shares for the given attributes."""
    shares = {}
    for authority_id, attribute in sorted(attrs):
        if authority_id != auth.authority_id:
            raise ForeignAttribute(f"{authority_id}/{attribute} not issued by "
                                   f"{auth.authority_id}")
        w = _attr_secret(auth.master_secret, attribute)
        shares[(authority_id, attribute)] = w + _gid_binder(w, user_gid)
    return UserAbeKey(user_gid=user_gid, shares=shares,
                      issued_at=now, expires_at=now + validity)


# ---------------------------------------------------------------------------
# Encryption

@dataclass(frozen=True)
class AbeCiphertext:
    policy: object
    ct_nonce: bytes                  # 16 octets, freshly random per ciphertext
    leaf_blocks: tuple               # (A, B) field-element pairs, DFS leaf order
    body_nonce: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        pol = policy_to_bytes(self.policy)
        out = bytearray([CT_FORMAT])
        out += struct.pack(">H", len(pol)) + pol
        out += self.ct_nonce
        out += struct.pack(">H", len(self.leaf_blocks))
        for a, b in self.leaf_blocks:
            out += a.to_bytes(32, "big") + b.to_bytes(32, "big")
        out += self.body_nonce
        out += struct.pack(">H", len(self.body)) + self.body
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AbeCiphertext":
        try:
            if data[0] != CT_FORMAT:
                raise MalformedCiphertext(f"unsupported format {data[0]:#x}")
            plen = struct.unpack(">H", data[1:3])[0]
            off = 3 + plen
            policy = policy_from_bytes(data[1 + 2:off])
            ct_nonce = data[off:off + 16]
            off += 16
            nleaves = struct.unpack(">H", data[off:off + 2])[0]
            off += 2
            blocks = []
            for _ in range(nleaves):
                a = int.from_bytes(data[off:off + 32], "big")
                b = int.from_bytes(data[off + 32:off + 64], "big")
                blocks.append((a, b))
                off += 64
            body_nonce = data[off:off + 12]
            off += 12
            blen = struct.unpack(">H", data[off:off + 2])[0]
            body = data[off + 2:off + 2 + blen]
            if len(body) != blen or len(ct_nonce) != 16 or len(body_nonce) != 12:
                raise MalformedCiphertext("truncated ciphertext")
            if off + 2 + blen != len(data):
                raise MalformedCiphertext("trailing octets")
            return cls(policy, ct_nonce, tuple(blocks), body_nonce, body)
        except (IndexError, struct.error):
            raise MalformedCiphertext("truncated ciphertext") from None


def _share_tree(node, lam: int, omg: int, rng: crypto.Rng, out: list):
    if isinstance(node, Leaf):
        out.append((node, lam, omg))
        return
    kids = node.children
    if isinstance(node, And):
        lsum = osum = 0
        for c in kids[:-1]:
            lr, om = _rand_elt(rng), _rand_elt(rng)
            lsum, osum = (lsum + lr) % FIELD_ORDER, (osum + om) % FIELD_ORDER
            _share_tree(c, lr, om, rng, out)
        _share_tree(kids[-1], (lam - lsum) % FIELD_ORDER,
                    (omg - osum) % FIELD_ORDER, rng, out)
    elif isinstance(node, Or):
        for c in kids:
            _share_tree(c, lam, omg, rng, out)
    elif isinstance(node, Threshold):
        lcoef = [lam] + [_rand_elt(rng) for _ in range(node.k - 1)]
        ocoef = [omg] + [_rand_elt(rng) for _ in range(node.k - 1)]
        for x, c in enumerate(kids, start=1):
            _share_tree(c, _poly_eval(lcoef, x), _poly_eval(ocoef, x), rng, out)
    else:
        raise TypeError(f"not a policy node: {node!r}")


def _rand_elt(rng: crypto.Rng) -> int:
    return int.from_bytes(rng.bytes(32), "big") % FIELD_ORDER


def _poly_eval(coef: list, x: int) -> int:
    acc = 0
    for c in reversed(coef):
        acc = (acc * x + c) % FIELD_ORDER
    return acc


def encrypt(registry: AbeRegistry, policy, plaintext: bytes,
            rng: crypto.Rng) -> AbeCiphertext:
    leaves = policy_leaves(policy)
    if not leaves:
        raise ValueError("empty policy")
    for leaf in leaves:
        if leaf.authority_id not in registry:
            raise UnknownAuthority(leaf.authority_id)
    z = _rand_elt(rng)
    ct_nonce = rng.bytes(16)
    shares: list = []
    _share_tree(policy, z, 0, rng, shares)
    assert [n for n, _, _ in shares] == leaves

    blocks = []
    for idx, (leaf, lam, omg) in enumerate(shares):
        w = _attr_secret(registry.authority(leaf.authority_id).master_secret,
                         leaf.attribute)
        m1 = _field_elt(w, ct_nonce + struct.pack(">I", idx) + b"\x01")
        m2 = _field_elt(w, ct_nonce + struct.pack(">I", idx) + b"\x02")
        blocks.append(((lam + m1) % FIELD_ORDER, (omg + m2) % FIELD_ORDER))

    content_key = prf(z.to_bytes(32, "big"), b"CONTENT")
    body_nonce = rng.nonce()
    body = crypto.enc_auth(content_key, body_nonce, plaintext,
                           aad=policy_to_bytes(policy))
    return AbeCiphertext(policy, ct_nonce, tuple(blocks), body_nonce, body)


# ---------------------------------------------------------------------------
# Decryption

def _usable_shares(keys, now: float):
    """Per gid: attribute -> W secret, split by validity. Binder-checked."""
    live: dict[str, dict] = {}
    any_time: dict[str, dict] = {}
    for key in keys:
        for (authority_id, attribute), blob in key.shares.items():
            w, binder = blob[:32], blob[32:]
            if binder != _gid_binder(w, key.user_gid):
                continue  # share was not issued for this gid
            any_time.setdefault(key.user_gid, {})[(authority_id, attribute)] = w
            if key.issued_at <= now < key.expires_at:
                live.setdefault(key.user_gid, {})[(authority_id, attribute)] = w
    return live, any_time


def _leaf_values(ct: AbeCiphertext, shares: dict, h: int):
    """Recoverable per-leaf reconstruction inputs for one gid."""
    values = {}
    for idx, leaf in enumerate(policy_leaves(ct.policy)):
        w = shares.get((leaf.authority_id, leaf.attribute))
        if w is None:
            continue
        a, b = ct.leaf_blocks[idx]
        m1 = _field_elt(w, ct.ct_nonce + struct.pack(">I", idx) + b"\x01")
        m2 = _field_elt(w, ct.ct_nonce + struct.pack(">I", idx) + b"\x02")
        values[idx] = ((a - m1) + h * (b - m2)) % FIELD_ORDER
    return values


def _recover(node, values: dict, counter: list):
    if isinstance(node, Leaf):
        idx = counter[0]
        counter[0] += 1
        return values.get(idx)
    if isinstance(node, And):
        total = 0
        ok = True
        for c in node.children:
            v = _recover(c, values, counter)
            if v is None:
                ok = False
            else:
                total = (total + v) % FIELD_ORDER
        return total if ok else None
    if isinstance(node, Or):
        result = None
        for c in node.children:
            v = _recover(c, values, counter)
            if result is None and v is not None:
                result = v
        return result
    if isinstance(node, Threshold):
        got = []
        for x, c in enumerate(node.children, start=1):
            v = _recover(c, values, counter)
            if v is not None:
                got.append((x, v))
        if len(got) < node.k:
            return None
        return _lagrange_zero(got[:node.k])
    raise TypeError(f"not a policy node: {node!r}")


def _lagrange_zero(points):
    total = 0
    for i, (xi, yi) in enumerate(points):
        num = den = 1
        for j, (xj, _) in enumerate(points):
            if i == j:
                continue
            num = num * xj % FIELD_ORDER
            den = den * (xj - xi) % FIELD_ORDER
        total = (total + yi * num * pow(den, -1, FIELD_ORDER)) % FIELD_ORDER
    return total


def decrypt(keys, ct: AbeCiphertext, now: float) -> bytes:
    """Recover the plaintext iff one gid's unexpired attributes satisfy
    the embedded policy. Shares from different gids never combine."""
    live, any_time = _usable_shares(keys, now)
    expired_would_satisfy = False
    for gid, shares in any_time.items():
        live_attrs = frozenset(live.get(gid, ()))
        if policy_satisfied(ct.policy, live_attrs):
            values = _leaf_values(ct, live[gid], _gid_field(gid))
            z = _recover(ct.policy, values, [0])
            assert z is not None
            content_key = prf(z.to_bytes(32, "big"), b"CONTENT")
            return crypto.dec_auth(content_key, ct.body_nonce, ct.body,
                                   aad=policy_to_bytes(ct.policy))
        if policy_satisfied(ct.policy, frozenset(shares)):
            expired_would_satisfy = True
    if expired_would_satisfy:
        raise KeyExpired("required attribute shares have expired")
    raise PolicyNotSatisfied("attributes do not satisfy the policy")
