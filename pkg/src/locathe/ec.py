"""NIST P-256 group arithmetic, pure Python.

Short-Weierstrass arithmetic in Jacobian coordinates with a precomputed
fixed-base window table, plus ECDSA over the same curve. Deterministic
throughout: signing derives its nonce from the secret key and message, so
transcripts are reproducible under a fixed seed.

This is desk-scale reference code: mathematically correct, no constant-time
or side-channel guarantees.
"""

from __future__ import annotations

import hashlib
import hmac

CURVE_ID = "P-256"

# secp256r1 domain parameters (SEC 2)
P = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
A = P - 3
B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5
N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551

SCALAR_LEN = 32
POINT_LEN = 33          # compressed SEC1
IDENTITY_ENC = b"\x00"  # internal encoding of the group identity


class InvalidPoint(ValueError):
    """Off-curve, non-canonical, or unexpectedly-identity point encoding."""


class MalformedSignature(ValueError):
    """Signature blob of the wrong shape."""


# ---------------------------------------------------------------------------
# Jacobian-coordinate primitives. A point is (X, Y, Z) with x = X/Z^2,
# y = Y/Z^3; Z == 0 is the identity. Formulas are the standard a = -3 ones
# (dbl-2001-b, add-2007-bl, madd-2007-bl).

_JID = (1, 1, 0)


def _jdouble(Xp, Yp, Zp):
    if not Zp or not Yp:
        return _JID
    delta = Zp * Zp % P
    gamma = Yp * Yp % P
    beta = Xp * gamma % P
    alpha = 3 * (Xp - delta) * (Xp + delta) % P
    X3 = (alpha * alpha - 8 * beta) % P
    Z3 = ((Yp + Zp) * (Yp + Zp) - gamma - delta) % P
    Y3 = (alpha * (4 * beta - X3) - 8 * gamma * gamma) % P
    return X3, Y3, Z3


def _jadd(X1, Y1, Z1, X2, Y2, Z2):
    if not Z1:
        return X2, Y2, Z2
    if not Z2:
        return X1, Y1, Z1
    Z1Z1 = Z1 * Z1 % P
    Z2Z2 = Z2 * Z2 % P
    U1 = X1 * Z2Z2 % P
    U2 = X2 * Z1Z1 % P
    S1 = Y1 * Z2 * Z2Z2 % P
    S2 = Y2 * Z1 * Z1Z1 % P
    H = (U2 - U1) % P
    if not H:
        if (S2 - S1) % P:
            return _JID
        return _jdouble(X1, Y1, Z1)
    I = 4 * H * H % P
    J = H * I % P
    r = 2 * (S2 - S1) % P
    V = U1 * I % P
    X3 = (r * r - J - 2 * V) % P
    Y3 = (r * (V - X3) - 2 * S1 * J) % P
    Z3 = ((Z1 + Z2) * (Z1 + Z2) - Z1Z1 - Z2Z2) * H % P
    return X3, Y3, Z3


def _jmadd(X1, Y1, Z1, x2, y2):
    # mixed addition with an affine second operand (Z2 = 1)
    if not Z1:
        return x2, y2, 1
    Z1Z1 = Z1 * Z1 % P
    U2 = x2 * Z1Z1 % P
    S2 = y2 * Z1 * Z1Z1 % P
    H = (U2 - X1) % P
    if not H:
        if (S2 - Y1) % P:
            return _JID
        return _jdouble(X1, Y1, Z1)
    HH = H * H % P
    I = 4 * HH % P
    J = H * I % P
    r = 2 * (S2 - Y1) % P
    V = X1 * I % P
    X3 = (r * r - J - 2 * V) % P
    Y3 = (r * (V - X3) - 2 * Y1 * J) % P
    Z3 = ((Z1 + H) * (Z1 + H) - Z1Z1 - HH) % P
    return X3, Y3, Z3


def _jnormalize(Xp, Yp, Zp):
    if not Zp:
        return None
    zi = pow(Zp, -1, P)
    zi2 = zi * zi % P
    return Xp * zi2 % P, Yp * zi2 * zi % P


def _batch_normalize(points):
    """Convert a list of Jacobian points to affine with one field inversion."""
    zs = [pt[2] for pt in points]
    prefix = [1] * (len(zs) + 1)
    for i, z in enumerate(zs):
        prefix[i + 1] = prefix[i] * z % P
    inv = pow(prefix[-1], -1, P)
    out = [None] * len(points)
    for i in range(len(points) - 1, -1, -1):
        zi = inv * prefix[i] % P
        inv = inv * zs[i] % P
        zi2 = zi * zi % P
        Xp, Yp, _ = points[i]
        out[i] = (Xp * zi2 % P, Yp * zi2 * zi % P)
    return out


def _jmult(k, x, y):
    """k * (x, y) via a 4-bit window; returns Jacobian."""
    # odd/even multiples 1..15 of the input point
    table = [None] * 16
    table[1] = (x, y, 1)
    table[2] = _jdouble(x, y, 1)
    for i in range(3, 16):
        table[i] = _jmadd(*table[i - 1], x, y)
    acc = _JID
    started = False
    for shift in range(252, -1, -4):
        if started:
            acc = _jdouble(*acc)
            acc = _jdouble(*acc)
            acc = _jdouble(*acc)
            acc = _jdouble(*acc)
        nib = (k >> shift) & 0xF
        if nib:
            acc = _jadd(*acc, *table[nib]) if started else table[nib]
            started = True
    return acc


# Fixed-base table: _BASE_TABLE[j][d - 1] = d * 16^j * G in affine, so a
# base multiplication is at most 64 mixed additions and no doublings.
_BASE_TABLE = None


def _build_base_table():
    global _BASE_TABLE
    table = []
    win = (GX, GY, 1)
    for _ in range(64):
        row = [None] * 15
        row[0] = win
        for d in range(1, 15):
            row[d] = _jadd(*row[d - 1], *win)
        table.append(row)
        win = _jadd(*row[14], *row[0])  # 16 * 16^j * G
    flat = _batch_normalize([pt for row in table for pt in row])
    _BASE_TABLE = [flat[i * 15:(i + 1) * 15] for i in range(64)]


def _jbase_mult(k):
    if _BASE_TABLE is None:
        _build_base_table()
    acc = _JID
    for j in range(64):
        nib = (k >> (4 * j)) & 0xF
        if nib:
            acc = _jmadd(*acc, *_BASE_TABLE[j][nib - 1])
    return acc


class Point:
    """A group element; ``Point.identity()`` is the neutral element."""

    __slots__ = ("x", "y")

    def __init__(self, x, y):
        self.x = x
        self.y = y

    @classmethod
    def identity(cls):
        return cls(None, None)

    @classmethod
    def base(cls):
        return cls(GX, GY)

    @property
    def is_identity(self):
        return self.x is None

    def __eq__(self, other):
        return isinstance(other, Point) and self.x == other.x and self.y == other.y

    def __hash__(self):
        return hash((self.x, self.y))

    def __repr__(self):
        if self.is_identity:
            return "Point(identity)"
        return f"Point(x={self.x:#x})"

    def on_curve(self):
        if self.is_identity:
            return True
        x, y = self.x, self.y
        return (y * y - (x * x * x + A * x + B)) % P == 0

    def __add__(self, other):
        if self.is_identity:
            return other
        if other.is_identity:
            return self
        j = _jadd(self.x, self.y, 1, other.x, other.y, 1)
        return _from_jacobian(j)

    def __neg__(self):
        if self.is_identity:
            return self
        return Point(self.x, (-self.y) % P)

    def mul(self, k):
        """Scalar multiplication; k is reduced mod the group order."""
        k %= N
        if k == 0 or self.is_identity:
            return Point.identity()
        return _from_jacobian(_jmult(k, self.x, self.y))

    def encode(self) -> bytes:
        if self.is_identity:
            return IDENTITY_ENC
        prefix = 2 + (self.y & 1)
        return bytes([prefix]) + self.x.to_bytes(32, "big")

    @classmethod
    def decode(cls, data: bytes) -> "Point":
        if data == IDENTITY_ENC:
            return cls.identity()
        if len(data) != POINT_LEN or data[0] not in (2, 3):
            raise InvalidPoint("bad point encoding")
        x = int.from_bytes(data[1:], "big")
        if x >= P:
            raise InvalidPoint("x out of range")
        rhs = (x * x * x + A * x + B) % P
        y = pow(rhs, (P + 1) // 4, P)
        if y * y % P != rhs:
            raise InvalidPoint("not on curve")
        if (y & 1) != (data[0] & 1):
            y = P - y
        return cls(x, y)


def _from_jacobian(j):
    aff = _jnormalize(*j)
    if aff is None:
        return Point.identity()
    return Point(*aff)


def base_mult(k: int) -> Point:
    k %= N
    if k == 0:
        return Point.identity()
    return _from_jacobian(_jbase_mult(k))


def scalar_mult(k: int, point: Point) -> Point:
    return point.mul(k)


def _dual_mult(u: int, v: int, q: Point):
    """u*G + v*Q by Shamir's trick; used only by signature verification."""
    gq = _jadd(GX, GY, 1, q.x, q.y, 1)
    gq_aff = _jnormalize(*gq)
    acc = _JID
    started = False
    for shift in range(max(u.bit_length(), v.bit_length()) - 1, -1, -1):
        if started:
            acc = _jdouble(*acc)
        ub = (u >> shift) & 1
        vb = (v >> shift) & 1
        if ub and vb:
            acc = _jmadd(*acc, *gq_aff) if gq_aff else acc
            started = True
        elif ub:
            acc = _jmadd(*acc, GX, GY)
            started = True
        elif vb:
            acc = _jmadd(*acc, q.x, q.y)
            started = True
    return acc


def ecdsa_sign(secret: int, data: bytes) -> bytes:
    """Sign SHA-256(data); returns 64 raw octets r || s.

    The nonce is an HMAC chain over (secret, digest), so signatures are a
    pure function of their inputs.
    """
    digest = hashlib.sha256(data).digest()
    e = int.from_bytes(digest, "big") % N
    sk = secret.to_bytes(32, "big")
    ctr = 0
    while True:
        mat = hmac.new(sk, b"ECDSA-NONCE" + digest + ctr.to_bytes(4, "big"),
                       hashlib.sha256).digest()
        ctr += 1
        k = int.from_bytes(mat, "big") % N
        if k == 0:
            continue
        r = _jnormalize(*_jbase_mult(k))[0] % N
        if r == 0:
            continue
        s = pow(k, -1, N) * (e + r * secret) % N
        if s == 0:
            continue
        return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def ecdsa_verify(pub: Point, data: bytes, sig: bytes) -> bool:
    if len(sig) != 64:
        raise MalformedSignature(f"expected 64 octets, got {len(sig)}")
    if pub.is_identity or not pub.on_curve():
        return False
    r = int.from_bytes(sig[:32], "big")
    s = int.from_bytes(sig[32:], "big")
    if not (1 <= r < N and 1 <= s < N):
        return False
    e = int.from_bytes(hashlib.sha256(data).digest(), "big") % N
    w = pow(s, -1, N)
    acc = _dual_mult(e * w % N, r * w % N, pub)
    aff = _jnormalize(*acc)
    if aff is None:
        return False
    return aff[0] % N == r
