"""Out-of-band registration: credential issuance, expiry, renewal.

The service generates a high-entropy UserKey (or stretches a user-supplied
password into one), precomputes the stored-password form Spwd, issues the
ABE attribute keys and token seed, and hands the user agent a bundle that
deliberately omits the UserKey itself: the user side only ever holds Spwd.

Records live for a policy window (15 days by default) with closed-open
validity [issued_at, expires_at); expired records behave like absent ones
on every protocol-visible surface so that user enumeration by expiry
probing is impossible. Registration and renewal mutate the registry and
must be serialized by the caller (single-writer); lookups may be
concurrent.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

from . import abe, crypto
from .crypto import Point, Rng, TokenSeed

DEFAULT_EXPIRY_SECONDS = 15 * 86400.0  # 15-day credential policy
REG_KDF_ITERATIONS = crypto.KDF_DEFAULT_ITERATIONS
REGISTRY_FORMAT = 1
BUNDLE_FORMAT = 1

USER_KEY_LEN = 32
SPWD_SALT_LEN = 16
TOKEN_SEED_LEN = 32


class RegistrationError(Exception):
    pass


class AlreadyRegistered(RegistrationError):
    pass


class UnknownUser(RegistrationError):
    pass


class RecordExpired(RegistrationError):
    """Internal distinction only: on the wire this is identical to UnknownUser."""


def derive_spwd(user_key: bytes, salt: bytes) -> bytes:
    """Stored-password form of the UserKey; computed once at registration."""
    return crypto.kdf_stretch(user_key, salt, REG_KDF_ITERATIONS)


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    user_key: bytes
    spwd: bytes
    kdf_salt: bytes
    token_seed: TokenSeed
    abe_keys: tuple
    issued_at: float
    expires_at: float
    relying_party_id: str | None = None

    def active(self, now: float) -> bool:
        return self.issued_at <= now < self.expires_at


@dataclass(frozen=True)
class RegistrationBundle:
    """Everything the user agent stores. Never contains the UserKey."""
    user_id: str
    spwd: bytes
    kdf_salt: bytes
    token_seed: TokenSeed
    abe_keys: tuple
    service_id: str
    service_sign_pk: Point
    curve_id: str
    prf_id: str
    issued_at: float
    expires_at: float

    def to_json(self) -> str:
        doc = {
            "format": BUNDLE_FORMAT,
            "user_id": self.user_id,
            "spwd": _b64(self.spwd),
            "kdf_salt": _b64(self.kdf_salt),
            "token_seed": _seed_doc(self.token_seed),
            "abe_keys": [_abe_key_doc(k) for k in self.abe_keys],
            "service_id": self.service_id,
            "service_sign_pk": _b64(self.service_sign_pk.encode()),
            "curve_id": self.curve_id,
            "prf_id": self.prf_id,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RegistrationBundle":
        doc = json.loads(text)
        if doc.get("format") != BUNDLE_FORMAT:
            raise RegistrationError("unsupported bundle format")
        return cls(
            user_id=doc["user_id"],
            spwd=_unb64(doc["spwd"]),
            kdf_salt=_unb64(doc["kdf_salt"]),
            token_seed=_seed_from_doc(doc["token_seed"]),
            abe_keys=tuple(_abe_key_from_doc(k) for k in doc["abe_keys"]),
            service_id=doc["service_id"],
            service_sign_pk=Point.decode(_unb64(doc["service_sign_pk"])),
            curve_id=doc["curve_id"],
            prf_id=doc["prf_id"],
            issued_at=doc["issued_at"],
            expires_at=doc["expires_at"],
        )


def make_certificate(service_id: str, sign_sk: int, sign_pk: Point) -> bytes:
    """Self-signed desk-scale certificate: id | pk | signature."""
    ident = service_id.encode()
    body = bytes([len(ident)]) + ident + sign_pk.encode()
    return body + crypto.sign(sign_sk, body)


def check_certificate(cert: bytes, expected_pk: Point) -> bool:
    if len(cert) < 1:
        return False
    idlen = cert[0]
    body, sig = cert[:1 + idlen + 33], cert[1 + idlen + 33:]
    if len(body) != 1 + idlen + 33 or len(sig) != 64:
        return False
    try:
        pk = Point.decode(body[1 + idlen:])
    except Exception:
        return False
    return pk == expected_pk and crypto.verify(pk, body, sig)


class ServiceRegistry:
    """Service-side credential store plus the service's own key material."""

    def __init__(self, service_id: str, rng: Rng,
                 expiry_seconds: float = DEFAULT_EXPIRY_SECONDS):
        self.service_id = service_id
        self.expiry_seconds = expiry_seconds
        self.sign_sk, self.sign_pk = crypto.signature_keypair(rng)
        self.abe = abe.AbeRegistry()
        self.abe.setup_authority(service_id, rng)
        self._users: dict[tuple, UserRecord] = {}
        self.certificate = make_certificate(service_id, self.sign_sk, self.sign_pk)

    # -- registration ------------------------------------------------------

    def register_user(self, user_id: str, attrs, password: bytes | None = None,
                      now: float = 0.0, relying_party_id: str | None = None,
                      rng: Rng | None = None) -> RegistrationBundle:
        rng = rng or Rng()
        key = (user_id, relying_party_id)
        existing = self._users.get(key)
        if existing is not None and existing.active(now):
            raise AlreadyRegistered(user_id)
        record = self._make_record(user_id, attrs, password, now,
                                   relying_party_id, rng)
        self._users[key] = record
        return self._bundle_for(record)

    def renew_user(self, user_id: str, now: float = 0.0,
                   relying_party_id: str | None = None,
                   rng: Rng | None = None) -> RegistrationBundle:
        rng = rng or Rng()
        key = (user_id, relying_party_id)
        old = self._users.get(key)
        if old is None:
            raise UnknownUser(user_id)
        attrs = set()
        for k in old.abe_keys:
            attrs |= set(k.shares)
        record = self._make_record(user_id, attrs, None, now,
                                   relying_party_id, rng)
        self._users[key] = record
        return self._bundle_for(record)

    def lookup_user(self, user_id: str, now: float,
                    relying_party_id: str | None = None) -> UserRecord:
        record = self._users.get((user_id, relying_party_id))
        if record is None:
            raise UnknownUser(user_id)
        if not record.active(now):
            raise RecordExpired(user_id)
        return record

    def _make_record(self, user_id, attrs, password, now, relying_party_id,
                     rng) -> UserRecord:
        if password is not None:
            pw_salt = rng.bytes(SPWD_SALT_LEN)
            user_key = crypto.kdf_stretch(password, pw_salt, REG_KDF_ITERATIONS)
        else:
            user_key = rng.bytes(USER_KEY_LEN)
        kdf_salt = rng.bytes(SPWD_SALT_LEN)
        spwd = derive_spwd(user_key, kdf_salt)
        token_seed = TokenSeed(seed=rng.bytes(TOKEN_SEED_LEN))
        abe_keys = self._issue_abe_keys(user_id, attrs, now, rng)
        return UserRecord(
            user_id=user_id, user_key=user_key, spwd=spwd, kdf_salt=kdf_salt,
            token_seed=token_seed, abe_keys=abe_keys, issued_at=now,
            expires_at=now + self.expiry_seconds,
            relying_party_id=relying_party_id)

    def _issue_abe_keys(self, user_id, attrs, now, rng) -> tuple:
        by_authority: dict[str, set] = {}
        for authority_id, attribute in attrs:
            by_authority.setdefault(authority_id, set()).add((authority_id, attribute))
        keys = []
        for authority_id in sorted(by_authority):
            auth = self.abe.authority(authority_id)
            keys.append(abe.keygen(auth, user_id, by_authority[authority_id],
                                   validity=self.expiry_seconds, now=now))
        return tuple(keys)

    def _bundle_for(self, record: UserRecord) -> RegistrationBundle:
        return RegistrationBundle(
            user_id=record.user_id, spwd=record.spwd, kdf_salt=record.kdf_salt,
            token_seed=record.token_seed, abe_keys=record.abe_keys,
            service_id=self.service_id, service_sign_pk=self.sign_pk,
            curve_id=crypto.CURVE_ID, prf_id=crypto.PRF_ID,
            issued_at=record.issued_at, expires_at=record.expires_at)

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": REGISTRY_FORMAT,
            "service_id": self.service_id,
            "expiry_seconds": self.expiry_seconds,
            "sign_sk": _b64(crypto.scalar_bytes(self.sign_sk)),
            "authorities": {
                aid: {"master_secret": _b64(a.master_secret),
                      "public_params": _b64(a.public_params)}
                for aid, a in self.abe._authorities.items()
            },
            "users": [
                {
                    "user_id": r.user_id,
                    "relying_party_id": r.relying_party_id,
                    "user_key": _b64(r.user_key),
                    "spwd": _b64(r.spwd),
                    "kdf_salt": _b64(r.kdf_salt),
                    "token_seed": _seed_doc(r.token_seed),
                    "abe_keys": [_abe_key_doc(k) for k in r.abe_keys],
                    "issued_at": r.issued_at,
                    "expires_at": r.expires_at,
                }
                for r in self._users.values()
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ServiceRegistry":
        doc = json.loads(text)
        if doc.get("format") != REGISTRY_FORMAT:
            raise RegistrationError("unsupported registry format")
        reg = cls.__new__(cls)
        reg.service_id = doc["service_id"]
        reg.expiry_seconds = doc["expiry_seconds"]
        reg.sign_sk = int.from_bytes(_unb64(doc["sign_sk"]), "big")
        from . import ec
        reg.sign_pk = ec.base_mult(reg.sign_sk)
        reg.abe = abe.AbeRegistry()
        for aid, a in doc["authorities"].items():
            reg.abe._authorities[aid] = abe.AuthorityKeys(
                aid, _unb64(a["master_secret"]), _unb64(a["public_params"]))
        reg._users = {}
        for u in doc["users"]:
            record = UserRecord(
                user_id=u["user_id"], user_key=_unb64(u["user_key"]),
                spwd=_unb64(u["spwd"]), kdf_salt=_unb64(u["kdf_salt"]),
                token_seed=_seed_from_doc(u["token_seed"]),
                abe_keys=tuple(_abe_key_from_doc(k) for k in u["abe_keys"]),
                issued_at=u["issued_at"], expires_at=u["expires_at"],
                relying_party_id=u["relying_party_id"])
            reg._users[(record.user_id, record.relying_party_id)] = record
        reg.certificate = make_certificate(reg.service_id, reg.sign_sk, reg.sign_pk)
        return reg

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ServiceRegistry":
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- JSON helpers -----------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


def _unb64(text: str) -> bytes:
    return base64.b64decode(text)


def _seed_doc(seed: TokenSeed) -> dict:
    return {"seed": _b64(seed.seed), "step_seconds": seed.step_seconds,
            "digits": seed.digits}


def _seed_from_doc(doc: dict) -> TokenSeed:
    return TokenSeed(seed=_unb64(doc["seed"]), step_seconds=doc["step_seconds"],
                     digits=doc["digits"])


def _abe_key_doc(key: abe.UserAbeKey) -> dict:
    return {
        "user_gid": key.user_gid,
        "shares": [[a, t, _b64(v)] for (a, t), v in sorted(key.shares.items())],
        "issued_at": key.issued_at,
        "expires_at": key.expires_at,
    }


def _abe_key_from_doc(doc: dict) -> abe.UserAbeKey:
    return abe.UserAbeKey(
        user_gid=doc["user_gid"],
        shares={(a, t): _unb64(v) for a, t, v in doc["shares"]},
        issued_at=doc["issued_at"], expires_at=doc["expires_at"])
