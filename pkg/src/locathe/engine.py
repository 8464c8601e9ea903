"""Protocol engine: broadcast lifecycle and both session state machines.

The service periodically regenerates a random broadcast nonce, encrypts it
under the location's access policy, signs it, and advertises a compact
frame carrying a fetch handle (the full ciphertext never fits the
advertising budget). A user agent that can decrypt the fetched broadcast
starts a session: ECDHE exchange, then tier-1 (anonymous, attribute-only)
and/or tier-2 (individual, password-proof) authentication, then the final
exchange authentication that yields the long-term key.

Message handling is total: every inbound frame maps to a disposition
(IGNORE duplicate/out-of-phase, PROCESS, REJECT unroutable) and never an
exception. Sessions are confined to one logical execution context each;
the engines process one message at a time.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum, auto

from . import abe, crypto, keysched, wire
from .crypto import Point, Rng
from .keysched import ROLE_INITIATOR, ROLE_RESPONDER, SessionIds
from .registration import (RegistrationBundle, RegistrationError,
                           ServiceRegistry, check_certificate)
from .wire import ErrorReason, MsgType, ProtocolMessage, ZERO_SPI

TIER1 = 1
TIER2 = 2
TIER_BOTH = 3

DEFAULT_BROADCAST_INTERVAL = 0.1024  # 100 TU of 1024 us each
DEFAULT_NB_VALIDITY = 10.0
MAX_BROADCAST_RECORDS = 4
TOKEN_EPOCH_TOLERANCE = 1            # accept +-1 token epoch of clock skew

N_B_LEN = 32
NONCE_LEN = 32


class Disposition(Enum):
    IGNORE = auto()
    PROCESS = auto()
    REJECT = auto()


class Phase(Enum):
    AWAIT_BROADCAST = auto()
    AWAIT_KE = auto()
    AWAIT_T1 = auto()
    AWAIT_T2 = auto()
    AWAIT_T2_RESP = auto()
    AWAIT_FINAL = auto()
    ESTABLISHED = auto()
    FAILED = auto()


TERMINAL_PHASES = (Phase.ESTABLISHED, Phase.FAILED)


@dataclass
class BeaconConfig:
    beacon_id: bytes
    location_id: str
    access_policy: object
    broadcast_interval: float = DEFAULT_BROADCAST_INTERVAL
    nb_validity_d: float = DEFAULT_NB_VALIDITY

    def __post_init__(self):
        if len(self.beacon_id) != 8:
            raise ValueError("beacon_id must be 8 octets")
        if self.broadcast_interval <= 0:
            raise ValueError("broadcast_interval must be positive")
        if self.nb_validity_d < self.broadcast_interval:
            raise ValueError("nb validity must cover at least one interval")


@dataclass
class BroadcastRecord:
    n_b: bytes                      # random_24 | beacon_id_8
    bnonce: abe.AbeCiphertext
    signature: bytes
    issued_at: float
    expires_at: float
    fetch_handle: bytes
    fetch_resp: ProtocolMessage


def nb_window_check(record: BroadcastRecord, now: float) -> bool:
    """Valid iff issued_at <= now < issued_at + d."""
    return record.issued_at <= now < record.expires_at


def on_duplicate_or_stale(session, msg: ProtocolMessage) -> Disposition:
    """Counter-based duplicate handling; gaps are fine on a lossy medium."""
    if session is None:
        return Disposition.REJECT
    if msg.counter <= session.peer_hwm:
        return Disposition.IGNORE
    return Disposition.PROCESS


def _seal(key: bytes, role: int, msg_type: MsgType, spi_i: bytes, spi_r: bytes,
          counter: int, inner_sections) -> ProtocolMessage:
    header = (bytes([wire.FORMAT_VERSION, msg_type]) + spi_i + spi_r
              + struct.pack(">I", counter))
    nonce = bytes([role]) + bytes(7) + struct.pack(">I", counter)
    ct = crypto.enc_auth(key, nonce, wire.pack_sections(inner_sections), aad=header)
    return ProtocolMessage(msg_type, spi_i, spi_r, counter, (ct,))


def _open(key: bytes, role: int, msg: ProtocolMessage) -> tuple:
    if len(msg.sections) != 1:
        raise wire.MalformedMessage("encrypted frame carries one section")
    nonce = bytes([role]) + bytes(7) + struct.pack(">I", msg.counter)
    plain = crypto.dec_auth(key, nonce, msg.sections[0], aad=msg.header())
    return wire.unpack_sections(plain)


# ---------------------------------------------------------------------------
# Initiator (user agent) session

class InitiatorSession:
    """One handshake attempt from the user agent side."""

    def __init__(self, bundle: RegistrationBundle, n_b: bytes, fetch_handle: bytes,
                 tier: int, rng: Rng, now: float, service_request: bytes = b""):
        if tier not in (TIER1, TIER2, TIER_BOTH):
            raise ValueError(f"bad tier {tier}")
        self.bundle = bundle
        self.tier = tier
        self.rng = rng
        self.phase = Phase.AWAIT_KE
        self.failure_reason: str | None = None
        self.failure_phase: Phase | None = None
        self.service_request = service_request

        self.n_b = n_b
        self.fetch_handle = fetch_handle
        self.spi_i = _nonzero(rng, 8)
        self.spi_r = ZERO_SPI
        self.n_i = rng.bytes(NONCE_LEN)
        self._ki, self.ke_i = crypto.ecdhe_keypair(rng)
        self.n_r: bytes | None = None
        self.ke_r: Point | None = None
        self.ids: SessionIds | None = None
        self.schedule: keysched.KeySchedule | None = None
        self._shared: Point | None = None
        self._s: int | None = None
        self._lsk: int | None = None
        self.ge: Point | None = None
        self.lpk: Point | None = None
        self.auth_shared: Point | None = None
        self.gtk: bytes | None = None
        self.id_r: bytes | None = None
        self.long_term: keysched.LongTermSecret | None = None

        self.my_counter = 0
        self.peer_hwm = 0
        self.sent_transcript = b""
        self.peer_transcript = b""

        self.ke_req = self._build_ke_req()

    # -- helpers ------------------------------------------------------------

    def _build_ke_req(self) -> ProtocolMessage:
        self.my_counter += 1
        msg = ProtocolMessage(MsgType.KE_REQ, self.spi_i, ZERO_SPI, self.my_counter,
                              (bytes([self.tier]), self.fetch_handle, self.n_i,
                               self.ke_i.encode()))
        self.sent_transcript += msg.serialize()
        return msg

    def _send_sealed(self, msg_type: MsgType, inner) -> ProtocolMessage:
        self.my_counter += 1
        msg = _seal(self.schedule.sk_ei, ROLE_INITIATOR, msg_type,
                    self.spi_i, self.spi_r, self.my_counter, inner)
        self.sent_transcript += msg.serialize()
        return msg

    def _fail(self, reason: str, error_code: ErrorReason = ErrorReason.AUTH):
        self.failure_phase = self.phase
        self.phase = Phase.FAILED
        self.failure_reason = reason
        self._zeroize()
        self.my_counter += 1
        return [ProtocolMessage(MsgType.ERROR, self.spi_i, self.spi_r,
                                self.my_counter, (bytes([error_code]),))]

    def _zeroize(self):
        self._ki = None
        self._s = None
        self._lsk = None

    def ephemerals_cleared(self) -> bool:
        return self._ki is None and self._s is None and self._lsk is None

    # -- message handling -----------------------------------------------------

    def on_message(self, msg: ProtocolMessage, now: float) -> list:
        """Returns outbound messages; caller has already routed/deduplicated."""
        self.peer_hwm = max(self.peer_hwm, msg.counter)
        if msg.msg_type == MsgType.ERROR:
            self.failure_phase = self.phase
            self.phase = Phase.FAILED
            self.failure_reason = "peer error"
            self._zeroize()
            return []
        handler = {
            (Phase.AWAIT_KE, MsgType.KE_RESP): self._on_ke_resp,
            (Phase.AWAIT_T1, MsgType.T1_AUTH_RESP): self._on_t1_resp,
            (Phase.AWAIT_T2_RESP, MsgType.T2_MSG2): self._on_t2_resp,
            (Phase.AWAIT_FINAL, MsgType.FINAL_AUTH_RESP): self._on_final_resp,
        }.get((self.phase, msg.msg_type))
        if handler is None:
            return []  # out-of-phase for a live session: ignored
        return handler(msg, now)

    def _on_ke_resp(self, msg: ProtocolMessage, now: float) -> list:
        raw = msg.serialize()
        if msg.spi_r == ZERO_SPI or msg.spi_r == self.spi_i:
            return self._fail("bad responder SPI", ErrorReason.PROTOCOL)
        if len(msg.sections) != 2 or len(msg.sections[0]) != NONCE_LEN:
            return self._fail("malformed KE response", ErrorReason.PROTOCOL)
        try:
            ke_r = Point.decode(msg.sections[1])
            self._shared = crypto.dh(self._ki, ke_r)
        except (crypto.InvalidPeerPoint, crypto.CryptoError, ValueError):
            return self._fail("invalid responder key share", ErrorReason.PROTOCOL)
        self.spi_r = msg.spi_r
        self.n_r = msg.sections[0]
        self.ke_r = ke_r
        self.ids = SessionIds(self.spi_i, self.spi_r)
        keyseed = keysched.compute_keyseed(self._shared, self.n_i, self.n_r)
        self.schedule = keysched.derive_sks(keyseed, self.n_i, self.n_r, self.ids)
        self.peer_transcript += raw
        if self.tier in (TIER1, TIER_BOTH):
            out = self._build_t1_req()
            self.phase = Phase.AWAIT_T1
        else:
            out = self._build_t2_msg1(now)
            self.phase = Phase.AWAIT_T2_RESP
        return [out]

    def _build_t1_req(self) -> ProtocolMessage:
        so_i = keysched.build_signed_octets(self.sent_transcript, self.n_r,
                                            self.schedule.sk_pi)
        auth = keysched.compute_auth_tier1(ROLE_INITIATOR, self.n_b, self.n_i,
                                           self.n_r, self.ke_r, so_i)
        return self._send_sealed(MsgType.T1_AUTH_REQ, (auth, self.service_request))

    def _build_t2_msg1(self, now: float) -> ProtocolMessage:
        kpwd = keysched.derive_kpwd(self.bundle.spwd, self.n_i, self.n_r, self.ids)
        self._s = self.rng.scalar()
        enonce = keysched.make_enonce(kpwd, self._s, self.rng.nonce())
        self.ge = keysched.compute_ge(self._s, self._shared)
        self._lsk, self.lpk = keysched.tier2_keypair(self.ge, self.rng)
        auth_t2 = keysched.compute_auth_tier2(self.n_b, self.sent_transcript,
                                              self.schedule.sk_pi)
        return self._send_sealed(
            MsgType.T2_MSG1,
            (enonce, self.bundle.user_id.encode(), auth_t2, self.lpk.encode()))

    def _on_t1_resp(self, msg: ProtocolMessage, now: float) -> list:
        raw = msg.serialize()
        try:
            sections = _open(self.schedule.sk_er, ROLE_RESPONDER, msg)
            auth_r, sig, id_r, cert = sections
        except (crypto.AuthenticationFailed, wire.MalformedMessage, ValueError):
            return self._fail("tier-1 response rejected")
        if not check_certificate(cert, self.bundle.service_sign_pk):
            return self._fail("certificate mismatch")
        try:
            if not crypto.verify(self.bundle.service_sign_pk, auth_r, sig):
                return self._fail("tier-1 signature invalid")
        except crypto.MalformedSignature:
            return self._fail("tier-1 signature malformed")
        so_r = keysched.build_signed_octets(self.peer_transcript, self.n_i,
                                            self.schedule.sk_pr, id_r)
        expected = keysched.compute_auth_tier1(ROLE_RESPONDER, self.n_b, self.n_i,
                                               self.n_r, self.ke_r, so_r)
        if auth_r != expected:
            return self._fail("tier-1 authentication mismatch")
        self.id_r = id_r
        self.peer_transcript += raw
        if self.tier == TIER_BOTH:
            out = self._build_t2_msg1(now)
            self.phase = Phase.AWAIT_T2_RESP
        else:
            self.auth_shared = self._shared
            self.gtk = keysched.no_token_gtk(self.auth_shared)
            out = self._build_final_req(id_payload=None)
            self.phase = Phase.AWAIT_FINAL
        return [out]

    def _on_t2_resp(self, msg: ProtocolMessage, now: float) -> list:
        raw = msg.serialize()
        try:
            id_r, cert, lpk_r_enc, factor_req = _open(self.schedule.sk_er,
                                                      ROLE_RESPONDER, msg)
            lpk_r = Point.decode(lpk_r_enc)
        except (crypto.AuthenticationFailed, wire.MalformedMessage,
                crypto.InvalidPeerPoint, ValueError):
            return self._fail("tier-2 response rejected")
        if not check_certificate(cert, self.bundle.service_sign_pk):
            return self._fail("certificate mismatch")
        try:
            self.auth_shared = keysched.compute_auth_shared_secret(self._lsk, lpk_r)
        except crypto.InvalidPeerPoint:
            return self._fail("tier-2 public key invalid")
        self.id_r = id_r
        self.peer_transcript += raw
        tk = crypto.totp(self.bundle.token_seed, now)
        self.gtk = keysched.compute_gtk(self.ge, tk)
        out = self._build_final_req(id_payload=self.bundle.user_id.encode())
        self.phase = Phase.AWAIT_FINAL
        return [out]

    def _build_final_req(self, id_payload: bytes | None) -> ProtocolMessage:
        so = keysched.build_signed_octets(self.sent_transcript, self.n_r,
                                          self.schedule.sk_pi, id_payload)
        auth_i = keysched.compute_final_auth(ROLE_INITIATOR, so,
                                             self.auth_shared, self.gtk)
        return self._send_sealed(MsgType.FINAL_AUTH_REQ, (auth_i,))

    def _on_final_resp(self, msg: ProtocolMessage, now: float) -> list:
        try:
            (auth_r,) = _open(self.schedule.sk_er, ROLE_RESPONDER, msg)
        except (crypto.AuthenticationFailed, wire.MalformedMessage, ValueError):
            return self._fail("final response rejected")
        so_r = keysched.build_signed_octets(self.peer_transcript, self.n_i,
                                            self.schedule.sk_pr, self.id_r)
        expected = keysched.compute_final_auth(ROLE_RESPONDER, so_r,
                                               self.auth_shared, self.gtk)
        if auth_r != expected:
            return self._fail("final authentication mismatch")
        self.long_term = keysched.compute_long_term_secret(
            self.auth_shared, self.n_i, self.n_r, self.ids, now)
        self.phase = Phase.ESTABLISHED
        self._zeroize()
        return []


# ---------------------------------------------------------------------------
# Responder (service) session

class ResponderSession:
    def __init__(self, engine: "ServiceEngine", msg: ProtocolMessage, now: float):
        # raises MalformedMessage for anything not worth a session
        if len(msg.sections) != 4:
            raise wire.MalformedMessage("KE request carries four sections")
        tier_b, handle, n_i, ke_i_enc = msg.sections
        if len(tier_b) != 1 or tier_b[0] not in (TIER1, TIER2, TIER_BOTH):
            raise wire.MalformedMessage("bad tier selector")
        if len(handle) != 8 or len(n_i) != NONCE_LEN:
            raise wire.MalformedMessage("bad KE request fields")
        if msg.spi_i == ZERO_SPI:
            raise wire.MalformedMessage("zero initiator SPI")
        try:
            ke_i = Point.decode(ke_i_enc)
        except crypto.InvalidPoint:
            raise wire.MalformedMessage("undecodable key share") from None
        if ke_i.is_identity:
            raise wire.MalformedMessage("identity key share")

        self.engine = engine
        self.rng = engine.rng
        self.tier = tier_b[0]
        self.fetch_handle = handle
        self.phase = Phase.AWAIT_T1 if self.tier in (TIER1, TIER_BOTH) else Phase.AWAIT_T2
        self.failure_reason: str | None = None
        self.failure_phase: Phase | None = None

        self.spi_i = msg.spi_i
        self.spi_r = _nonzero(self.rng, 8, avoid=msg.spi_i)
        self.n_i = n_i
        self.ke_i = ke_i
        self.n_r = self.rng.bytes(NONCE_LEN)
        self._kr, self.ke_r = crypto.ecdhe_keypair(self.rng)
        self._shared = crypto.dh(self._kr, ke_i)
        self.ids = SessionIds(self.spi_i, self.spi_r)
        keyseed = keysched.compute_keyseed(self._shared, self.n_i, self.n_r)
        self.schedule = keysched.derive_sks(keyseed, self.n_i, self.n_r, self.ids)

        self.n_b: bytes | None = None
        self.user_id: str | None = None
        self._s: int | None = None
        self._lsk: int | None = None
        self.ge: Point | None = None
        self.lpk: Point | None = None
        self.lpk_i: Point | None = None
        self.auth_shared: Point | None = None
        self.service_request: bytes | None = None
        self.long_term: keysched.LongTermSecret | None = None
        self._token_seed = None

        self.my_counter = 0
        self.peer_hwm = msg.counter
        self.sent_transcript = b""
        self.peer_transcript = msg.serialize()

        self.ke_resp = self._send(MsgType.KE_RESP, (self.n_r, self.ke_r.encode()))

    def _send(self, msg_type: MsgType, sections) -> ProtocolMessage:
        self.my_counter += 1
        msg = ProtocolMessage(msg_type, self.spi_i, self.spi_r, self.my_counter,
                              sections)
        self.sent_transcript += msg.serialize()
        return msg

    def _send_sealed(self, msg_type: MsgType, inner) -> ProtocolMessage:
        self.my_counter += 1
        msg = _seal(self.schedule.sk_er, ROLE_RESPONDER, msg_type,
                    self.spi_i, self.spi_r, self.my_counter, inner)
        self.sent_transcript += msg.serialize()
        return msg

    def _fail(self, reason: str, error_code: ErrorReason = ErrorReason.AUTH):
        self.failure_phase = self.phase
        self.phase = Phase.FAILED
        self.failure_reason = reason
        self._zeroize()
        self.my_counter += 1
        return [ProtocolMessage(MsgType.ERROR, self.spi_i, self.spi_r,
                                self.my_counter, (bytes([error_code]),))]

    def _zeroize(self):
        self._kr = None
        self._s = None
        self._lsk = None

    def ephemerals_cleared(self) -> bool:
        return self._kr is None and self._s is None and self._lsk is None

    def _resolve_nb(self, now: float) -> bool:
        """Bind the session to its broadcast; refuses stale or unknown ones."""
        if self.n_b is not None:
            return True
        record = self.engine.live_record(self.fetch_handle, now)
        if record is None:
            return False
        self.n_b = record.n_b
        return True

    def on_message(self, msg: ProtocolMessage, now: float) -> list:
        self.peer_hwm = max(self.peer_hwm, msg.counter)
        if msg.msg_type == MsgType.ERROR:
            self.failure_phase = self.phase
            self.phase = Phase.FAILED
            self.failure_reason = "peer error"
            self._zeroize()
            return []
        handler = {
            (Phase.AWAIT_T1, MsgType.T1_AUTH_REQ): self._on_t1_req,
            (Phase.AWAIT_T2, MsgType.T2_MSG1): self._on_t2_msg1,
            (Phase.AWAIT_FINAL, MsgType.FINAL_AUTH_REQ): self._on_final_req,
        }.get((self.phase, msg.msg_type))
        if handler is None:
            return []
        return handler(msg, now)

    def _on_t1_req(self, msg: ProtocolMessage, now: float) -> list:
        raw = msg.serialize()
        try:
            auth_i, service_request = _open(self.schedule.sk_ei, ROLE_INITIATOR, msg)
        except (crypto.AuthenticationFailed, wire.MalformedMessage, ValueError):
            return self._fail("tier-1 request rejected")
        if not self._resolve_nb(now):
            return self._fail("broadcast no longer valid")
        so_i = keysched.build_signed_octets(self.peer_transcript, self.n_r,
                                            self.schedule.sk_pi)
        expected = keysched.compute_auth_tier1(ROLE_INITIATOR, self.n_b, self.n_i,
                                               self.n_r, self.ke_r, so_i)
        if auth_i != expected:
            return self._fail("tier-1 authentication mismatch")
        self.service_request = service_request
        self.peer_transcript += raw

        so_r = keysched.build_signed_octets(self.sent_transcript, self.n_i,
                                            self.schedule.sk_pr, self._id_r())
        auth_r = keysched.compute_auth_tier1(ROLE_RESPONDER, self.n_b, self.n_i,
                                             self.n_r, self.ke_r, so_r)
        sig = crypto.sign(self.engine.registry.sign_sk, auth_r)
        out = self._send_sealed(MsgType.T1_AUTH_RESP,
                                (auth_r, sig, self._id_r(),
                                 self.engine.registry.certificate))
        self.phase = Phase.AWAIT_T2 if self.tier == TIER_BOTH else Phase.AWAIT_FINAL
        return [out]

    def _on_t2_msg1(self, msg: ProtocolMessage, now: float) -> list:
        raw = msg.serialize()
        try:
            enonce, id_i, auth_t2, lpk_i_enc = _open(self.schedule.sk_ei,
                                                     ROLE_INITIATOR, msg)
            lpk_i = Point.decode(lpk_i_enc)
            if lpk_i.is_identity:
                raise crypto.InvalidPeerPoint("identity tier-2 key")
        except (crypto.AuthenticationFailed, wire.MalformedMessage,
                crypto.InvalidPoint, crypto.InvalidPeerPoint, ValueError):
            return self._fail("tier-2 request rejected")
        if not self._resolve_nb(now):
            return self._fail("broadcast no longer valid")
        expected = keysched.compute_auth_tier2(self.n_b, self.peer_transcript,
                                               self.schedule.sk_pi)
        if auth_t2 != expected:
            return self._fail("tier-2 authentication mismatch")
        try:
            record = self.engine.registry.lookup_user(id_i.decode(), now)
        except (RegistrationError, UnicodeDecodeError):
            # unknown and expired users produce the same generic error
            return self._fail("tier-2 authentication mismatch")
        self.user_id = record.user_id
        self._token_seed = record.token_seed
        kpwd = keysched.derive_kpwd(record.spwd, self.n_i, self.n_r, self.ids)
        # a wrong password silently yields a different s, hence a divergent
        # GE; nothing is revealed here and failure surfaces at the final stage
        self._s = keysched.open_enonce(kpwd, enonce)
        try:
            self.ge = keysched.compute_ge(self._s, self._shared)
        except keysched.DegenerateGE:
            return self._fail("degenerate mapped generator", ErrorReason.INTERNAL)
        self._lsk, self.lpk = keysched.tier2_keypair(self.ge, self.rng)
        self.lpk_i = lpk_i
        self.auth_shared = keysched.compute_auth_shared_secret(self._lsk, lpk_i)
        self.peer_transcript += raw
        out = self._send_sealed(MsgType.T2_MSG2,
                                (self._id_r(), self.engine.registry.certificate,
                                 self.lpk.encode(), b"token"))
        self.phase = Phase.AWAIT_FINAL
        return [out]

    def _on_final_req(self, msg: ProtocolMessage, now: float) -> list:
        raw = msg.serialize()
        try:
            (auth_i,) = _open(self.schedule.sk_ei, ROLE_INITIATOR, msg)
        except (crypto.AuthenticationFailed, wire.MalformedMessage, ValueError):
            return self._fail("final request rejected")
        if not self._resolve_nb(now):
            return self._fail("broadcast no longer valid")

        if self.user_id is not None:
            id_payload = self.user_id.encode()
            gtk = self._match_token_gtk(auth_i, id_payload, now)
            if gtk is None:
                return self._fail("final authentication mismatch")
            self.gtk = gtk
        else:
            self.auth_shared = self._shared
            self.gtk = keysched.no_token_gtk(self.auth_shared)
            id_payload = None
            so_i = keysched.build_signed_octets(self.peer_transcript, self.n_r,
                                                self.schedule.sk_pi, id_payload)
            expected = keysched.compute_final_auth(ROLE_INITIATOR, so_i,
                                                   self.auth_shared, self.gtk)
            if auth_i != expected:
                return self._fail("final authentication mismatch")
        self.peer_transcript += raw

        so_r = keysched.build_signed_octets(self.sent_transcript, self.n_i,
                                            self.schedule.sk_pr, self._id_r())
        auth_r = keysched.compute_final_auth(ROLE_RESPONDER, so_r,
                                             self.auth_shared, self.gtk)
        out = self._send_sealed(MsgType.FINAL_AUTH_RESP, (auth_r,))
        self.long_term = keysched.compute_long_term_secret(
            self.auth_shared, self.n_i, self.n_r, self.ids, now)
        self.phase = Phase.ESTABLISHED
        self._zeroize()
        return [out]

    def _match_token_gtk(self, auth_i: bytes, id_payload: bytes,
                         now: float) -> bytes | None:
        """Try the initiator's token against nearby epochs; None if no match."""
        so_i = keysched.build_signed_octets(self.peer_transcript, self.n_r,
                                            self.schedule.sk_pi, id_payload)
        step = self._token_seed.step_seconds
        for delta in range(-TOKEN_EPOCH_TOLERANCE, TOKEN_EPOCH_TOLERANCE + 1):
            at = now + delta * step
            if at < 0:
                continue
            tk = crypto.totp(self._token_seed, at)
            gtk = keysched.compute_gtk(self.ge, tk)
            expected = keysched.compute_final_auth(ROLE_INITIATOR, so_i,
                                                   self.auth_shared, gtk)
            if expected == auth_i:
                return gtk
        return None

    def _id_r(self) -> bytes:
        return self.engine.registry.service_id.encode()


# ---------------------------------------------------------------------------
# Engines

class ServiceEngine:
    """Routes frames to responder sessions and runs the beacon."""

    def __init__(self, registry: ServiceRegistry, beacon: BeaconConfig, rng: Rng):
        self.registry = registry
        self.beacon = beacon
        self.rng = rng
        self.records: OrderedDict[bytes, BroadcastRecord] = OrderedDict()
        self.sessions: dict[bytes, ResponderSession] = {}

    def beacon_tick(self, now: float) -> tuple[ProtocolMessage, BroadcastRecord]:
        n_b = self.rng.bytes(24) + self.beacon.beacon_id
        bnonce = abe.encrypt(self.registry.abe, self.beacon.access_policy,
                             n_b, self.rng)
        bnonce_bytes = bnonce.to_bytes()
        signature = crypto.sign(self.registry.sign_sk, bnonce_bytes)
        handle = _nonzero(self.rng, 8)
        fetch_resp = ProtocolMessage(
            MsgType.BNONCE_FETCH_RESP,
            sections=(handle, bnonce_bytes, signature, self.registry.certificate))
        record = BroadcastRecord(
            n_b=n_b, bnonce=bnonce, signature=signature, issued_at=now,
            expires_at=now + self.beacon.nb_validity_d,
            fetch_handle=handle, fetch_resp=fetch_resp)
        self.records[handle] = record
        while len(self.records) > MAX_BROADCAST_RECORDS:
            self.records.popitem(last=False)
        advert = wire.make_advert(self.beacon.beacon_id, handle)
        return advert, record

    def live_record(self, handle: bytes, now: float) -> BroadcastRecord | None:
        record = self.records.get(handle)
        if record is None or not nb_window_check(record, now):
            return None
        return record

    def fetch_bnonce(self, msg: ProtocolMessage, now: float) -> list:
        if len(msg.sections) != 1 or len(msg.sections[0]) != 8:
            raise wire.MalformedMessage("bad fetch request")
        record = self.live_record(msg.sections[0], now)
        if record is None:
            return [ProtocolMessage(MsgType.ERROR,
                                    sections=(bytes([ErrorReason.PROTOCOL]),))]
        return [record.fetch_resp]

    def receive(self, data, now: float) -> tuple[Disposition, list]:
        try:
            msg = data if isinstance(data, ProtocolMessage) else wire.parse(data)
        except wire.MalformedMessage:
            return Disposition.REJECT, []
        t = msg.msg_type
        if t == MsgType.ADVERT:
            return Disposition.IGNORE, []
        if t == MsgType.BNONCE_FETCH_REQ:
            try:
                return Disposition.PROCESS, self.fetch_bnonce(msg, now)
            except wire.MalformedMessage:
                return Disposition.REJECT, []
        if t == MsgType.KE_REQ:
            if msg.spi_i in self.sessions:
                return Disposition.IGNORE, []  # duplicate: no new session
            try:
                session = ResponderSession(self, msg, now)
            except (wire.MalformedMessage, ValueError):
                return Disposition.REJECT, []
            self.sessions[msg.spi_i] = session
            return Disposition.PROCESS, [session.ke_resp]
        if t in (MsgType.T1_AUTH_REQ, MsgType.T2_MSG1, MsgType.FINAL_AUTH_REQ,
                 MsgType.ERROR):
            session = self.sessions.get(msg.spi_i)
            if session is None or session.spi_r != msg.spi_r:
                return Disposition.REJECT, []
            if session.phase in TERMINAL_PHASES:
                return Disposition.IGNORE, []
            disp = on_duplicate_or_stale(session, msg)
            if disp != Disposition.PROCESS:
                return disp, []
            return Disposition.PROCESS, session.on_message(msg, now)
        return Disposition.REJECT, []


class UserAgentEngine:
    """Reacts to broadcasts and drives one initiator session at a time."""

    def __init__(self, bundle: RegistrationBundle, tier: int, rng: Rng,
                 service_request: bytes = b"", clock_offset: float = 0.0):
        self.bundle = bundle
        self.tier = tier
        self.rng = rng
        self.service_request = service_request
        self.clock_offset = clock_offset
        self.session: InitiatorSession | None = None
        self.past_sessions: list[InitiatorSession] = []
        self.handled_handles: set[bytes] = set()
        self._pending_fetch: bytes | None = None

    def _local_now(self, now: float) -> float:
        return now + self.clock_offset

    def session_active(self) -> bool:
        return self.session is not None and self.session.phase not in TERMINAL_PHASES

    def fail_session(self, reason: str):
        """External failure hook (the simulator's response timeout)."""
        if self.session_active():
            self.session.failure_phase = self.session.phase
            self.session.phase = Phase.FAILED
            self.session.failure_reason = reason
            self.session._zeroize()

    def receive(self, data, now: float) -> tuple[Disposition, list]:
        try:
            msg = data if isinstance(data, ProtocolMessage) else wire.parse(data)
        except wire.MalformedMessage:
            return Disposition.REJECT, []
        now = self._local_now(now)
        t = msg.msg_type
        if t == MsgType.ADVERT:
            return self._on_advert(msg)
        if t == MsgType.BNONCE_FETCH_RESP:
            return self._on_fetch_resp(msg, now)
        if t in (MsgType.KE_RESP, MsgType.T1_AUTH_RESP, MsgType.T2_MSG2,
                 MsgType.FINAL_AUTH_RESP, MsgType.ERROR):
            session = self.session
            if (session is None or session.spi_i != msg.spi_i
                    or (session.spi_r != ZERO_SPI and session.spi_r != msg.spi_r)):
                return Disposition.REJECT, []
            if session.phase in TERMINAL_PHASES:
                return Disposition.IGNORE, []
            disp = on_duplicate_or_stale(session, msg)
            if disp != Disposition.PROCESS:
                return disp, []
            return Disposition.PROCESS, session.on_message(msg, now)
        return Disposition.REJECT, []

    def _on_advert(self, msg: ProtocolMessage) -> tuple[Disposition, list]:
        beacon_id, handle = msg.sections
        if handle in self.handled_handles:
            return Disposition.IGNORE, []  # already replied to this broadcast
        if self.session_active() or self._pending_fetch is not None:
            return Disposition.IGNORE, []
        self._pending_fetch = handle
        return Disposition.PROCESS, [ProtocolMessage(MsgType.BNONCE_FETCH_REQ,
                                                     sections=(handle,))]

    def _on_fetch_resp(self, msg: ProtocolMessage, now: float) -> tuple:
        if self._pending_fetch is None:
            return Disposition.IGNORE, []
        if len(msg.sections) != 4 or msg.sections[0] != self._pending_fetch:
            return Disposition.IGNORE, []
        _, bnonce_bytes, signature, cert = msg.sections
        self._pending_fetch = None
        # signature first: tampering is rejected before any decryption attempt
        try:
            if not crypto.verify(self.bundle.service_sign_pk, bnonce_bytes,
                                 signature):
                return Disposition.REJECT, []
        except crypto.MalformedSignature:
            return Disposition.REJECT, []
        if not check_certificate(cert, self.bundle.service_sign_pk):
            return Disposition.REJECT, []
        try:
            bnonce = abe.AbeCiphertext.from_bytes(bnonce_bytes)
            n_b = abe.decrypt(self.bundle.abe_keys, bnonce, now)
        except (abe.AbeError, crypto.AuthenticationFailed):
            return Disposition.REJECT, []  # no attributes, no session
        if len(n_b) != N_B_LEN:
            return Disposition.REJECT, []
        handle = msg.sections[0]
        self.handled_handles.add(handle)
        if self.session is not None:
            self.past_sessions.append(self.session)
        self.session = InitiatorSession(self.bundle, n_b, handle, self.tier,
                                        self.rng, now,
                                        service_request=self.service_request)
        return Disposition.PROCESS, [self.session.ke_req]


def _nonzero(rng: Rng, n: int, avoid: bytes | None = None) -> bytes:
    while True:
        value = rng.bytes(n)
        if value != bytes(n) and value != avoid:
            return value


# ---------------------------------------------------------------------------
# Direct handshake driver (no medium): used by tests, demos and the CLI.

@dataclass
class HandshakeResult:
    established: bool
    user_phase: Phase
    service_phase: Phase | None
    user_session: InitiatorSession | None
    service_session: ResponderSession | None
    wire_log: list          # (sender_role, ProtocolMessage, raw bytes)
    record: BroadcastRecord

    @property
    def transcript_bytes(self) -> bytes:
        return b"".join(raw for _, _, raw in self.wire_log)


def run_handshake(service: ServiceEngine, user: UserAgentEngine,
                  now: float = 0.0) -> HandshakeResult:
    """Drive one full handshake with instantaneous delivery at a fixed time."""
    advert, record = service.beacon_tick(now)
    wire_log = [("responder", advert, advert.serialize())]
    pending = [(user, service, advert)]
    while pending:
        target, other, msg = pending.pop(0)
        _, outs = target.receive(msg, now)
        role = "initiator" if target is user else "responder"
        for out in outs:
            wire_log.append((role, out, out.serialize()))
            pending.append((other, target, out))
    user_session = user.session
    service_session = None
    if user_session is not None:
        service_session = service.sessions.get(user_session.spi_i)
    established = (user_session is not None and service_session is not None
                   and user_session.phase == Phase.ESTABLISHED
                   and service_session.phase == Phase.ESTABLISHED)
    return HandshakeResult(
        established=established,
        user_phase=user_session.phase if user_session else Phase.AWAIT_BROADCAST,
        service_phase=service_session.phase if service_session else None,
        user_session=user_session, service_session=service_session,
        wire_log=wire_log, record=record)
