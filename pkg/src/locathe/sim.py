"""Virtual-time broadcast medium with honest endpoints and an adversary.

The world is a single-threaded discrete-event simulation: a clock delivers
scheduled events in (time, sequence) order, locations isolate radio traffic
("messages transmitted in one location cannot be heard at another"), and a
scriptable adversary sits on the medium. Scripts match observed frames and
apply actions: forward, drop, record, replay, modify, inject, or relay into
another location. Scripts see wire octets, locations and the clock only;
they have no handle on any endpoint secret, by construction.

Runs are deterministic: the same setup, script and seed produce identical
event logs. Radio jamming is intentionally absent from the model (frequency
hopping is assumed to handle it below this layer).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

from . import abe, crypto, engine as engine_mod, keysched, wire
from .crypto import Rng
from .engine import (BeaconConfig, Disposition, Phase, ServiceEngine,
                     UserAgentEngine)
from .registration import ServiceRegistry
from .wire import MsgType, ProtocolMessage

USER_RESPONSE_TIMEOUT = 5.0  # virtual seconds per awaited response


class ScenarioMisconfigured(Exception):
    pass


class VirtualClock:
    """Monotone event queue; no wall clock anywhere in the simulation."""

    def __init__(self):
        self.now = 0.0
        self._seq = 0
        self._events: list = []

    def schedule(self, at: float, fn):
        if at < self.now:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._events, (at, self._seq, fn))
        self._seq += 1

    def run_until(self, horizon: float):
        while self._events and self._events[0][0] <= horizon:
            at, _, fn = heapq.heappop(self._events)
            self.now = at
            fn()
        self.now = horizon


# ---------------------------------------------------------------------------
# Adversary scripting

@dataclass
class Match:
    msg_type: MsgType | None = None
    location: str | None = None
    after: float | None = None
    before: float | None = None
    where: object = None  # optional callable(raw, now, location) -> bool

    def hits(self, raw: bytes, now: float, location: str) -> bool:
        if self.location is not None and location != self.location:
            return False
        if self.after is not None and now < self.after:
            return False
        if self.before is not None and now >= self.before:
            return False
        if self.msg_type is not None:
            if len(raw) < 2 or raw[1] != self.msg_type:
                return False
        if self.where is not None and not self.where(raw, now, location):
            return False
        return True


@dataclass
class Forward:
    pass


@dataclass
class Drop:
    pass


@dataclass
class Record:
    tag: str


@dataclass
class ReplayNow:
    tag: str


@dataclass
class Modify:
    transform: object  # callable(raw, store) -> raw


@dataclass
class Relay:
    to_location: str
    rewrite: object = None  # optional callable(raw, store) -> raw or None


@dataclass
class Rule:
    match: Match
    actions: tuple
    max_hits: int | None = None
    hits: int = 0


@dataclass
class ScheduledInject:
    at: float
    location: str
    builder: object  # bytes, or callable(store) -> bytes or None


@dataclass
class AdversaryScript:
    """Ordered reactive rules plus pre-scheduled injections.

    The store passed to transforms and builders holds only wire recordings;
    the adversary knows no pre-shared secrets and never touches endpoint
    state.
    """
    rules: list = field(default_factory=list)
    scheduled: list = field(default_factory=list)

    def __post_init__(self):
        self.store: dict[str, list[bytes]] = {}
        self.observed: list[bytes] = []
        self.log: list[dict] = []


class Medium:
    """In-location instantaneous delivery with the adversary on the path."""

    def __init__(self, clock: VirtualClock, script: AdversaryScript | None,
                 event_log: list):
        self.clock = clock
        self.script = script
        self.event_log = event_log
        self.endpoints: list = []

    def attach(self, endpoint):
        self.endpoints.append(endpoint)

    def transmit(self, sender, raw: bytes, location: str):
        now = self.clock.now
        self.event_log.append({"t": now, "ev": "tx", "loc": location,
                               "type": _type_name(raw), "len": len(raw)})
        effects = self._adversary_effects(raw, now, location)
        for loc, data, exclude_sender in effects:
            self._deliver(sender if exclude_sender else None, data, loc)

    def inject(self, raw: bytes, location: str, note: str = "inject"):
        """Adversary-originated frame: delivered without re-filtering."""
        self.event_log.append({"t": self.clock.now, "ev": note, "loc": location,
                               "type": _type_name(raw), "len": len(raw)})
        self._deliver(None, raw, location)

    def _deliver(self, sender, raw: bytes, location: str):
        # deliveries go through the clock so same-instant events interleave
        # breadth-first in a deterministic order
        for endpoint in self.endpoints:
            if endpoint.location_id == location and endpoint is not sender:
                self.clock.schedule(self.clock.now,
                                    lambda ep=endpoint, data=raw: ep.deliver(data))

    def _adversary_effects(self, raw, now, location):
        # effects are (location, octets, exclude_original_sender)
        if self.script is None:
            return [(location, raw, True)]
        self.script.observed.append(raw)
        for rule in self.script.rules:
            if rule.max_hits is not None and rule.hits >= rule.max_hits:
                continue
            if not rule.match.hits(raw, now, location):
                continue
            rule.hits += 1
            return self._apply_actions(rule.actions, raw, now, location)
        return [(location, raw, True)]

    def _apply_actions(self, actions, raw, now, location):
        out = []
        store = self.script.store
        for action in actions:
            if isinstance(action, Forward):
                out.append((location, raw, True))
            elif isinstance(action, Drop):
                self.script.log.append({"t": now, "act": "drop",
                                        "type": _type_name(raw)})
            elif isinstance(action, Record):
                store.setdefault(action.tag, []).append(raw)
                self.script.observed.append(raw)
            elif isinstance(action, ReplayNow):
                # an adversary transmission: the original sender hears it too
                for rec in store.get(action.tag, [])[-1:]:
                    self.script.log.append({"t": now, "act": "replay",
                                            "type": _type_name(rec)})
                    out.append((location, rec, False))
            elif isinstance(action, Modify):
                modified = action.transform(raw, store)
                if modified is not None:
                    self.script.log.append({"t": now, "act": "modify",
                                            "type": _type_name(raw)})
                    out.append((location, modified, True))
            elif isinstance(action, Relay):
                relayed = raw
                if action.rewrite is not None:
                    relayed = action.rewrite(raw, store)
                if relayed is not None:
                    self.script.log.append({"t": now, "act": "relay",
                                            "to": action.to_location,
                                            "type": _type_name(relayed)})
                    out.append((action.to_location, relayed, False))
            else:
                raise ScenarioMisconfigured(f"unknown action {action!r}")
        return out


def _type_name(raw: bytes) -> str:
    if len(raw) >= 2:
        try:
            return MsgType(raw[1]).name
        except ValueError:
            pass
    return "RAW"


# ---------------------------------------------------------------------------
# Endpoints

class ServiceEndpoint:
    def __init__(self, endpoint_id: str, location_id: str, engine: ServiceEngine,
                 medium: Medium, clock: VirtualClock, event_log: list):
        self.endpoint_id = endpoint_id
        self.location_id = location_id
        self.engine = engine
        self.medium = medium
        self.clock = clock
        self.event_log = event_log

    def start_beacon(self, horizon: float):
        interval = self.engine.beacon.broadcast_interval

        def tick():
            advert, _ = self.engine.beacon_tick(self.clock.now)
            self.event_log.append({"t": self.clock.now, "ev": "beacon",
                                   "endpoint": self.endpoint_id})
            self.medium.transmit(self, advert.serialize(), self.location_id)
            nxt = self.clock.now + interval
            if nxt <= horizon:
                self.clock.schedule(nxt, tick)

        self.clock.schedule(self.clock.now, tick)

    def deliver(self, raw: bytes):
        disp, outs = self.engine.receive(raw, self.clock.now)
        self._log_delivery(raw, disp)
        for out in outs:
            self.medium.transmit(self, out.serialize(), self.location_id)

    def _log_delivery(self, raw, disp):
        self.event_log.append({"t": self.clock.now, "ev": "rx",
                               "endpoint": self.endpoint_id,
                               "type": _type_name(raw), "disp": disp.name})


class UserEndpoint:
    def __init__(self, endpoint_id: str, location_id: str, engine: UserAgentEngine,
                 medium: Medium, clock: VirtualClock, event_log: list,
                 activation_at: float = 0.0):
        self.endpoint_id = endpoint_id
        self.location_id = location_id
        self.engine = engine
        self.medium = medium
        self.clock = clock
        self.event_log = event_log
        self.activation_at = activation_at
        self._progress = 0

    def deliver(self, raw: bytes):
        if self.clock.now < self.activation_at:
            return
        disp, outs = self.engine.receive(raw, self.clock.now)
        self.event_log.append({"t": self.clock.now, "ev": "rx",
                               "endpoint": self.endpoint_id,
                               "type": _type_name(raw), "disp": disp.name})
        if disp == Disposition.PROCESS:
            self._progress += 1
            self._arm_timeout()
        for out in outs:
            self.medium.transmit(self, out.serialize(), self.location_id)

    def _arm_timeout(self):
        snapshot = self._progress

        def check():
            if self._progress != snapshot:
                return
            if self.engine.session_active():
                self.engine.fail_session("timeout")
                self.event_log.append({"t": self.clock.now, "ev": "timeout",
                                       "endpoint": self.endpoint_id})
            elif self.engine._pending_fetch is not None:
                self.engine._pending_fetch = None
                self.event_log.append({"t": self.clock.now, "ev": "fetch-timeout",
                                       "endpoint": self.endpoint_id})

        self.clock.schedule(self.clock.now + USER_RESPONSE_TIMEOUT, check)

    def sessions(self):
        out = list(self.engine.past_sessions)
        if self.engine.session is not None:
            out.append(self.engine.session)
        return out


# ---------------------------------------------------------------------------
# Scenario setup and outcome

@dataclass
class ServiceSpec:
    service_id: str
    location_id: str
    beacon_id: bytes
    access_policy: object
    broadcast_interval: float = 1.0
    nb_validity_d: float = engine_mod.DEFAULT_NB_VALIDITY


@dataclass
class UserSpec:
    user_id: str
    location_id: str
    registered_with: str
    attrs: frozenset
    tier: int = engine_mod.TIER1
    activation_at: float = 0.0
    clock_offset: float = 0.0
    wrong_password: bool = False


@dataclass
class ScenarioSetup:
    locations: list
    services: list
    users: list
    horizon: float = 10.0


@dataclass
class ScenarioOutcome:
    name: str
    seed: int
    flags: dict
    endpoint_phases: dict
    sessions: list
    event_log: list
    adversary_log: list
    notes: list
    extra: dict

    def to_json(self) -> str:
        doc = {"name": self.name, "seed": self.seed, "flags": self.flags,
               "endpoint_phases": self.endpoint_phases, "sessions": self.sessions,
               "notes": self.notes, "extra": self.extra,
               "event_log": self.event_log, "adversary_log": self.adversary_log}
        return json.dumps(doc, indent=2, sort_keys=True)


class World:
    def __init__(self, setup: ScenarioSetup, script: AdversaryScript | None,
                 seed: int):
        self.setup = setup
        self.script = script
        self.seed = seed
        self.root_rng = Rng(seed)
        self.clock = VirtualClock()
        self.event_log: list = []
        self.medium = Medium(self.clock, script, self.event_log)
        self.services: dict[str, ServiceEndpoint] = {}
        self.users: dict[str, UserEndpoint] = {}
        self.registries: dict[str, ServiceRegistry] = {}

        locations = set(setup.locations)
        for spec in setup.services:
            if spec.location_id not in locations:
                raise ScenarioMisconfigured(f"unknown location {spec.location_id}")
            rng = self.root_rng.child("svc:" + spec.service_id)
            registry = ServiceRegistry(spec.service_id, rng)
            beacon = BeaconConfig(beacon_id=spec.beacon_id,
                                  location_id=spec.location_id,
                                  access_policy=spec.access_policy,
                                  broadcast_interval=spec.broadcast_interval,
                                  nb_validity_d=spec.nb_validity_d)
            eng = ServiceEngine(registry, beacon, rng.child("engine"))
            endpoint = ServiceEndpoint(spec.service_id, spec.location_id, eng,
                                       self.medium, self.clock, self.event_log)
            self.registries[spec.service_id] = registry
            self.services[spec.service_id] = endpoint
            self.medium.attach(endpoint)

        for spec in setup.users:
            if spec.location_id not in locations:
                raise ScenarioMisconfigured(f"unknown location {spec.location_id}")
            registry = self.registries.get(spec.registered_with)
            if registry is None:
                raise ScenarioMisconfigured(
                    f"user {spec.user_id} registered with unknown service")
            rng = self.root_rng.child("user:" + spec.user_id)
            bundle = registry.register_user(spec.user_id, spec.attrs, now=0.0,
                                            rng=rng.child("registration"))
            if spec.wrong_password:
                from dataclasses import replace
                bundle = replace(bundle, spwd=rng.child("wrong").bytes(32))
            eng = UserAgentEngine(bundle, spec.tier, rng.child("engine"),
                                  clock_offset=spec.clock_offset)
            endpoint = UserEndpoint(spec.user_id, spec.location_id, eng,
                                    self.medium, self.clock, self.event_log,
                                    activation_at=spec.activation_at)
            self.users[spec.user_id] = endpoint
            self.medium.attach(endpoint)

    def run(self) -> None:
        for sched in (self.script.scheduled if self.script else []):
            raw_builder = sched.builder

            def fire(builder=raw_builder, loc=sched.location):
                raw = builder(self.script.store) if callable(builder) else builder
                if raw is not None:
                    self.medium.inject(raw, loc)

            self.clock.schedule(sched.at, fire)
        for endpoint in self.services.values():
            endpoint.start_beacon(self.setup.horizon)
        self.clock.run_until(self.setup.horizon)

    # -- ground truth -------------------------------------------------------

    def initiator_sessions(self):
        return [(uid, s) for uid, ep in self.users.items() for s in ep.sessions()]

    def responder_sessions(self):
        return [(sid, s) for sid, ep in self.services.items()
                for s in ep.engine.sessions.values()]

    def sensitive_octets(self) -> set:
        """Ground-truth secret byte strings the adversary must never observe."""
        secrets: set[bytes] = set()
        horizon = self.setup.horizon
        for sid, endpoint in self.services.items():
            registry = self.registries[sid]
            for record in registry._users.values():
                secrets.add(record.user_key)
                secrets.add(record.spwd)
                step = record.token_seed.step_seconds
                for epoch in range(int(horizon // step) + 2):
                    secrets.add(crypto.totp(record.token_seed,
                                            epoch * step).encode())
            for brec in endpoint.engine.records.values():
                secrets.add(brec.n_b)
        for _, session in self.initiator_sessions() + self.responder_sessions():
            if session.schedule is not None:
                secrets.add(session.schedule.keyseed)
                secrets.update(session.schedule.all_keys())
            if getattr(session, "n_b", None):
                secrets.add(session.n_b)
            if session.long_term is not None:
                secrets.add(session.long_term.key)
            ge = getattr(session, "ge", None)
            if ge is not None:
                secrets.add(ge.encode())
            auth_shared = getattr(session, "auth_shared", None)
            if auth_shared is not None:
                secrets.add(auth_shared.encode())
        return secrets

    def compute_flags(self) -> dict:
        established_i = [(uid, s) for uid, s in self.initiator_sessions()
                         if s.phase == Phase.ESTABLISHED]
        established_r = [(sid, s) for sid, s in self.responder_sessions()
                         if s.phase == Phase.ESTABLISHED]

        def twin(a, pool):
            return [b for _, b in pool
                    if b.spi_i == a.spi_i and b.spi_r == a.spi_r
                    and b.schedule == a.schedule
                    and b.long_term is not None and a.long_term is not None
                    and b.long_term.key == a.long_term.key]

        impersonated_responder = any(not twin(s, established_r)
                                     for _, s in established_i)
        impersonated_initiator = any(not twin(s, established_i)
                                     for _, s in established_r)
        hijacked = False
        for _, si in established_i:
            for _, sr in established_r:
                if (si.spi_i, si.spi_r) == (sr.spi_i, sr.spi_r) \
                        and si.schedule != sr.schedule:
                    hijacked = True

        learned = False
        if self.script is not None:
            blob = b"\xff".join(self.script.observed)
            for secret in self.sensitive_octets():
                if secret and secret in blob:
                    learned = True
                    break
        return {
            "impersonated_initiator": impersonated_initiator,
            "impersonated_responder": impersonated_responder,
            "learned_plaintext": learned,
            "session_hijacked": hijacked,
        }

    def outcome(self, name: str, notes: list | None = None,
                extra: dict | None = None) -> ScenarioOutcome:
        phases = {}
        for uid, ep in self.users.items():
            s = ep.engine.session
            phases[uid] = s.phase.name if s else None
        for sid, ep in self.services.items():
            sessions = list(ep.engine.sessions.values())
            phases[sid] = sessions[-1].phase.name if sessions else None
        sessions_doc = []
        for uid, s in self.initiator_sessions():
            sessions_doc.append({"endpoint": uid, "role": "initiator",
                                 "phase": s.phase.name,
                                 "spi_i": s.spi_i.hex(), "spi_r": s.spi_r.hex(),
                                 "failure": s.failure_reason})
        for sid, s in self.responder_sessions():
            sessions_doc.append({"endpoint": sid, "role": "responder",
                                 "phase": s.phase.name,
                                 "spi_i": s.spi_i.hex(), "spi_r": s.spi_r.hex(),
                                 "failure": s.failure_reason})
        return ScenarioOutcome(
            name=name, seed=self.seed, flags=self.compute_flags(),
            endpoint_phases=phases, sessions=sessions_doc,
            event_log=list(self.event_log),
            adversary_log=list(self.script.log) if self.script else [],
            notes=notes or [], extra=extra or {})


def run_scenario(setup: ScenarioSetup, script: AdversaryScript | None,
                 seed: int, name: str = "scenario") -> ScenarioOutcome:
    world = World(setup, script, seed)
    world.run()
    return world.outcome(name)
