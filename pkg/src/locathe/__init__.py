"""Location-enhanced authenticated key exchange.

A two-party protocol library (user-agent initiator, service responder) with
an attribute-gated broadcast stage over simulated BLE beacons, two privacy
tiers of authentication, a password-proof chain that never transmits the
password in any form, token-bound final authentication, and a scriptable
adversary harness that grades eavesdrop, MITM, replay, wormhole and DoS
games under a deterministic virtual clock.
"""

from . import abe, crypto, ec, engine, keysched, registration, scenarios, sim, wire
from .crypto import Rng, TokenSeed
from .engine import (BeaconConfig, HandshakeResult, InitiatorSession, Phase,
                     ResponderSession, ServiceEngine, TIER1, TIER2, TIER_BOTH,
                     UserAgentEngine, run_handshake)
from .keysched import KeySchedule, LongTermSecret, SessionIds
from .registration import RegistrationBundle, ServiceRegistry, UserRecord
from .sim import AdversaryScript, ScenarioOutcome, ScenarioSetup, VirtualClock, World

__version__ = "0.1.0"
