import pytest

from locathe import abe
from locathe.crypto import Rng
from locathe.engine import (BeaconConfig, ServiceEngine, UserAgentEngine,
                            run_handshake)
from locathe.registration import ServiceRegistry

MEMBER = ("svc", "member")


def make_pair(seed, tier, *, attrs=frozenset({MEMBER}), policy=None,
              user_kwargs=None, beacon_kwargs=None):
    """A registered user engine and a service engine sharing one registry."""
    rng = Rng(seed)
    registry = ServiceRegistry("svc", rng.child("svc"))
    bundle = registry.register_user("bob", attrs, now=0.0, rng=rng.child("reg"))
    beacon = BeaconConfig(beacon_id=b"BEACON-1", location_id="l",
                          access_policy=policy or abe.Leaf(*MEMBER),
                          **(beacon_kwargs or {}))
    service = ServiceEngine(registry, beacon, rng.child("svc-engine"))
    user = UserAgentEngine(bundle, tier, rng.child("user-engine"),
                           **(user_kwargs or {}))
    return service, user, registry, bundle


def handshake(seed, tier, now=0.0, **kwargs):
    service, user, registry, bundle = make_pair(seed, tier, **kwargs)
    result = run_handshake(service, user, now=now)
    return result, registry, bundle


@pytest.fixture
def rng():
    return Rng(0xBEEF)
