"""Operator entry point.

Subcommands:

    register       enroll a user into a registry file, emit the user bundle
    demo           run a full handshake and dump the transcript
    attack         run a named adversary scenario (or a JSON-defined one)
    vectors        emit deterministic test vectors for the pinned derivations
    registry-list  list registered users

Exit codes are a contract: 0 success-per-expectation, 2 registration
conflict, 3 I/O trouble, 4 handshake failure, 5 unknown scenario. Nothing
here ever prints raw secret material; keys appear only as 8-hex-char
fingerprints.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import abe, crypto, ec, keysched
from .crypto import Rng, TokenSeed
from .engine import (BeaconConfig, Phase, ServiceEngine, TIER1, TIER2,
                     TIER_BOTH, UserAgentEngine, run_handshake)
from .keysched import ROLE_INITIATOR, SessionIds
from .registration import AlreadyRegistered, ServiceRegistry
from .scenarios import CATALOG, run_catalog_scenario, run_scenario_doc

EXIT_OK = 0
EXIT_REGISTRATION = 2
EXIT_IO = 3
EXIT_HANDSHAKE = 4
EXIT_UNKNOWN_SCENARIO = 5

DEFAULT_SERVICE_ID = "svc"
TIER_NAMES = {"1": TIER1, "2": TIER2, "both": TIER_BOTH}

_FAILURE_PHASE_NAMES = {
    Phase.AWAIT_KE: "ke",
    Phase.AWAIT_T1: "tier1",
    Phase.AWAIT_T2: "tier2",
    Phase.AWAIT_T2_RESP: "tier2",
    Phase.AWAIT_FINAL: "final",
}


def _emit(text: str, output: str | None):
    if output is None or output == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    with open(output, "w") as fh:
        fh.write(text)


def _load_or_create_registry(path: str | None, seed, service_id: str):
    rng = Rng(seed) if seed is not None else Rng()
    if path and os.path.exists(path):
        return ServiceRegistry.load(path), rng
    return ServiceRegistry(service_id, rng.child("service")), rng


def _parse_attrs(raw_attrs, service_id: str):
    attrs = set()
    for item in raw_attrs:
        if "/" in item:
            authority, attribute = item.split("/", 1)
        else:
            authority, attribute = service_id, item
        attrs.add((authority, attribute))
    return attrs or {(service_id, "member")}


# ---------------------------------------------------------------------------
# Subcommands

def cmd_register(args) -> int:
    try:
        registry, rng = _load_or_create_registry(args.registry, args.seed,
                                                 args.service_id)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"registry error: {exc}", file=sys.stderr)
        return EXIT_IO
    attrs = _parse_attrs(args.attr, registry.service_id)
    for authority_id, _ in attrs:
        if authority_id not in registry.abe:
            registry.abe.setup_authority(authority_id, rng.child("auth:" + authority_id))
    password = args.password.encode() if args.password else None
    try:
        bundle = registry.register_user(args.user_id, attrs, password=password,
                                        now=args.now, rng=rng.child("register"))
    except AlreadyRegistered:
        print(f"user {args.user_id!r} already registered", file=sys.stderr)
        return EXIT_REGISTRATION
    try:
        if args.registry:
            registry.save(args.registry)
        bundle_path = args.bundle or f"{args.user_id}.bundle.json"
        with open(bundle_path, "w") as fh:
            fh.write(bundle.to_json())
    except OSError as exc:
        print(f"write error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"registered {args.user_id!r}; bundle written to {bundle_path}")
    return EXIT_OK


def cmd_demo(args) -> int:
    tier = TIER_NAMES[args.tier]
    rng = Rng(args.seed if args.seed is not None else None)
    registry = ServiceRegistry(DEFAULT_SERVICE_ID, rng.child("service"))
    attrs = {(DEFAULT_SERVICE_ID, "member")}
    bundle = registry.register_user(args.user_id, attrs, now=0.0,
                                    rng=rng.child("register"))
    if args.wrong_password:
        from dataclasses import replace
        bundle = replace(bundle, spwd=rng.child("wrong").bytes(32))
    beacon = BeaconConfig(beacon_id=b"BEACON-1", location_id="demo",
                          access_policy=abe.Leaf(DEFAULT_SERVICE_ID, "member"))
    service = ServiceEngine(registry, beacon, rng.child("service-engine"))
    user = UserAgentEngine(bundle, tier, rng.child("user-engine"))
    result = run_handshake(service, user, now=0.0)

    doc = {
        "tier": args.tier,
        "established": result.established,
        "messages": [{"direction": role, "type": msg.msg_type.name,
                      "hex": raw.hex()}
                     for role, msg, raw in result.wire_log],
    }
    if result.established and tier in (TIER2, TIER_BOTH):
        doc["long_term_fingerprint"] = {
            "initiator": crypto.fingerprint(result.user_session.long_term.key),
            "responder": crypto.fingerprint(result.service_session.long_term.key),
        }
    if not result.established:
        session = result.user_session
        phase = session.failure_phase if session else None
        doc["failure_phase"] = _FAILURE_PHASE_NAMES.get(phase, "broadcast")
        doc["failure_reason"] = session.failure_reason if session else None
    _emit(json.dumps(doc, indent=2, sort_keys=True), args.output)
    return EXIT_OK if result.established else EXIT_HANDSHAKE


def cmd_attack(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.scenario_file:
        try:
            with open(args.scenario_file) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"scenario file error: {exc}", file=sys.stderr)
            return EXIT_IO
        outcome = run_scenario_doc(doc, seed=seed)
        _emit(outcome.to_json(), args.output)
        return EXIT_OK
    if args.scenario not in CATALOG:
        print(f"unknown scenario {args.scenario!r}; catalog: "
              f"{', '.join(sorted(CATALOG))}", file=sys.stderr)
        return EXIT_UNKNOWN_SCENARIO
    outcome = run_catalog_scenario(args.scenario, seed=seed)
    _emit(outcome.to_json(), args.output)
    return EXIT_OK if outcome.extra.get("verdict_ok") else EXIT_HANDSHAKE


def _vector_lines(seed) -> list:
    """One line per pinned derivation: name, hex inputs, hex output."""
    rng = Rng(seed if seed is not None else 0)
    lines = []

    def emit(name, *fields):
        lines.append("\t".join([name] + [f.hex() for f in fields]))

    for i in range(3):
        k, d = rng.bytes(32), rng.bytes(16 + 8 * i)
        emit("prf", k, d, crypto.prf(k, d))
    for out_len in (32, 64, 96):
        k, d = rng.bytes(32), rng.bytes(24)
        emit("prf_plus", k, d, out_len.to_bytes(2, "big"),
             crypto.prf_plus(k, d, out_len))
    secret, salt = rng.bytes(16), rng.bytes(16)
    emit("kdf_stretch", secret, salt, (1000).to_bytes(4, "big"),
         crypto.kdf_stretch(secret, salt, 1000))
    seed_b = rng.bytes(32)
    token_seed = TokenSeed(seed=seed_b)
    emit("totp", seed_b, (30).to_bytes(2, "big"), (8).to_bytes(1, "big"),
         (59).to_bytes(8, "big"), crypto.totp(token_seed, 59.0).encode())

    n_i, n_r = rng.bytes(32), rng.bytes(32)
    ids = SessionIds(rng.bytes(8), rng.bytes(8))
    shared = ec.base_mult(rng.scalar())
    keyseed = keysched.compute_keyseed(shared, n_i, n_r)
    emit("keyseed", shared.encode(), n_i, n_r, keyseed)
    sched = keysched.derive_sks(keyseed, n_i, n_r, ids)
    emit("sk_slices", keyseed, n_i, n_r, ids.spi_i, ids.spi_r,
         b"".join(sched.all_keys()))
    spwd = rng.bytes(32)
    kpwd = keysched.derive_kpwd(spwd, n_i, n_r, ids)
    emit("kpwd", spwd, n_i, n_r, ids.spi_i, ids.spi_r, kpwd)
    s = rng.scalar()
    nonce = rng.nonce()
    enonce = keysched.make_enonce(kpwd, s, nonce)
    emit("enonce", kpwd, crypto.scalar_bytes(s), nonce, enonce)
    ge = keysched.compute_ge(s, shared)
    emit("ge", crypto.scalar_bytes(s), shared.encode(), ge.encode())
    n_b = rng.bytes(32)
    so = keysched.build_signed_octets(rng.bytes(64), n_r, sched.sk_pi)
    emit("auth_tier1", n_b, n_i, n_r, shared.encode(), so,
         keysched.compute_auth_tier1(ROLE_INITIATOR, n_b, n_i, n_r, shared, so))
    transcript = rng.bytes(48)
    emit("auth_tier2", n_b, transcript, sched.sk_pi,
         keysched.compute_auth_tier2(n_b, transcript, sched.sk_pi))
    tk = crypto.totp(token_seed, 120.0)
    gtk = keysched.compute_gtk(ge, tk)
    emit("gtk", ge.encode(), tk.encode(), gtk)
    auth_shared = ge.mul(rng.scalar())
    emit("final_auth", so, auth_shared.encode(), gtk,
         keysched.compute_final_auth(ROLE_INITIATOR, so, auth_shared, gtk))
    ltk = keysched.compute_long_term_secret(auth_shared, n_i, n_r, ids, 0.0)
    emit("ltk", auth_shared.encode(), n_i, n_r, ids.spi_i, ids.spi_r, ltk.key)
    return lines


def cmd_vectors(args) -> int:
    lines = _vector_lines(args.seed)
    if args.filter:
        lines = [ln for ln in lines if ln.split("\t", 1)[0] == args.filter]
    _emit("\n".join(lines) + "\n", args.output)
    return EXIT_OK


def cmd_registry_list(args) -> int:
    if not args.registry or not os.path.exists(args.registry):
        print("no registry file", file=sys.stderr)
        return EXIT_IO
    try:
        registry = ServiceRegistry.load(args.registry)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"registry error: {exc}", file=sys.stderr)
        return EXIT_IO
    users = [
        {"user_id": r.user_id, "relying_party_id": r.relying_party_id,
         "issued_at": r.issued_at, "expires_at": r.expires_at,
         "attributes": sorted("/".join(a) for k in r.abe_keys for a in k.shares)}
        for r in registry._users.values()
    ]
    _emit(json.dumps({"service_id": registry.service_id, "users": users},
                     indent=2, sort_keys=True), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locathe",
        description="location-enhanced authenticated key exchange toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--registry", default=os.environ.get("LOCATHE_REGISTRY"),
                       help="registry file (default: $LOCATHE_REGISTRY)")
        p.add_argument("--seed", type=int, default=None,
                       help="fix all randomness for reproducible output")
        p.add_argument("--output", default=None,
                       help="output path, '-' for stdout (default)")
        p.add_argument("--format", choices=("json", "hex"), default="json")

    p = sub.add_parser("register", help="enroll a user, write their bundle")
    add_common(p)
    p.add_argument("user_id")
    p.add_argument("--attr", action="append", default=[],
                   help="attribute, 'authority/name' or bare name "
                        "(repeatable; default: member)")
    p.add_argument("--password", default=None)
    p.add_argument("--service-id", default=DEFAULT_SERVICE_ID)
    p.add_argument("--bundle", default=None, help="bundle output path")
    p.add_argument("--now", type=float, default=0.0)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("demo", help="run one full handshake, dump transcript")
    add_common(p)
    p.add_argument("--tier", choices=tuple(TIER_NAMES), default="both")
    p.add_argument("--user-id", default="demo-user")
    p.add_argument("--wrong-password", action="store_true",
                   help="test hook: corrupt the stored password")
    p.set_defaults(fn=cmd_demo)

    p = sub.add_parser("attack", help="run an adversary scenario")
    add_common(p)
    p.add_argument("scenario", nargs="?", default=None,
                   help=f"one of: {', '.join(sorted(CATALOG))}")
    p.add_argument("--scenario-file", default=None,
                   help="JSON scenario definition instead of a catalog name")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("vectors", help="emit deterministic test vectors")
    add_common(p)
    p.add_argument("filter", nargs="?", default=None,
                   help="emit only vectors with this exact name")
    p.set_defaults(fn=cmd_vectors)

    p = sub.add_parser("registry-list", help="list registered users")
    add_common(p)
    p.set_defaults(fn=cmd_registry_list)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "attack" and args.scenario is None \
            and args.scenario_file is None:
        print("attack needs a scenario name or --scenario-file",
              file=sys.stderr)
        return EXIT_UNKNOWN_SCENARIO
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
