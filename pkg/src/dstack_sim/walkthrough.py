"""End-to-end verification walkthrough.

Seven links, each verified before the next one runs:

1. kms-auth-genesis         governance registry created with its governor quorum
2. kms-bootstrap            first KMS node attested, root key recorded on chain
3. kms-node-admission       remaining nodes attested, registered and given root material
4. gateway-verification     gateway attested, keyed by the KMS, chain checked against the chain root
5. app-deploy-key-release   app registered, booted, quote checked, keys released
6. gateway-routing          app registered at the gateway; a client verifies the served chain
7. key-proof                the app generates a keypair and proves it with a quote carrying the key

Each named fault breaks exactly one link; ``FAULTS`` maps it to that step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto, wire
from .errors import DstackError, ScenarioError, SpoofedQuoteError
from .gateway import Gateway, verify_presented_chain
from .kms import GATEWAY, RootKeyState, RootSecrets, derive_bundle, kms_identity, verify_bundle_chain
from .system import AppInstance, GenesisConfig, System, demo_manifest
from .tee_sim import OsImage, Quote, expected_rtmr3, os_digest, pad_report_data, verify_quote

STEPS = (
    "kms-auth-genesis",
    "kms-bootstrap",
    "kms-node-admission",
    "gateway-verification",
    "app-deploy-key-release",
    "gateway-routing",
    "key-proof",
)

FAULTS = {
    "genesis-threshold": 1,
    "kms-image-tampered": 2,
    "unregistered-kms-node": 3,
    "gateway-image-tampered": 4,
    "app-digest-corrupted": 5,
    "foreign-gateway-root": 6,
    "report-data-swap": 7,
}


class LinkBroken(DstackError):
    """A verification that returned a negative verdict rather than raising."""


@dataclass
class Run:
    system: System
    fault: Optional[str]
    app: Optional[AppInstance] = None
    gateway_instance: Optional[AppInstance] = None
    host: Optional[str] = None
    extra: dict = field(default_factory=dict)


def _genesis(run: Run) -> dict:
    s = run.system
    threshold = s.config.governors + 1 if run.fault == "genesis-threshold" else None
    auth = s.genesis(threshold)
    return {
        "address": auth.address.hex(),
        "governors": len(auth.governors),
        "threshold": auth.governance_threshold,
        "os_digests": sorted(d.hex() for d in auth.os_digests),
        "kms_node_digest": auth.kms_node_digest.hex(),
    }


def _bootstrap(run: Run) -> dict:
    s = run.system
    label = "dstack-kms-backdoored" if run.fault == "kms-image-tampered" else None
    node = s.launch_kms_node("kms-0", code_label=label)
    cluster = s.new_cluster()
    s.register_kms_node(node)
    cluster.bootstrap_first_node(node)
    # Anyone can re-check the first node from what is on chain.
    recorded = Quote.from_bytes(s.kms_auth.first_node_quote)
    vq = verify_quote(recorded, s.attestation_root)
    if os_digest(vq.measurements) not in s.kms_auth.os_digests:
        raise LinkBroken("first node quote names an unregistered OS")
    if s.kms_auth.root_public != cluster.root_public:
        raise LinkBroken("on-chain root differs from the KMS root")
    return {"root_public": cluster.root_public.hex(), "epoch": cluster.current_epoch,
            "first_node_quote": recorded.digest().hex()}


def _admission(run: Run) -> dict:
    s = run.system
    cluster = s.cluster
    count = s.config.kms_committee
    for i in range(1, count):
        node = s.launch_kms_node(f"kms-{i}")
        if not (run.fault == "unregistered-kms-node" and i == count - 1):
            s.register_kms_node(node)
        cluster.admit_node(node)
    held = {name: sorted(cluster.nodes[name].shares or cluster.nodes[name].root_cache)
            for name in cluster.members}
    if any(not epochs for epochs in held.values()):
        raise LinkBroken("a member holds no root material")
    return {"mode": cluster.mode, "threshold": cluster.threshold, "members": list(cluster.members)}


def _gateway(run: Run) -> dict:
    s = run.system
    manifest = s.gateway_manifest
    app_id = s.register_app(manifest)
    measured = demo_manifest(s.config.gateway_label, "  debug-shell: enabled\n") \
        if run.fault == "gateway-image-tampered" else None
    inst = s.deploy("gateway", manifest, app_id, measured=measured)
    bundle = inst.request_keys(s.cluster, kind=GATEWAY)
    verify_bundle_chain(bundle, s.kms_auth.root_public)
    s.gateway = Gateway(bundle, s.kms_auth, s.clock, s.attestation_root, s.config.zone)
    run.gateway_instance = inst
    return {"app_id": app_id.hex(), "issuer": s.gateway.issuer_name,
            "chain": [c.subject for c in bundle.cert_chain]}


def _app(run: Run) -> dict:
    s = run.system
    manifest = s.app_manifest
    registered = demo_manifest(s.config.app_label, "  # corrupted\n") \
        if run.fault == "app-digest-corrupted" else manifest
    app_id = s.register_app(registered)
    inst = s.deploy("app", manifest, app_id)
    bundle = inst.request_keys(s.cluster)
    verify_bundle_chain(bundle, s.kms_auth.root_public)
    run.app = inst
    return {"app_id": app_id.hex(), "app_digest": manifest.app_digest().hex(),
            "instance_id": inst.instance_id.hex(), "epoch": bundle.epoch}


def _foreign_gateway(s: System) -> Gateway:
    # A look-alike gateway keyed by a KMS the chain never recorded.
    secrets = RootSecrets.generate(s.randbytes)
    rogue = RootKeyState(1, secrets.ca_secret, secrets.sign_secret, secrets.public, s.clock.now)
    bundle = derive_bundle(rogue, s.gateway.bundle.app_id, s.gateway.bundle.instance_id, GATEWAY)
    return Gateway(bundle, s.kms_auth, s.clock, s.attestation_root, s.config.zone,
                   expected_root=s.kms_auth.root_public)


def _routing(run: Run) -> dict:
    s = run.system
    if run.fault == "foreign-gateway-root":
        s.gateway = _foreign_gateway(s)
    app = run.app
    run.host = s.gateway.register_app(app.bundle.cert_chain, endpoint=s.app_endpoint(app))
    response = s.client_call(run.host, b"ping")
    verdict = verify_presented_chain(response.chain, s.kms_auth.root_public, s.kms_auth,
                                     s.clock.now, run.host)
    if not verdict:
        raise LinkBroken(f"client rejected the served chain: {verdict.reason}")
    if response.body != b"pong":
        raise LinkBroken("unexpected response body")
    return {"host": run.host, "verdict": verdict.reason,
            "leaf": response.chain[0].fingerprint().hex(), "ct_entries": len(s.gateway.ct_log)}


def _key_proof(run: Run) -> dict:
    s = run.system
    response = s.client_call(run.host, b"keygen")
    public, raw_quote = wire.unpack_fields(response.body)
    quote = Quote.from_bytes(raw_quote)
    if run.fault == "report-data-swap":
        # The app answers with a quote made for some other key.
        quote = run.app.tee.generate_quote(crypto.KeyPair.generate(s.randbytes).public)
    verdict = check_key_proof(s, run.app.app_id, public, quote)
    return {"public_key": public.hex(), "quote": quote.digest().hex(), **verdict}


def check_key_proof(s: System, app_id, public: bytes, quote: Quote) -> dict:
    """The client-side check on a key the app claims to have generated."""
    vq = verify_quote(quote, s.attestation_root)
    if vq.report_data != pad_report_data(public):
        raise SpoofedQuoteError("quote report data does not carry the presented key")
    if os_digest(vq.measurements) not in s.kms_auth.os_digests:
        raise LinkBroken("quote names an unregistered OS")
    ident = kms_identity(s.kms_auth)
    allowed = s.kms_auth.app(app_id).allowed_code_digests
    code = next((d for d in sorted(allowed) if expected_rtmr3(d, ident) == vq.measurements.rtmr[3]), None)
    if code is None:
        raise LinkBroken("RTMR3 matches no authorized code digest")
    return {"code_digest": code.hex(), "instance_id": vq.instance_id.hex()}


_RUNNERS: tuple[Callable[[Run], dict], ...] = (
    _genesis, _bootstrap, _admission, _gateway, _app, _routing, _key_proof,
)


def run_walkthrough(seed: int = 42, fault: Optional[str] = None,
                    config: Optional[GenesisConfig] = None, *, keep: Optional[dict] = None) -> dict:
    """Run all links in order; the report marks where the chain broke, if it did.

    ``keep``, if given, receives the live Run object for callers that continue
    from the finished deployment.
    """
    if fault is not None and fault not in FAULTS:
        raise ScenarioError(f"unknown fault {fault!r}; known: {', '.join(FAULTS)}")
    run = Run(System(seed, config), fault)
    steps, broken_at = [], None
    for index, (name, runner) in enumerate(zip(STEPS, _RUNNERS), start=1):
        if broken_at is not None:
            steps.append({"step": index, "name": name, "status": "skipped"})
            continue
        try:
            detail = runner(run)
        except DstackError as exc:
            broken_at = index
            steps.append({"step": index, "name": name, "status": "broken",
                          "error": type(exc).__name__, "message": str(exc)})
        else:
            steps.append({"step": index, "name": name, "status": "verified", "detail": detail})
    expected = FAULTS.get(fault)
    report = {
        "seed": seed,
        "fault": fault,
        "steps": steps,
        "verified": sum(st["status"] == "verified" for st in steps),
        "broken_at": broken_at,
        "expected_break": expected,
        "ok": broken_at == expected,
    }
    if keep is not None:
        keep["run"] = run
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def report_text(report: dict) -> str:
    lines = [f"walkthrough seed={report['seed']} fault={report['fault'] or 'none'}"]
    for st in report["steps"]:
        mark = {"verified": "ok ", "broken": "BROKEN", "skipped": "-- "}[st["status"]]
        tail = f"  {st['error']}: {st['message']}" if st["status"] == "broken" else ""
        lines.append(f"  [{mark}] {st['step']}. {st['name']}{tail}")
    if report["fault"]:
        lines.append(f"chain broke at step {report['broken_at']}, expected {report['expected_break']}")
    lines.append("PASS" if report["ok"] else "FAIL")
    return "\n".join(lines)
