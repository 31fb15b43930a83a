"""Attack scenarios: JSON scripts run against a fully deployed system.

A scenario file looks like::

    {"name": "...", "threat": "...", "containment": "...",
     "script":   [{"op": "launch_app", "args": {...}}, ...],
     "expected": [{"op": "request_keys", "args": {...}, "expect": "SpoofedQuoteError"}, ...]}

Script actions must all succeed. Each expected entry runs its op and
compares the outcome with ``expect``: ``"ok"`` (no error), an error class
name (exact match), or ``{"value": X}`` (returned value equals X).
Ops are looked up in ``ACTIONS``; adding an attack means adding a JSON file.
"""

from __future__ import annotations

import json
from dataclasses import replace
from importlib import resources
from typing import Callable, Optional

from . import certs, crypto
from .crypto import KeyPair, KeyShare
from .errors import DstackError, ScenarioError
from .gateway import CaaRecord, Request, caa_check, registration_report_data, verify_presented_chain
from .kms import THRESHOLD, RootKeyState, RootSecrets, derive_bundle
from .sealed_storage import BackupBlob, ChainCounters, backup, restore, seal, unseal
from .system import GenesisConfig, demo_manifest
from .tee_sim import OsImage, verify_quote
from .walkthrough import Run, run_walkthrough

ATTACKS = (
    "fake-quote",
    "unauthorized-code",
    "supply-chain-image",
    "rollback",
    "dns-hijack",
    "stale-firmware",
    "kms-node-compromise",
)


def load_scenario(name: str) -> dict:
    if name not in ATTACKS:
        raise ScenarioError(f"unknown attack {name!r}; known: {', '.join(ATTACKS)}")
    text = resources.files("dstack_sim").joinpath("scenarios", f"{name}.json").read_text()
    return json.loads(text)


class Context:
    def __init__(self, run: Run):
        self.run = run
        self.system = run.system
        self.vars: dict[str, object] = {"app": run.app, "gateway": run.gateway_instance}
        self.counters = ChainCounters(self.system.kms_auth)

    def get(self, name: str):
        try:
            return self.vars[name]
        except KeyError:
            raise ScenarioError(f"scenario refers to undefined name {name!r}") from None


ACTIONS: dict[str, Callable] = {}


def action(fn):
    ACTIONS[fn.__name__] = fn
    return fn


# -- apps and attestation ------------------------------------------------------


@action
def launch_app(ctx: Context, save: str, compose_patch: str = "", image_label: Optional[str] = None,
               os_label: Optional[str] = None, firmware: Optional[int] = None,
               endorsed: bool = True):
    """Boot a CVM claiming the registered app's identity, possibly modified."""
    s = ctx.system
    base = ctx.run.app
    presented = base.manifest
    if compose_patch or image_label:
        label = image_label or s.config.app_label
        measured = demo_manifest(label, compose_patch)
        if image_label:
            # Same compose text, different image bytes under the same tag.
            measured = type(presented)(presented.compose_text, measured.image_digests, presented.config)
        presented = measured
    image = OsImage.from_labels(os_label) if os_label else None
    ctx.vars[save] = s.deploy(save, presented, base.app_id, os_image=image,
                              firmware=firmware, endorsed=endorsed)


@action
def verify_app_quote(ctx: Context, instance: str):
    verify_quote(ctx.get(instance).key_request_quote(), ctx.system.attestation_root)


@action
def tamper_quote(ctx: Context, instance: str, save: str, field: str):
    """Take an honest quote and flip one byte of ``field``."""
    quote = ctx.get(instance).key_request_quote()
    value = getattr(quote, field)
    if isinstance(value, int):
        value ^= 1
    elif isinstance(value, bytes):
        value = bytes([value[0] ^ 1]) + value[1:]
    else:
        raise ScenarioError(f"cannot tamper field {field!r}")
    ctx.vars[save] = replace(quote, **{field: value})


@action
def verify_saved_quote(ctx: Context, quote: str):
    verify_quote(ctx.get(quote), ctx.system.attestation_root)


@action
def request_keys(ctx: Context, instance: str):
    inst = ctx.get(instance)
    inst.request_keys(ctx.system.cluster)


@action
def gateway_register(ctx: Context, instance: str):
    """Direct-quote registration at the gateway (no KMS chain)."""
    inst = ctx.get(instance)
    key = KeyPair.generate(ctx.system.randbytes)
    quote = inst.tee.generate_quote(registration_report_data(inst.app_id, key.public))
    ctx.system.gateway.register_app(endpoint=lambda b: b"", quote=quote, manifest=inst.manifest,
                                    app_id=inst.app_id, subject_public=key.public)


@action
def approve_instance_code(ctx: Context, instance: str, signers: int):
    inst = ctx.get(instance)
    _, statuses = ctx.system.approve_code(inst.app_id, inst.manifest.app_digest(), signers)
    return [st.value for st in statuses]


# -- sealed storage -------------------------------------------------------------


@action
def seal_data(ctx: Context, instance: str, data: str, save: str, counter: str = "data"):
    inst = ctx.get(instance)
    ctx.vars[save] = seal(inst.bundle, data.encode(), ctx.counters, counter, ctx.system.randbytes)


@action
def unseal_data(ctx: Context, instance: str, volume: str):
    inst = ctx.get(instance)
    return unseal(inst.bundle, ctx.get(volume), ctx.counters, ctx.system.cluster.live_epochs()).decode()


@action
def backup_volume(ctx: Context, instance: str, volume: str, save: str):
    inst = ctx.get(instance)
    blob = backup(ctx.get(volume), inst.bundle, ctx.counters, randbytes=ctx.system.randbytes)
    ctx.vars[save] = BackupBlob.from_bytes(blob.to_bytes())


@action
def restore_backup(ctx: Context, instance: str, blob: str):
    inst = ctx.get(instance)
    return restore(ctx.get(blob), inst.bundle, ctx.counters, ctx.system.cluster.live_epochs()).decode()


# -- DNS, certificates, CT -----------------------------------------------------


@action
def rogue_issue(ctx: Context, instance: str, save: str):
    """An attacker CA issues a certificate for the app's host and submits it to CT,
    as browsers require before they accept it."""
    s = ctx.system
    host = ctx.run.host
    ca = KeyPair.generate(s.randbytes)
    site = KeyPair.generate(s.randbytes)
    now = s.clock.now
    root = certs.issue("rogue-ca", ca.public, "rogue-ca", ca, epoch=1, validity=(now, now + 10**6))
    leaf = certs.issue(host, site.public, "rogue-ca", ca, epoch=1, validity=(now, now + 10**6),
                       app_id=ctx.get(instance).app_id)
    s.gateway.ct_log.append(now, leaf)
    ctx.vars[save] = (leaf, root)
    injected = ctx.vars.setdefault("_injected", [])
    injected.append(leaf.fingerprint().hex())


@action
def hijack_dns(ctx: Context, chain: str):
    """DNS for the app's host now resolves to the attacker, who serves ``chain``."""
    ctx.vars["_dns"] = ctx.get(chain)


@action
def client_connect(ctx: Context):
    s = ctx.system
    host = ctx.run.host
    hijacked = ctx.vars.get("_dns")
    if hijacked is not None:
        chain = hijacked
    else:
        chain = s.client_call(host, b"ping").chain
    verdict = verify_presented_chain(chain, s.kms_auth.root_public, s.kms_auth, s.clock.now, host)
    return verdict.reason


@action
def ct_monitor(ctx: Context):
    alerts = ctx.system.gateway.monitor()
    injected = set(ctx.vars.get("_injected", []))
    return {"alerts": len(alerts), "matches_injected": {a.fingerprint for a in alerts} == injected}


@action
def caa_allows(ctx: Context, issuer: str):
    gw = ctx.system.gateway
    name = gw.issuer_name if issuer == "gateway" else issuer
    return caa_check(gw.zone, ctx.run.host, name)


@action
def set_caa(ctx: Context, issuer: str):
    gw = ctx.system.gateway
    gw.caa_set(gw.zone.apex, CaaRecord(gw.zone.apex, issuer))


@action
def gateway_route(ctx: Context):
    s = ctx.system
    return s.gateway.route(Request(ctx.run.host, b"ping")).body.decode()


# -- KMS compromise -------------------------------------------------------------


def _real_keys(ctx: Context) -> bytes:
    return ctx.run.app.bundle.disk_key


@action
def compromise_nodes(ctx: Context, count: str):
    """Copy the full state of the first ``count`` members (``t-1`` or ``t`` allowed)."""
    cluster = ctx.system.cluster
    if cluster.mode != THRESHOLD:
        raise ScenarioError("node compromise containment needs threshold mode")
    n = {"t-1": cluster.threshold - 1, "t": cluster.threshold}.get(count)
    if n is None:
        n = int(count)
    epoch = cluster.current_epoch
    stolen = [cluster.nodes[name].shares[epoch] for name in cluster.members[:n]]
    ctx.vars["_stolen"] = stolen


@action
def attacker_reconstruct(ctx: Context):
    cluster = ctx.system.cluster
    shares = ctx.get("_stolen")
    return crypto.shamir_reconstruct(shares, cluster.threshold).hex()


@action
def attacker_derive(ctx: Context):
    """Best effort: interpolate whatever was stolen and derive the app's disk key."""
    cluster = ctx.system.cluster
    shares = ctx.get("_stolen")
    if not shares:
        return "no-match"
    guess = RootSecrets.from_bytes(crypto.shamir_reconstruct(shares, len(shares)))
    app = ctx.run.app
    state = RootKeyState(cluster.current_epoch, guess.ca_secret, guess.sign_secret, guess.public, 0)
    derived = derive_bundle(state, app.app_id, app.instance_id)
    return "match" if derived.disk_key == _real_keys(ctx) else "no-match"


@action
def alternative_root_consistent(ctx: Context, trials: int = 16):
    """Every candidate root is consistent with the stolen shares: for each random
    candidate, completing the sharing with honest-looking shares reconstructs
    that candidate, so the stolen view carries no information about the root."""
    cluster = ctx.system.cluster
    stolen = ctx.get("_stolen")
    t = cluster.threshold
    used = {s.index for s in stolen}
    fresh = [i for i in range(1, 256) if i not in used][: t - len(stolen)]
    if not fresh:
        return False
    rng = ctx.system.randbytes
    for _ in range(trials):
        candidate = rng(64)
        # Interpolate through (0, candidate) and the stolen points to fill the rest.
        xs = [0] + [s.index for s in stolen]
        completed = list(stolen)
        for idx in fresh:
            coeffs = crypto.lagrange_coefficients(xs, at=idx)
            payload = bytes(64)
            for c, data in zip(coeffs, [candidate] + [s.payload for s in stolen]):
                payload = bytes(a ^ crypto.gf_mul(c, b) for a, b in zip(payload, data))
            completed.append(KeyShare(idx, payload))
        if crypto.shamir_reconstruct(completed, t) != candidate:
            return False
    return True


# -- runner ---------------------------------------------------------------------


def _invoke(ctx: Context, entry: dict):
    op = entry.get("op")
    if op not in ACTIONS:
        raise ScenarioError(f"unknown scenario op {op!r}")
    return ACTIONS[op](ctx, **entry.get("args", {}))


def _matches(expect, outcome: dict) -> bool:
    if expect == "ok":
        return outcome["error"] is None
    if isinstance(expect, str):
        return outcome["error"] == expect
    if isinstance(expect, dict) and "value" in expect:
        return outcome["error"] is None and outcome["value"] == expect["value"]
    raise ScenarioError(f"bad expectation {expect!r}")


def run_scenario(scenario: dict, seed: int = 42, config: Optional[GenesisConfig] = None) -> dict:
    keep: dict = {}
    setup = run_walkthrough(seed, config=config, keep=keep)
    if not setup["ok"]:
        raise ScenarioError("deployment walkthrough failed; cannot stage the attack")
    ctx = Context(keep["run"])
    for entry in scenario.get("script", []):
        _invoke(ctx, entry)
    results = []
    for entry in scenario["expected"]:
        try:
            value, error = _invoke(ctx, entry), None
        except DstackError as exc:
            value, error = None, type(exc).__name__
        outcome = {"error": error, "value": value}
        results.append({
            "op": entry["op"],
            "args": entry.get("args", {}),
            "expect": entry["expect"],
            "actual": error or ({"value": value} if value is not None else "ok"),
            "ok": _matches(entry["expect"], outcome),
        })
    return {
        "name": scenario["name"],
        "threat": scenario.get("threat", ""),
        "containment": scenario.get("containment", ""),
        "seed": seed,
        "assertions": results,
        "ok": all(r["ok"] for r in results),
    }


def run_attack(name: str, seed: int = 42, config: Optional[GenesisConfig] = None) -> dict:
    return run_scenario(load_scenario(name), seed, config)


def verdict_text(verdict: dict) -> str:
    lines = [f"attack {verdict['name']}: {verdict['threat']}"]
    for r in verdict["assertions"]:
        mark = "ok  " if r["ok"] else "FAIL"
        lines.append(f"  [{mark}] {r['op']} expect {r['expect']!r} got {r['actual']!r}")
    lines.append(f"containment: {verdict['containment']}")
    lines.append("PASS" if verdict["ok"] else "FAIL")
    return "\n".join(lines)
