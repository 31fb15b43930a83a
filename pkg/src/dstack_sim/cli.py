"""Command line entry point: ``dstack-sim`` (or ``python -m dstack_sim``).

There is no daemon: every invocation rebuilds the deployment from ``--seed``
and ``--config``, which is deterministic, then runs the requested command
against it. Sealed volumes therefore stay readable across invocations that
use the same seed and config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

from . import attacks, sealed_storage, walkthrough
from .audit import audit, report_text
from .errors import DstackError, ScenarioError
from .attacks import Context, rogue_issue
from .gateway import CaaRecord, caa_check, verify_presented_chain
from .governance import ROTATE_ROOT, ROTATE_SHARES
from .kms import THRESHOLD
from .system import GenesisConfig, demo_manifest
from .tee_sim import Quote, quote_json, verify_quote


def _emit(args, payload: dict, text: Optional[str] = None) -> None:
    if args.json or text is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _config(args) -> Optional[GenesisConfig]:
    return GenesisConfig.load(args.config) if args.config else None


def _deploy(args):
    keep: dict = {}
    report = walkthrough.run_walkthrough(args.seed, config=_config(args), keep=keep)
    if not report["ok"]:
        raise ScenarioError("deployment walkthrough failed")
    run = keep["run"]
    # The replica is always created at the same point in the RNG stream, so
    # its instance id (and disk key) is the same in every invocation.
    run.extra["replica"] = run.system.deploy("replica", run.app.manifest, run.app.app_id)
    return run


# -- walkthrough / attack / audit -------------------------------------------------


def cmd_walkthrough(args) -> int:
    keep: dict = {}
    report = walkthrough.run_walkthrough(args.seed, args.fault, _config(args), keep=keep)
    if args.export_log:
        auth = keep["run"].system.kms_auth
        if auth is None:
            raise ScenarioError("no governance log to export: genesis never ran")
        Path(args.export_log).write_text("\n".join(auth.export_lines()) + "\n")
    _emit(args, report, walkthrough.report_text(report))
    return 0 if report["ok"] else 1


def cmd_attack(args) -> int:
    if args.name == "all":
        verdicts = [attacks.run_attack(n, args.seed, _config(args)) for n in attacks.ATTACKS]
    else:
        verdicts = [attacks.run_attack(args.name, args.seed, _config(args))]
    ok = all(v["ok"] for v in verdicts)
    if args.json:
        print(json.dumps(verdicts if args.name == "all" else verdicts[0], indent=2, sort_keys=True))
    else:
        print("\n\n".join(attacks.verdict_text(v) for v in verdicts))
    return 0 if ok else 1


def cmd_audit(args) -> int:
    lines = Path(args.file).read_text().splitlines()
    report = audit(lines)
    _emit(args, report.to_json(), report_text(report))
    return 0 if report.ok else 1


# -- kms ------------------------------------------------------------------------


def _bundle_json(bundle) -> dict:
    def digest(b: bytes) -> str:
        return hashlib.sha256(b).hexdigest()

    return {
        "app_id": bundle.app_id.hex(),
        "instance_id": bundle.instance_id.hex(),
        "epoch": bundle.epoch,
        # Secrets are shown only as digests.
        "disk_key_sha256": digest(bundle.disk_key),
        "env_key_sha256": digest(bundle.env_key),
        "app_ca_sha256": digest(bundle.app_ca_secret),
        "app_sign_public": bundle.app_sign_key.public.hex(),
        "chain": [c.to_json() for c in bundle.cert_chain],
    }


def cmd_kms(args) -> int:
    run = _deploy(args)
    s = run.system
    cluster = s.cluster
    out: dict = {"mode": cluster.mode, "threshold": cluster.threshold}
    if args.kms_cmd == "bootstrap":
        out.update(root_public=cluster.root_public.hex(), epoch=cluster.current_epoch,
                   first_node_quote=Quote.from_bytes(s.kms_auth.first_node_quote).digest().hex())
    elif args.kms_cmd == "admit":
        for i in range(args.count):
            node = s.launch_kms_node(f"kms-extra-{i}")
            s.register_kms_node(node)
            cluster.admit_node(node)
        out["members"] = list(cluster.members)
        out["share_index"] = dict(cluster.share_index)
    elif args.kms_cmd == "rotate-shares":
        if cluster.mode != THRESHOLD:
            raise ScenarioError("share rotation needs kms_mode threshold")
        before = run.app.request_keys(cluster).to_bytes()
        for _ in range(args.times):
            s.authorize_rotation(ROTATE_SHARES)
            cluster.rotate_shares()
        after = run.app.request_keys(cluster).to_bytes()
        out.update(rotations=args.times, keys_unchanged=before == after,
                   shares={n: cluster.nodes[n].shares[cluster.current_epoch].payload.hex()[:16]
                           for n in cluster.members})
        if before != after:
            _emit(args, out, None)
            return 1
    elif args.kms_cmd == "rotate-root":
        s.authorize_rotation(ROTATE_ROOT)
        cluster.rotate_root(args.handover)
        s.clock.advance(args.advance)
        out.update(cluster.epoch_status())
        out["root_publics"] = {str(e): k.hex() for e, k in sorted(s.kms_auth.root_publics.items())}
    elif args.kms_cmd == "derive":
        inst = run.app
        if args.app_label:
            manifest = demo_manifest(args.app_label)
            app_id = s.register_app(manifest)
            inst = s.deploy(args.app_label, manifest, app_id)
        out["bundle"] = _bundle_json(inst.request_keys(cluster))
    _emit(args, out)
    return 0


# -- gateway --------------------------------------------------------------------


def cmd_gateway(args) -> int:
    run = _deploy(args)
    s = run.system
    gw = s.gateway
    if args.gw_cmd == "register":
        manifest = demo_manifest(args.app_label)
        app_id = s.register_app(manifest)
        inst = s.deploy(args.app_label, manifest, app_id)
        inst.request_keys(s.cluster)
        host = gw.register_app(inst.bundle.cert_chain, endpoint=s.app_endpoint(inst))
        _emit(args, {"host": host, "routes": gw.routing_table()})
    elif args.gw_cmd == "route":
        host = args.host or run.host
        s.clock.advance(args.advance)
        resp = s.client_call(host, args.body.encode())
        verdict = verify_presented_chain(resp.chain, s.kms_auth.root_public, s.kms_auth, s.clock.now, host)
        _emit(args, {"host": host, "body": resp.body.decode(errors="replace"),
                     "verdict": verdict.reason, "leaf": resp.chain[0].to_json()})
        return 0 if verdict.ok else 1
    elif args.gw_cmd == "ct-scan":
        ctx = Context(run)
        for i in range(args.inject_rogue):
            rogue_issue(ctx, "app", f"rogue-{i}")
        alerts = gw.monitor()
        injected = set(ctx.vars.get("_injected", []))
        _emit(args, {"ct_entries": len(gw.ct_log), "alerts": [a.__dict__ for a in alerts],
                     "matches_injected": {a.fingerprint for a in alerts} == injected})
        return 0 if {a.fingerprint for a in alerts} == injected else 1
    elif args.gw_cmd == "caa-set":
        domain = args.domain or gw.zone.apex
        gw.caa_set(gw.zone.apex, CaaRecord(domain, args.issuer))
        _emit(args, {"domain": domain, "issuer": args.issuer,
                     "gateway_may_issue": caa_check(gw.zone, domain, gw.issuer_name)})
    return 0


# -- sealed storage ------------------------------------------------------------------


def _instance(run, name: str, epoch: Optional[int] = None):
    """The primary app instance or a replica, with keys for ``epoch``."""
    s = run.system
    inst = run.extra["replica"] if name == "replica" else run.app
    if epoch is not None:
        while s.cluster.current_epoch < epoch:
            s.authorize_rotation(ROTATE_ROOT)
            s.cluster.rotate_root(s.config.handover_ticks)
    return inst.request_keys(s.cluster, epoch=epoch)


def cmd_storage(args) -> int:
    run = _deploy(args)
    counters = sealed_storage.LocalCounters(Path(args.counters))
    data = Path(args.input).read_bytes()
    rb = run.system.randbytes
    out = Path(args.output)
    cmd = args.command
    if cmd == "seal":
        bundle = _instance(run, args.instance)
        vol = sealed_storage.seal(bundle, data, counters, args.counter, rb)
        out.write_bytes(vol.to_bytes())
        info = {"counter_value": vol.header.counter_value, "epoch": vol.header.epoch}
    elif cmd == "unseal":
        vol = sealed_storage.SealedVolume.from_bytes(data)
        bundle = _instance(run, args.instance, vol.header.epoch)
        out.write_bytes(sealed_storage.unseal(bundle, vol, counters))
        info = {"counter_value": vol.header.counter_value, "epoch": vol.header.epoch}
    elif cmd == "backup":
        vol = sealed_storage.SealedVolume.from_bytes(data)
        bundle = _instance(run, args.instance, vol.header.epoch)
        blob = sealed_storage.backup(vol, bundle, counters, randbytes=rb)
        out.write_bytes(blob.to_bytes())
        info = {"counter_value": vol.header.counter_value, "source_instance": blob.source_instance.hex()}
    elif cmd == "restore":
        blob = sealed_storage.BackupBlob.from_bytes(data)
        bundle = _instance(run, args.instance, blob.volume.header.epoch)
        out.write_bytes(sealed_storage.restore(blob, bundle, counters))
        info = {"counter_value": blob.volume.header.counter_value}
    else:  # migrate
        vol = sealed_storage.SealedVolume.from_bytes(data)
        old = _instance(run, "app", vol.header.epoch)
        if args.to == "next-epoch":
            new = _instance(run, "app", vol.header.epoch + 1)
        else:
            new = _instance(run, "replica", vol.header.epoch)
        moved = sealed_storage.migrate(vol, old, new, counters, run.system.cluster.live_epochs(), rb)
        out.write_bytes(moved.to_bytes())
        info = {"epoch": moved.header.epoch, "counter_value": moved.header.counter_value,
                "origin": moved.header.origin.hex()}
    _emit(args, {"command": cmd, "output": str(out), **info})
    return 0


# -- quote ----------------------------------------------------------------------


def cmd_quote(args) -> int:
    run = _deploy(args)
    s = run.system
    if args.file:
        quote = Quote.from_bytes(Path(args.file).read_bytes())
    else:
        sources = {"app": run.app.tee, "gateway": run.gateway_instance.tee,
                   **{n: s.cluster.nodes[n].tee for n in s.cluster.members}}
        if args.instance not in sources:
            raise ScenarioError(f"unknown instance {args.instance!r}; have {sorted(sources)}")
        quote = sources[args.instance].generate_quote(args.report_data.encode())
    if args.out:
        Path(args.out).write_bytes(quote.to_bytes())
    try:
        verify_quote(quote, s.attestation_root)
        verdict = "valid"
    except DstackError as exc:
        verdict = type(exc).__name__
    payload = {"quote": json.loads(quote_json(quote)), "verdict": verdict}
    _emit(args, payload)
    return 0 if verdict == "valid" else 1


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dstack-sim", description="Zero-trust TEE platform simulator")
    p.add_argument("--seed", type=int, default=42, help="RNG seed (default 42)")
    p.add_argument("--config", help="genesis config JSON")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    # Subcommands accept the same flags; SUPPRESS keeps them from resetting
    # values given before the subcommand name.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS)

    sub = p.add_subparsers(dest="command", required=True)

    w = sub.add_parser("walkthrough", parents=[common], help="end-to-end verification chain")
    w.add_argument("--fault", choices=sorted(walkthrough.FAULTS))
    w.add_argument("--export-log", metavar="FILE", help="write the governance event log here")
    w.set_defaults(func=cmd_walkthrough)

    a = sub.add_parser("attack", parents=[common], help="run a named attack scenario")
    a.add_argument("name", choices=list(attacks.ATTACKS) + ["all"])
    a.set_defaults(func=cmd_attack)

    au = sub.add_parser("audit", parents=[common], help="replay and check an exported event log")
    au.add_argument("file")
    au.set_defaults(func=cmd_audit)

    k = sub.add_parser("kms", parents=[common], help="KMS operations")
    ksub = k.add_subparsers(dest="kms_cmd", required=True)
    ksub.add_parser("bootstrap", parents=[common])
    ka = ksub.add_parser("admit", parents=[common])
    ka.add_argument("--count", type=int, default=1)
    kr = ksub.add_parser("rotate-shares", parents=[common])
    kr.add_argument("--times", type=int, default=1)
    kroot = ksub.add_parser("rotate-root", parents=[common])
    kroot.add_argument("--handover", type=int, default=100)
    kroot.add_argument("--advance", type=int, default=0, help="ticks to advance afterwards")
    kd = ksub.add_parser("derive", parents=[common])
    kd.add_argument("--app-label", help="register and derive for a new app instead")
    k.set_defaults(func=cmd_kms)

    g = sub.add_parser("gateway", parents=[common], help="gateway operations")
    gsub = g.add_subparsers(dest="gw_cmd", required=True)
    gr = gsub.add_parser("register", parents=[common])
    gr.add_argument("--app-label", default="demo-web")
    gro = gsub.add_parser("route", parents=[common])
    gro.add_argument("--host")
    gro.add_argument("--body", default="ping")
    gro.add_argument("--advance", type=int, default=0)
    gc = gsub.add_parser("ct-scan", parents=[common])
    gc.add_argument("--inject-rogue", type=int, default=0)
    gcaa = gsub.add_parser("caa-set", parents=[common])
    gcaa.add_argument("--domain")
    gcaa.add_argument("--issuer", required=True)
    g.set_defaults(func=cmd_gateway)

    for name, helptext in (("seal", "encrypt a file into a sealed volume"),
                           ("unseal", "decrypt a sealed volume"),
                           ("backup", "make a portable backup of a volume"),
                           ("restore", "decrypt a backup on an instance"),
                           ("migrate", "re-seal for another instance or the next epoch")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--in", dest="input", required=True)
        sp.add_argument("--out", dest="output", required=True)
        sp.add_argument("--counters", default="dstack-counters.json",
                        help="local counter file (untrusted mode)")
        sp.add_argument("--instance", choices=("app", "replica"), default="app")
        sp.add_argument("--counter", default="data")
        if name == "migrate":
            sp.add_argument("--to", choices=("replica", "next-epoch"), default="next-epoch")
        sp.set_defaults(func=cmd_storage)

    q = sub.add_parser("quote", parents=[common], help="quote tools")
    qsub = q.add_subparsers(dest="quote_cmd", required=True)
    qd = qsub.add_parser("dump", parents=[common])
    qd.add_argument("--instance", default="app")
    qd.add_argument("--report-data", default="")
    qd.add_argument("--file", help="decode this quote file instead of generating one")
    qd.add_argument("--out", help="also write the raw quote bytes here")
    q.set_defaults(func=cmd_quote)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DstackError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
