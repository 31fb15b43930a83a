"""Builds a complete deployment from a seed and a genesis config.

All randomness comes from one ``random.Random(seed)`` stream and all time
from one logical clock, so two builds with the same seed and the same call
sequence are byte-identical.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from . import crypto, wire
from .clock import LogicalClock
from .crypto import Digest, KeyPair
from .errors import ScenarioError
from .gateway import Gateway, Request
from .governance import AUTHORIZE, AppManifest, GovernanceParams, KmsAuth, approval_message
from .kms import (
    APP,
    DUPLICATION,
    THRESHOLD,
    AppKeyBundle,
    KmsCluster,
    KmsNode,
    key_request_report_data,
    kms_identity,
)
from .simnet import SimNetwork
from .tee_sim import OsImage, Quote, TeeInstance, VendorRoot


@dataclass
class GenesisConfig:
    governors: int = 3
    governance_threshold: int = 2
    kms_mode: str = THRESHOLD
    kms_threshold: int = 2
    kms_committee: int = 3
    app_signers: int = 3
    app_threshold: int = 2
    os_label: str = "dstack-os-0.5.0"
    kms_label: str = "dstack-kms-0.5.0"
    gateway_label: str = "dstack-gateway-0.5.0"
    app_label: str = "key-generator"
    min_firmware_version: int = 1
    firmware_version: int = 2
    handover_ticks: int = 100
    zone: str = "dstack.example"

    @classmethod
    def from_dict(cls, data: dict) -> "GenesisConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown genesis config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if cfg.kms_mode not in (DUPLICATION, THRESHOLD):
            raise ScenarioError(f"kms_mode must be {DUPLICATION!r} or {THRESHOLD!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "GenesisConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def demo_manifest(label: str, variant: str = "") -> AppManifest:
    """A docker-compose style manifest whose image digests follow from ``label``."""
    compose = f"services:\n  {label}:\n    image: registry.example/{label}\n{variant}".encode()
    image = crypto.hash_data(f"image:{label}".encode())
    return AppManifest(compose, (image,), f"label={label}".encode())


@dataclass
class AppInstance:
    """One running CVM of a registered app, as seen from inside the VM."""

    name: str
    tee: TeeInstance
    manifest: AppManifest
    app_id: Digest
    bundle: Optional[AppKeyBundle] = None
    keypairs: list = field(default_factory=list)

    @property
    def instance_id(self) -> Digest:
        return self.tee.instance_id

    def key_request_quote(self) -> Quote:
        return self.tee.generate_quote(key_request_report_data(self.app_id, self.instance_id))

    def request_keys(self, cluster: KmsCluster, *, epoch: Optional[int] = None,
                     kind: str = APP) -> AppKeyBundle:
        bundle = cluster.request_app_keys(self.key_request_quote(), self.manifest, self.app_id,
                                          self.instance_id, epoch=epoch, kind=kind)
        if epoch is None:
            self.bundle = bundle
        return bundle


class System:
    def __init__(self, seed: int = 42, config: Optional[GenesisConfig] = None):
        self.seed = seed
        self.config = config or GenesisConfig()
        self.rng = random.Random(seed)
        self.randbytes = self.rng.randbytes
        self.clock = LogicalClock()
        self.network = SimNetwork(self.clock, seed)
        self.vendor = VendorRoot(self.randbytes)
        self.attestation_root = self.vendor.attestation_root(self.config.min_firmware_version)
        self.os_image = OsImage.from_labels(self.config.os_label)
        self.kms_manifest = demo_manifest(self.config.kms_label)
        self.gateway_manifest = demo_manifest(self.config.gateway_label)
        self.app_manifest = demo_manifest(self.config.app_label)
        self.governor_keys = [KeyPair.generate(self.randbytes) for _ in range(self.config.governors)]
        self.app_signer_keys = [KeyPair.generate(self.randbytes) for _ in range(self.config.app_signers)]
        self.kms_auth: Optional[KmsAuth] = None
        self.cluster: Optional[KmsCluster] = None
        self.gateway: Optional[Gateway] = None
        self.instances: dict[str, AppInstance] = {}

    # -- governance ----------------------------------------------------------

    def genesis(self, threshold: Optional[int] = None) -> KmsAuth:
        cfg = self.config
        self.kms_auth = KmsAuth.genesis(
            [k.public for k in self.governor_keys],
            cfg.governance_threshold if threshold is None else threshold,
            [self.os_image.digest()],
            self.kms_manifest.app_digest(),
        )
        return self.kms_auth

    def approvals(self, action: str, payload: dict, count: Optional[int] = None):
        count = self.config.governance_threshold if count is None else count
        return self.kms_auth.sign_governance(self.governor_keys[:count], action, payload)

    def register_kms_node(self, node: KmsNode) -> None:
        pub = node.node_key.public
        self.kms_auth.register_kms_node(pub, self.approvals("register-kms-node", {"node": pub.hex()}))

    def authorize_rotation(self, rotation: str) -> None:
        self.kms_auth.authorize_rotation(rotation, self.approvals("authorize-rotation", {"rotation": rotation}))

    def register_app(self, manifest: AppManifest, allowed_instances=()) -> Digest:
        params = GovernanceParams(tuple(k.public for k in self.app_signer_keys),
                                  self.config.app_threshold, tuple(allowed_instances))
        return self.kms_auth.register_app(manifest, params)

    def approve_code(self, app_id: Digest, digest: Digest, signers: int):
        """Propose ``digest`` for ``app_id`` and collect ``signers`` approvals."""
        keys = self.app_signer_keys
        pid = self.kms_auth.propose_upgrade(app_id, digest, keys[0].public)
        message = approval_message(app_id, AUTHORIZE, digest)
        return pid, [self.kms_auth.approve_upgrade(app_id, pid, k.public, crypto.sign(k, message))
                     for k in keys[:signers]]

    # -- TEEs ----------------------------------------------------------------

    def new_tee(self, *, firmware: Optional[int] = None, endorsed: bool = True) -> TeeInstance:
        fw = self.config.firmware_version if firmware is None else firmware
        return TeeInstance(self.vendor if endorsed else None, fw, self.randbytes)

    # -- KMS -----------------------------------------------------------------

    def launch_kms_node(self, name: str, *, code_label: Optional[str] = None,
                        os_image: Optional[OsImage] = None) -> KmsNode:
        tee = self.new_tee()
        image = os_image or self.os_image
        code = demo_manifest(code_label) if code_label else self.kms_manifest
        tee.boot(image.manifest(code.app_digest()))
        return KmsNode(name, tee, KeyPair.generate(self.randbytes))

    def new_cluster(self) -> KmsCluster:
        cfg = self.config
        self.cluster = KmsCluster(
            self.kms_auth, self.attestation_root, self.clock, mode=cfg.kms_mode,
            threshold=cfg.kms_threshold if cfg.kms_mode == THRESHOLD else 1,
            committee_size=cfg.kms_committee if cfg.kms_mode == THRESHOLD else 1,
            transport=self.network, randbytes=self.randbytes,
        )
        return self.cluster

    # -- apps ----------------------------------------------------------------

    def deploy(self, name: str, manifest: AppManifest, app_id: Digest, *,
               measured: Optional[AppManifest] = None, os_image: Optional[OsImage] = None,
               firmware: Optional[int] = None, endorsed: bool = True) -> AppInstance:
        """Boot a CVM for ``app_id``. ``measured`` is what actually boots if it
        differs from the manifest the instance presents to the KMS."""
        tee = self.new_tee(firmware=firmware, endorsed=endorsed)
        booted = measured or manifest
        tee.boot((os_image or self.os_image).manifest(booted.app_digest(), kms_identity(self.kms_auth)))
        inst = AppInstance(name, tee, manifest, app_id)
        self.instances[name] = inst
        return inst

    # -- client traffic ------------------------------------------------------

    def client_call(self, host: str, body: bytes):
        """Client -> gateway -> app and back, through the simulated network."""
        raw = self.network.send("client", "gateway", Request(host, body).to_bytes())
        return self.gateway.route(Request.from_bytes(raw))

    def app_endpoint(self, inst: AppInstance):
        def serve(body: bytes) -> bytes:
            delivered = self.network.send("gateway", inst.name, wire.encode("call", body))
            _, payload = wire.decode(delivered)
            return inst_handler(inst, payload, self.randbytes)
        return serve


def inst_handler(inst: AppInstance, body: bytes, randbytes) -> bytes:
    """The demo key-generation app: makes a keypair and proves it with a quote."""
    if body == b"keygen":
        key = KeyPair.generate(randbytes)
        inst.keypairs.append(key)
        quote = inst.tee.generate_quote(key.public)
        return wire.pack_fields(key.public, quote.to_bytes())
    if body == b"ping":
        return b"pong"
    return b"unknown request"
