"""The off-chain KMS node network.

Two custody modes:

duplication
    The first node generates the root and copies it to every admitted node.
    Any single live node can serve derivations.

threshold(t, n)
    The first node generates the root and holds it only until the committee
    has n members; it then deals one Shamir share per member and erases the
    root. Nodes admitted later are enrolled by a quorum of t holders, each
    sending a masked Lagrange-weighted contribution so the newcomer learns
    only its own share. Derivation reconstructs the root inside a designated
    quorum leader for the duration of one request and then drops it; this is
    reconstruct-then-derive, not an MPC evaluation of HKDF.

Every root is two independent secrets under one epoch: the CA secret (app
CA, disk and env keys; its public half is the on-chain root key) and the
signing secret (per-app signing keys).
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Protocol

from . import certs, crypto, wire
from .certs import CertificateChain
from .clock import LogicalClock
from .crypto import Digest, KeyPair, KeyShare, RandBytes
from .errors import (
    AdmissionError,
    DeliveryError,
    EpochExpiredError,
    InstanceNotAuthorizedError,
    KeyReleaseDeniedError,
    KmsError,
    QuorumUnavailableError,
    RootAlreadySetError,
    RotationError,
    SpoofedQuoteError,
    UnknownAppError,
    UntrustedOSError,
)
from .governance import ROTATE_ROOT, ROTATE_SHARES, AppManifest, KmsAuth
from .tee_sim import (
    AttestationRoot,
    Quote,
    TeeInstance,
    VerifiedQuote,
    expected_rtmr3,
    os_digest,
    pad_report_data,
    verify_quote,
)

log = logging.getLogger(__name__)

DUPLICATION = "duplication"
THRESHOLD = "threshold"

APP = "app"
GATEWAY = "gateway"

# KMS-issued chains live as long as their epoch; a large fixed window keeps
# bundles a pure function of (epoch, app_id, instance_id).
KMS_CERT_LIFETIME = 2**40

# Order in which request_app_keys evaluates its preconditions.
GATE_ORDER = ("quote", "os", "code", "instance")


@dataclass(frozen=True)
class RootSecrets:
    ca_secret: bytes
    sign_secret: bytes

    @property
    def ca_key(self) -> KeyPair:
        return KeyPair.from_secret(self.ca_secret)

    @property
    def public(self) -> bytes:
        return self.ca_key.public

    def to_bytes(self) -> bytes:
        return self.ca_secret + self.sign_secret

    @classmethod
    def from_bytes(cls, data: bytes) -> "RootSecrets":
        if len(data) != 64:
            raise KmsError("root material must be 64 bytes")
        return cls(bytes(data[:32]), bytes(data[32:]))

    @classmethod
    def generate(cls, randbytes: RandBytes) -> "RootSecrets":
        return cls(randbytes(32), randbytes(32))

    def __repr__(self) -> str:
        return f"RootSecrets(public={self.public.hex()[:16]}...)"


@dataclass(frozen=True)
class Predecessor:
    epoch: int
    root_public: bytes
    handover_deadline: int


@dataclass(frozen=True)
class RootKeyState:
    epoch: int
    root_ca_secret: bytes
    root_sign_secret: bytes
    root_public: bytes
    created_at: int
    predecessor: Optional[Predecessor] = None

    def __repr__(self) -> str:
        return f"RootKeyState(epoch={self.epoch}, root_public={self.root_public.hex()[:16]}...)"


@dataclass(frozen=True)
class EpochInfo:
    epoch: int
    root_public: bytes
    created_at: int


@dataclass(frozen=True)
class AppKeyBundle:
    app_id: Digest
    instance_id: Digest
    epoch: int
    app_ca_secret: bytes
    disk_key: bytes
    env_key: bytes
    app_sign_key: KeyPair
    cert_chain: CertificateChain

    def to_bytes(self) -> bytes:
        return wire.pack_fields(
            self.app_id, self.instance_id, struct.pack(">I", self.epoch),
            self.app_ca_secret, self.disk_key, self.env_key, self.app_sign_key.secret,
            *(c.to_bytes() for c in self.cert_chain),
        )

    def __repr__(self) -> str:
        return (f"AppKeyBundle(app_id={self.app_id.hex()[:16]}, "
                f"instance_id={self.instance_id.hex()[:16]}, epoch={self.epoch})")


def node_report_data(node_public: bytes) -> bytes:
    return crypto.hash_concat(b"kms-node\x00", node_public)


def key_request_report_data(app_id: Digest, instance_id: Digest) -> bytes:
    return crypto.hash_concat(b"key-request\x00", app_id, instance_id)


def kms_identity(kms_auth: KmsAuth) -> Digest:
    """What an app extends into RTMR3 after its own digest to name its KMS."""
    return crypto.hash_concat(b"kms-identity\x00", kms_auth.address)


def _subject(kind: str, app_id: Digest) -> str:
    return f"{kind}/{app_id.hex()[:16]}"


def root_subject(epoch: int) -> str:
    return f"dstack-kms-root/epoch-{epoch}"


def issue_cert_chain(root: RootKeyState, app_id: Digest, subject_public: bytes,
                     kind: str = APP) -> CertificateChain:
    if kind not in (APP, GATEWAY):
        raise KmsError(f"unknown certificate kind {kind!r}")
    validity = (root.created_at, root.created_at + KMS_CERT_LIFETIME)
    root_key = KeyPair.from_secret(root.root_ca_secret)
    app_ca_key = KeyPair.from_secret(crypto.derive_key(root.root_ca_secret, "app-ca", app_id))
    rsub = root_subject(root.epoch)
    ca_sub = f"app-ca/{app_id.hex()[:16]}"
    root_cert = certs.issue(rsub, root_key.public, rsub, root_key,
                            epoch=root.epoch, validity=validity)
    ca_cert = certs.issue(ca_sub, app_ca_key.public, rsub, root_key,
                          epoch=root.epoch, validity=validity, app_id=app_id)
    leaf = certs.issue(_subject(kind, app_id), subject_public, ca_sub, app_ca_key,
                       epoch=root.epoch, validity=validity, app_id=app_id)
    return (leaf, ca_cert, root_cert)


def derive_bundle(root: RootKeyState, app_id: Digest, instance_id: Digest,
                  kind: str = APP) -> AppKeyBundle:
    """The derivation tree below one epoch's root; pure."""
    app_ca = crypto.derive_key(root.root_ca_secret, "app-ca", app_id)
    disk = crypto.derive_key(root.root_ca_secret, "disk", app_id + instance_id)
    env = crypto.derive_key(root.root_ca_secret, "env", app_id)
    sign_key = KeyPair.from_secret(crypto.derive_key(root.root_sign_secret, "ecdsa", app_id))
    chain = issue_cert_chain(root, app_id, sign_key.public, kind)
    return AppKeyBundle(app_id, instance_id, root.epoch, app_ca, disk, env, sign_key, chain)


class Transport(Protocol):
    def send(self, src: str, dst: str, envelope: bytes) -> bytes: ...


class DirectTransport:
    """Delivers every message immediately; the default when no network is simulated."""

    def send(self, src: str, dst: str, envelope: bytes) -> bytes:
        return envelope


class KmsNode:
    def __init__(self, name: str, tee: TeeInstance, node_key: KeyPair):
        self.name = name
        self.tee = tee
        self.node_key = node_key
        self.shares: dict[int, KeyShare] = {}
        self.root_cache: dict[int, RootSecrets] = {}
        self.online = True

    @property
    def measurement(self):
        return self.tee.measurements

    def attest(self) -> Quote:
        return self.tee.generate_quote(node_report_data(self.node_key.public))

    def erase_epoch(self, epoch: int) -> None:
        self.shares.pop(epoch, None)
        self.root_cache.pop(epoch, None)

    def __repr__(self) -> str:
        return f"KmsNode({self.name!r}, online={self.online}, epochs={sorted(self.shares or self.root_cache)})"


@dataclass
class _Handover:
    old_epoch: int
    deadline: int


@dataclass
class _Dealer:
    holder: str
    roots: dict[int, RootSecrets] = field(default_factory=dict)


class KmsCluster:
    """The node network plus the coordination a real deployment does over RA-TLS."""

    def __init__(self, kms_auth: KmsAuth, attestation_root: AttestationRoot,
                 clock: Optional[LogicalClock] = None, *, mode: str = DUPLICATION,
                 threshold: int = 1, committee_size: int = 1,
                 transport: Optional[Transport] = None, randbytes: RandBytes = os.urandom):
        if mode not in (DUPLICATION, THRESHOLD):
            raise KmsError(f"unknown custody mode {mode!r}")
        if mode == THRESHOLD and not 1 <= threshold <= committee_size <= 255:
            raise KmsError("threshold mode needs 1 <= t <= n <= 255")
        self.kms_auth = kms_auth
        self.attestation_root = attestation_root
        self.clock = clock or LogicalClock()
        self.mode = mode
        self.threshold = threshold
        self.committee_size = committee_size
        self.transport = transport or DirectTransport()
        self._rand = randbytes
        self.nodes: dict[str, KmsNode] = {}
        self.members: list[str] = []
        self.share_index: dict[str, int] = {}
        self.epochs: dict[int, EpochInfo] = {}
        self._handover: Optional[_Handover] = None
        self._dealer: Optional[_Dealer] = None

    # -- messaging -----------------------------------------------------------

    def _send(self, src: str, dst: str, kind: str, payload: bytes) -> bytes:
        for name in (src, dst):
            if not self.nodes[name].online:
                raise DeliveryError(f"node {name} is offline")
        delivered = self.transport.send(src, dst, wire.encode(kind, payload))
        got_kind, body = wire.decode(delivered)
        if got_kind != kind:
            raise DeliveryError(f"expected {kind} message, got {got_kind}")
        return body

    # -- epochs --------------------------------------------------------------

    @property
    def current_epoch(self) -> int:
        if not self.epochs:
            raise KmsError("KMS not bootstrapped")
        return max(self.epochs)

    def live_epochs(self) -> list[int]:
        self._expire_if_due()
        return sorted(self.epochs)

    def epoch_status(self) -> dict:
        self._expire_if_due()
        return {
            "current": self.current_epoch if self.epochs else None,
            "live": sorted(self.epochs),
            "handover_deadline": self._handover.deadline if self._handover else None,
            "now": self.clock.now,
        }

    @property
    def root_public(self) -> bytes:
        return self.epochs[self.current_epoch].root_public

    def _expire_if_due(self) -> None:
        h = self._handover
        if h is None or self.clock.now < h.deadline:
            return
        for node in self.nodes.values():
            node.erase_epoch(h.old_epoch)
        if self._dealer:
            self._dealer.roots.pop(h.old_epoch, None)
        del self.epochs[h.old_epoch]
        self._handover = None
        self.kms_auth.record_root_destroyed(h.old_epoch)
        log.info("epoch %d root destroyed at tick %d", h.old_epoch, self.clock.now)

    def _check_epoch(self, epoch: Optional[int]) -> int:
        self._expire_if_due()
        if epoch is None:
            return self.current_epoch
        if epoch not in self.epochs:
            if epoch in self.kms_auth.destroyed_epochs or 0 < epoch < self.current_epoch:
                raise EpochExpiredError(f"epoch {epoch} root has been destroyed")
            raise KmsError(f"unknown epoch {epoch}")
        return epoch

    # -- admission -----------------------------------------------------------

    def _verify_node_quote(self, node: KmsNode, quote: Quote) -> VerifiedQuote:
        vq = verify_quote(quote, self.attestation_root)
        if vq.report_data != pad_report_data(node_report_data(node.node_key.public)):
            raise SpoofedQuoteError("quote does not bind this node's key")
        if os_digest(vq.measurements) not in self.kms_auth.os_digests:
            raise AdmissionError("KMS node runs an unregistered OS build")
        if vq.measurements.rtmr[3] != expected_rtmr3(self.kms_auth.kms_node_digest):
            raise AdmissionError("KMS node code digest differs from KmsAuth record")
        return vq

    def bootstrap_first_node(self, node: KmsNode, quote: Optional[Quote] = None) -> RootKeyState:
        if self.epochs or self.kms_auth.root_publics:
            raise RootAlreadySetError("KMS root already established")
        quote = quote or node.attest()
        self._verify_node_quote(node, quote)
        secrets = RootSecrets.generate(self._rand)
        self.kms_auth.record_root(1, secrets.public, first_node_quote=quote.to_bytes())
        self.epochs[1] = EpochInfo(1, secrets.public, self.clock.now)
        self.nodes[node.name] = node
        self.members.append(node.name)
        if self.mode == DUPLICATION:
            node.root_cache[1] = secrets
        else:
            self._dealer = _Dealer(node.name, {1: secrets})
            self._maybe_deal()
        return self._root_state(1, secrets)

    def admit_node(self, candidate: KmsNode, quote: Optional[Quote] = None,
                   sponsor: Optional[str] = None) -> list[str]:
        """Admit ``candidate`` after verifying its quote; returns the membership."""
        self._expire_if_due()
        if not self.epochs:
            raise AdmissionError("bootstrap the first node before admitting others")
        if candidate.name in self.nodes:
            raise AdmissionError(f"node {candidate.name} already admitted")
        quote = quote or candidate.attest()
        self._verify_node_quote(candidate, quote)
        if candidate.node_key.public not in self.kms_auth.registered_kms_nodes:
            raise AdmissionError("candidate is not registered in KmsAuth")
        self.nodes[candidate.name] = candidate
        try:
            if self.mode == DUPLICATION:
                self._admit_duplicate(candidate, sponsor)
            elif self._dealer is not None:
                self.members.append(candidate.name)
                self._maybe_deal()
                return list(self.members)
            else:
                self._enroll(candidate)
        except Exception:
            del self.nodes[candidate.name]
            candidate.shares.clear()
            candidate.root_cache.clear()
            raise
        self.members.append(candidate.name)
        return list(self.members)

    def _admit_duplicate(self, candidate: KmsNode, sponsor: Optional[str]) -> None:
        sponsor = sponsor or self._first_online(lambda n: bool(n.root_cache))
        src = self.nodes[sponsor]
        for epoch in sorted(self.epochs):
            body = self._send(sponsor, candidate.name, "root-copy",
                              struct.pack(">I", epoch) + src.root_cache[epoch].to_bytes())
            candidate.root_cache[struct.unpack(">I", body[:4])[0]] = RootSecrets.from_bytes(body[4:])

    def _maybe_deal(self) -> None:
        dealer = self._dealer
        if dealer is None or len(self.members) < self.committee_size:
            return
        indices = {name: i + 1 for i, name in enumerate(self.members)}
        staged: dict[str, dict[int, KeyShare]] = {name: {} for name in self.members}
        for epoch, secrets in dealer.roots.items():
            shares = crypto.shamir_split(secrets.to_bytes(), self.threshold,
                                         self.committee_size, self._rand)
            for name, idx in indices.items():
                body = self._send(dealer.holder, name, "share",
                                  struct.pack(">I", epoch) + shares[idx - 1].to_bytes())
                staged[name][epoch] = KeyShare.from_bytes(body[4:])
        for name, held in staged.items():
            self.nodes[name].shares.update(held)
        self.share_index = indices
        self._dealer = None
        log.info("committee of %d sealed; dealer root erased", self.committee_size)

    def _quorum(self, epoch: int, exclude: tuple[str, ...] = ()) -> list[KmsNode]:
        holders = [self.nodes[n] for n in self.members
                   if n not in exclude and self.nodes[n].online and epoch in self.nodes[n].shares]
        if len(holders) < self.threshold:
            raise QuorumUnavailableError(
                f"epoch {epoch}: {len(holders)} share holders online, need {self.threshold}")
        return holders[: self.threshold]

    def _enroll(self, candidate: KmsNode) -> None:
        new_index = max(self.share_index.values()) + 1
        if new_index > 255:
            raise AdmissionError("share index space exhausted")
        for epoch in sorted(self.epochs):
            quorum = self._quorum(epoch)
            contributions = crypto.enrollment_contributions(
                [n.shares[epoch] for n in quorum], new_index, self._rand)
            received = [self._send(n.name, candidate.name, "enroll", c)
                        for n, c in zip(quorum, contributions)]
            candidate.shares[epoch] = KeyShare(new_index, crypto.combine_contributions(received))
        self.share_index[candidate.name] = new_index

    # -- root material -------------------------------------------------------

    def _first_online(self, predicate) -> str:
        for name in self.members:
            node = self.nodes[name]
            if node.online and predicate(node):
                return name
        raise QuorumUnavailableError("no online node holds the root")

    def _root_state(self, epoch: int, secrets: RootSecrets) -> RootKeyState:
        pred = None
        h = self._handover
        if h is not None and epoch != h.old_epoch:
            pred = Predecessor(h.old_epoch, self.epochs[h.old_epoch].root_public, h.deadline)
        return RootKeyState(epoch, secrets.ca_secret, secrets.sign_secret, secrets.public,
                            self.epochs[epoch].created_at, pred)

    def _materialize(self, epoch: int) -> RootSecrets:
        """Root secrets for one request. Callers must not retain the result."""
        if self.mode == DUPLICATION:
            name = self._first_online(lambda n: epoch in n.root_cache)
            return self.nodes[name].root_cache[epoch]
        if self._dealer is not None:
            if not self.nodes[self._dealer.holder].online:
                raise QuorumUnavailableError("dealer node offline before committee sealed")
            return self._dealer.roots[epoch]
        quorum = self._quorum(epoch)
        leader = quorum[0]
        shares = [leader.shares[epoch]]
        for node in quorum[1:]:
            body = self._send(node.name, leader.name, "share-for-derivation",
                              node.shares[epoch].to_bytes())
            shares.append(KeyShare.from_bytes(body))
        secrets = RootSecrets.from_bytes(crypto.shamir_reconstruct(shares, self.threshold))
        if secrets.public != self.epochs[epoch].root_public:
            raise KmsError(f"epoch {epoch}: reconstructed root does not match on-chain key")
        return secrets

    # -- key release ---------------------------------------------------------

    def request_app_keys(self, quote: Quote, manifest: AppManifest, app_id: Digest,
                         instance_id: Digest, *, epoch: Optional[int] = None,
                         kind: str = APP) -> AppKeyBundle:
        """Release an app's key bundle after the four gates, in GATE_ORDER."""
        # quote
        vq = verify_quote(quote, self.attestation_root)
        if vq.instance_id != instance_id:
            raise SpoofedQuoteError("instance_id does not belong to the quoting TEE")
        if vq.report_data != pad_report_data(key_request_report_data(app_id, instance_id)):
            raise SpoofedQuoteError("quote was not produced for this key request")
        # os
        if os_digest(vq.measurements) not in self.kms_auth.os_digests:
            raise UntrustedOSError("OS measurement is not an authorized dstack-OS build")
        # code
        digest = manifest.app_digest()
        try:
            authorized = self.kms_auth.is_code_authorized(app_id, digest)
        except UnknownAppError:
            raise KeyReleaseDeniedError("app is not registered") from None
        if not authorized:
            raise KeyReleaseDeniedError("code digest not authorized by governance")
        if vq.measurements.rtmr[3] != expected_rtmr3(digest, kms_identity(self.kms_auth)):
            raise KeyReleaseDeniedError("RTMR3 does not match the presented manifest")
        # instance
        if not self.kms_auth.is_instance_authorized(app_id, instance_id):
            raise InstanceNotAuthorizedError("instance not in the AppAuth allowlist")
        epoch = self._check_epoch(epoch)
        secrets = self._materialize(epoch)
        return derive_bundle(self._root_state(epoch, secrets), app_id, instance_id, kind)

    # -- rotation ------------------------------------------------------------

    def rotate_shares(self) -> dict[str, int]:
        """Proactive refresh of every live epoch's shares; the roots stay put."""
        self._expire_if_due()
        if self.mode != THRESHOLD:
            raise RotationError("share rotation needs threshold mode")
        if self._dealer is not None:
            raise RotationError("committee not sealed yet")
        if not self.kms_auth.has_rotation_ticket(ROTATE_SHARES):
            raise RotationError("share rotation was not initiated through governance")
        holders = [self.nodes[n] for n in self.members]
        offline = [n.name for n in holders if not n.online]
        if offline:
            raise QuorumUnavailableError(f"rotation needs every share holder; offline: {offline}")
        staged: dict[str, dict[int, KeyShare]] = {n.name: {} for n in holders}
        for epoch in sorted(self.epochs):
            indices = [n.shares[epoch].index for n in holders]
            length = len(holders[0].shares[epoch].payload)
            totals = {n.name: bytes(length) for n in holders}
            for sender in holders:
                deltas = crypto.zero_sharing(indices, self.threshold, length, self._rand)
                for receiver in holders:
                    body = self._send(sender.name, receiver.name, "refresh-delta",
                                      deltas[receiver.shares[epoch].index])
                    totals[receiver.name] = crypto.combine_contributions([totals[receiver.name], body])
            for n in holders:
                old = n.shares[epoch]
                staged[n.name][epoch] = crypto.apply_deltas([old], {old.index: totals[n.name]})[0]
        for n in holders:
            n.shares.update(staged[n.name])
        self.kms_auth.consume_rotation_ticket(ROTATE_SHARES, {"epochs": sorted(self.epochs)})
        return {n.name: n.shares[self.current_epoch].index for n in holders}

    def rotate_root(self, handover_len: int) -> RootKeyState:
        """Start a new epoch; the old one stays usable for ``handover_len`` ticks."""
        self._expire_if_due()
        if handover_len < 1:
            raise RotationError("handover window must be at least one tick")
        if self._handover is not None:
            raise RotationError("a handover is already in progress")
        if self.mode == THRESHOLD and self._dealer is not None:
            raise RotationError("committee not sealed yet")
        if not self.kms_auth.has_rotation_ticket(ROTATE_ROOT):
            raise RotationError("root rotation was not initiated through governance")
        offline = [n for n in self.members if not self.nodes[n].online]
        if offline:
            raise QuorumUnavailableError(f"rotation needs every member; offline: {offline}")
        old_epoch = self.current_epoch
        new_epoch = old_epoch + 1
        secrets = RootSecrets.generate(self._rand)
        leader = self.members[0]
        staged: dict[str, object] = {}
        if self.mode == DUPLICATION:
            for name in self.members:
                body = self._send(leader, name, "root-copy", secrets.to_bytes())
                staged[name] = RootSecrets.from_bytes(body)
        else:
            top = max(self.share_index[n] for n in self.members)
            shares = crypto.shamir_split(secrets.to_bytes(), self.threshold, top, self._rand)
            by_index = {s.index: s for s in shares}
            for name in self.members:
                body = self._send(leader, name, "share", by_index[self.share_index[name]].to_bytes())
                staged[name] = KeyShare.from_bytes(body)
        self.kms_auth.consume_rotation_ticket(ROTATE_ROOT, {"new_epoch": new_epoch})
        self.kms_auth.record_root(new_epoch, secrets.public)
        for name, material in staged.items():
            node = self.nodes[name]
            if isinstance(material, RootSecrets):
                node.root_cache[new_epoch] = material
            else:
                node.shares[new_epoch] = material
        self.epochs[new_epoch] = EpochInfo(new_epoch, secrets.public, self.clock.now)
        self._handover = _Handover(old_epoch, self.clock.now + handover_len)
        return self._root_state(new_epoch, secrets)

    def kill_node(self, name: str) -> None:
        self.nodes[name].online = False

    def revive_node(self, name: str) -> None:
        self.nodes[name].online = True


def verify_bundle_chain(bundle: AppKeyBundle, root_public: bytes) -> None:
    certs.verify_chain(bundle.cert_chain, root_public)
