"""In-process "on-chain" governance: the KmsAuth registry and per-app AppAuth.

The contract machine is event-sourced. Every mutating call validates its
inputs, then emits exactly one event; state changes happen only inside
``_apply``. Replaying the event log through ``_apply`` on an empty instance
therefore reproduces the live state, which ``KmsAuth.replay`` relies on.

Log entries are hash-chained (each entry commits to its predecessor), so an
edited or reordered entry is detected at its own index.
"""

from __future__ import annotations

import copy
import enum
import json
import struct
import threading
from dataclasses import dataclass, field
from functools import wraps
from typing import Iterable, Optional, Sequence

from . import crypto
from .crypto import ZERO_DIGEST, Digest, KeyPair
from .errors import (
    BadSignatureError,
    DuplicateAppError,
    GenesisError,
    GovernanceError,
    ParameterError,
    RootAlreadySetError,
    UnauthorizedError,
    UnknownAppError,
    UnknownProposalError,
)

AUTHORIZE = "authorize-code"
REVOKE = "revoke-code"
ALLOW_INSTANCE = "allow-instance"
ACTIONS = (AUTHORIZE, REVOKE, ALLOW_INSTANCE)

ROTATE_SHARES = "rotate-shares"
ROTATE_ROOT = "rotate-root"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class AppManifest:
    compose_text: bytes
    image_digests: tuple[Digest, ...]
    config: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "image_digests", tuple(self.image_digests))
        if not self.image_digests:
            raise ParameterError("an app manifest needs at least one image")
        if any(len(d) != 32 for d in self.image_digests):
            raise ParameterError("image digests must be 32 bytes")

    def app_digest(self) -> Digest:
        return crypto.hash_data(self.compose_text + b"".join(self.image_digests) + self.config)


def app_id_for(manifest: AppManifest) -> Digest:
    """Stable identity fixed at registration; upgrades do not change it."""
    return crypto.hash_concat(b"dstack-app-id\x00", manifest.app_digest())


def approval_message(app_id: Digest, action: str, digest: Digest) -> bytes:
    # Code upgrades sign exactly app_id || new_code_digest; other actions are
    # prefixed so a signature can never be replayed across action types.
    if action == AUTHORIZE:
        return app_id + digest
    return action.encode() + b"\x00" + app_id + digest


def governance_message(action: str, payload: dict, nonce: int) -> bytes:
    return b"kmsauth\x00" + action.encode() + b"\x00" + canonical_json(payload) + struct.pack(">Q", nonce)


@dataclass(frozen=True)
class GovernanceParams:
    signers: tuple[bytes, ...]
    approval_threshold: int
    allowed_instances: tuple[Digest, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "signers", tuple(self.signers))
        object.__setattr__(self, "allowed_instances", tuple(self.allowed_instances))


@dataclass
class UpgradeProposal:
    proposal_id: Digest
    action: str
    new_code_digest: Digest
    proposer: bytes
    created_at: int
    approvals: dict[bytes, bytes] = field(default_factory=dict)


@dataclass
class AppAuthState:
    app_id: Digest
    allowed_code_digests: set[Digest]
    authorized_instance_ids: set[Digest]
    signers: frozenset[bytes]
    approval_threshold: int
    pending: dict[Digest, UpgradeProposal] = field(default_factory=dict)
    proposal_seq: int = 0


class ApprovalStatus(enum.Enum):
    RECORDED = "recorded"
    EXECUTED = "executed"
    DUPLICATE = "duplicate-ignored"


@dataclass(frozen=True)
class Event:
    seq: int
    time: int
    kind: str
    payload: dict
    payload_digest: Digest
    chain_digest: Digest

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "time": self.time,
            "kind": self.kind,
            "payload": self.payload,
            "payload_digest": self.payload_digest.hex(),
            "chain_digest": self.chain_digest.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Event":
        return cls(
            seq=obj["seq"], time=obj["time"], kind=obj["kind"], payload=obj["payload"],
            payload_digest=bytes.fromhex(obj["payload_digest"]),
            chain_digest=bytes.fromhex(obj["chain_digest"]),
        )


def chain_link(prev: Digest, seq: int, time: int, kind: str, payload: dict) -> tuple[Digest, Digest]:
    payload_digest = crypto.hash_data(canonical_json(payload))
    header = canonical_json({"seq": seq, "time": time, "kind": kind})
    return payload_digest, crypto.hash_concat(prev, header, payload_digest)


class EventLog:
    """Append-only, hash-chained list of events."""

    def __init__(self):
        self._entries: list[Event] = []

    def append(self, kind: str, payload: dict) -> Event:
        seq = len(self._entries)
        time = seq + 1
        prev = self._entries[-1].chain_digest if self._entries else ZERO_DIGEST
        payload_digest, link = chain_link(prev, seq, time, kind, payload)
        event = Event(seq, time, kind, copy.deepcopy(payload), payload_digest, link)
        self._entries.append(event)
        return event

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i):
        return self._entries[i]

    @property
    def head(self) -> Digest:
        return self._entries[-1].chain_digest if self._entries else ZERO_DIGEST


def _transaction(method):
    @wraps(method)
    def run(self, *args, **kwargs):
        with self._lock:
            return method(self, *args, **kwargs)
    return run


def _hex(values: Iterable[bytes]) -> list[str]:
    return sorted(v.hex() for v in values)


def _unhex(values: Iterable[str]) -> list[bytes]:
    return [bytes.fromhex(v) for v in values]


class KmsAuth:
    """Global registry: OS builds, KMS nodes and roots, apps, counters."""

    def __init__(self):
        self._lock = threading.RLock()
        self.log = EventLog()
        self.governors: frozenset[bytes] = frozenset()
        self.governance_threshold = 0
        self.governance_nonce = 0
        self.os_digests: set[Digest] = set()
        self.kms_node_digest: Digest = ZERO_DIGEST
        self.first_node_quote: Optional[bytes] = None
        self.registered_kms_nodes: set[bytes] = set()
        self.root_publics: dict[int, bytes] = {}
        self.destroyed_epochs: set[int] = set()
        self.rotation_tickets: dict[str, int] = {}
        self._apps: dict[Digest, AppAuthState] = {}
        self.app_code_view: dict[Digest, frozenset[Digest]] = {}
        self.counter_registry: dict[tuple[Digest, str], int] = {}

    # -- construction --------------------------------------------------------

    @classmethod
    def genesis(cls, governors: Sequence[bytes], threshold: int,
                os_digests: Iterable[Digest], kms_node_digest: Digest) -> "KmsAuth":
        governors = list(governors)
        if not governors or len(set(governors)) != len(governors):
            raise GenesisError("governor set must be non-empty and distinct")
        if not 1 <= threshold <= len(governors):
            raise GenesisError(f"governance threshold {threshold} invalid for {len(governors)} governors")
        if len(kms_node_digest) != 32:
            raise GenesisError("kms node digest must be 32 bytes")
        chain = cls()
        chain._emit("genesis", {
            "governors": _hex(governors),
            "threshold": threshold,
            "os_digests": _hex(os_digests),
            "kms_node_digest": kms_node_digest.hex(),
        })
        return chain

    @classmethod
    def replay(cls, events: Iterable[Event]) -> "KmsAuth":
        chain = cls()
        for event in events:
            chain._emit(event.kind, event.payload)
        return chain

    # -- event sourcing ------------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> Event:
        event = self.log.append(kind, payload)
        self._apply(kind, payload, event.time)
        return event

    def _apply(self, kind: str, p: dict, time: int) -> None:
        if kind == "genesis":
            self.governors = frozenset(_unhex(p["governors"]))
            self.governance_threshold = p["threshold"]
            self.os_digests = set(_unhex(p["os_digests"]))
            self.kms_node_digest = bytes.fromhex(p["kms_node_digest"])
        elif kind == "os_digest_added":
            self.os_digests.add(bytes.fromhex(p["digest"]))
            self.governance_nonce += 1
        elif kind == "os_digest_removed":
            self.os_digests.discard(bytes.fromhex(p["digest"]))
            self.governance_nonce += 1
        elif kind == "kms_node_digest_set":
            self.kms_node_digest = bytes.fromhex(p["digest"])
            self.governance_nonce += 1
        elif kind == "kms_node_registered":
            self.registered_kms_nodes.add(bytes.fromhex(p["node"]))
            self.governance_nonce += 1
        elif kind == "rotation_authorized":
            self.rotation_tickets[p["rotation"]] = self.rotation_tickets.get(p["rotation"], 0) + 1
            self.governance_nonce += 1
        elif kind == "rotation_executed":
            self.rotation_tickets[p["rotation"]] -= 1
            if not self.rotation_tickets[p["rotation"]]:
                del self.rotation_tickets[p["rotation"]]
        elif kind == "kms_root_set":
            self.root_publics[p["epoch"]] = bytes.fromhex(p["root_public"])
            if p.get("first_node_quote"):
                self.first_node_quote = bytes.fromhex(p["first_node_quote"])
        elif kind == "kms_root_destroyed":
            self.destroyed_epochs.add(p["epoch"])
        elif kind == "app_registered":
            app_id = bytes.fromhex(p["app_id"])
            digest = bytes.fromhex(p["app_digest"])
            self._apps[app_id] = AppAuthState(
                app_id=app_id,
                allowed_code_digests={digest},
                authorized_instance_ids=set(_unhex(p["allowed_instances"])),
                signers=frozenset(_unhex(p["signers"])),
                approval_threshold=p["threshold"],
            )
            self.app_code_view[app_id] = frozenset({digest})
        elif kind == "upgrade_proposed":
            app = self._apps[bytes.fromhex(p["app_id"])]
            pid = bytes.fromhex(p["proposal_id"])
            app.pending[pid] = UpgradeProposal(
                proposal_id=pid, action=p["action"], new_code_digest=bytes.fromhex(p["digest"]),
                proposer=bytes.fromhex(p["proposer"]), created_at=time,
            )
            app.proposal_seq += 1
        elif kind == "upgrade_approved":
            app = self._apps[bytes.fromhex(p["app_id"])]
            pid = bytes.fromhex(p["proposal_id"])
            proposal = app.pending[pid]
            proposal.approvals[bytes.fromhex(p["signer"])] = bytes.fromhex(p["signature"])
            if p["executed"]:
                del app.pending[pid]
                if proposal.action == AUTHORIZE:
                    app.allowed_code_digests.add(proposal.new_code_digest)
                elif proposal.action == REVOKE:
                    app.allowed_code_digests.discard(proposal.new_code_digest)
                else:
                    app.authorized_instance_ids.add(proposal.new_code_digest)
        elif kind == "kms_auth_synced":
            self.app_code_view[bytes.fromhex(p["app_id"])] = frozenset(_unhex(p["allowed"]))
        elif kind == "counter_bumped":
            self.counter_registry[(bytes.fromhex(p["app_id"]), p["name"])] = p["value"]
        else:
            raise GovernanceError(f"unknown event kind {kind!r}")

    # -- governor-gated operations --------------------------------------------

    def _check_governors(self, action: str, payload: dict, approvals) -> list[dict]:
        message = governance_message(action, payload, self.governance_nonce)
        valid = {}
        for public, signature in approvals:
            if public in self.governors and crypto.verify(public, message, signature):
                valid[public] = signature
        if len(valid) < self.governance_threshold:
            raise UnauthorizedError(
                f"{action}: {len(valid)} valid governor approvals, need {self.governance_threshold}")
        return [{"governor": k.hex(), "signature": v.hex()} for k, v in sorted(valid.items())]

    def sign_governance(self, keys: Iterable[KeyPair], action: str, payload: dict) -> list[tuple[bytes, bytes]]:
        """Convenience for tests and the harness: approvals for the next governed call."""
        message = governance_message(action, payload, self.governance_nonce)
        return [(k.public, crypto.sign(k, message)) for k in keys]

    @_transaction
    def add_os_digest(self, digest: Digest, approvals) -> None:
        payload = {"digest": digest.hex()}
        recorded = self._check_governors("add-os-digest", payload, approvals)
        self._emit("os_digest_added", {**payload, "approvals": recorded})

    @_transaction
    def remove_os_digest(self, digest: Digest, approvals) -> None:
        payload = {"digest": digest.hex()}
        recorded = self._check_governors("remove-os-digest", payload, approvals)
        self._emit("os_digest_removed", {**payload, "approvals": recorded})

    @_transaction
    def set_kms_node_digest(self, digest: Digest, approvals) -> None:
        payload = {"digest": digest.hex()}
        recorded = self._check_governors("set-kms-node-digest", payload, approvals)
        self._emit("kms_node_digest_set", {**payload, "approvals": recorded})

    @_transaction
    def register_kms_node(self, node_public: bytes, approvals) -> None:
        payload = {"node": node_public.hex()}
        recorded = self._check_governors("register-kms-node", payload, approvals)
        self._emit("kms_node_registered", {**payload, "approvals": recorded})

    @_transaction
    def authorize_rotation(self, rotation: str, approvals) -> None:
        if rotation not in (ROTATE_SHARES, ROTATE_ROOT):
            raise ParameterError(f"unknown rotation kind {rotation!r}")
        payload = {"rotation": rotation}
        recorded = self._check_governors("authorize-rotation", payload, approvals)
        self._emit("rotation_authorized", {**payload, "approvals": recorded})

    def has_rotation_ticket(self, rotation: str) -> bool:
        return self.rotation_tickets.get(rotation, 0) > 0

    @_transaction
    def consume_rotation_ticket(self, rotation: str, detail: dict) -> None:
        if not self.has_rotation_ticket(rotation):
            raise UnauthorizedError(f"{rotation} was not authorized through governance")
        self._emit("rotation_executed", {"rotation": rotation, **detail})

    # -- KMS root records ----------------------------------------------------

    @_transaction
    def record_root(self, epoch: int, root_public: bytes, first_node_quote: Optional[bytes] = None) -> None:
        if epoch in self.root_publics:
            raise RootAlreadySetError(f"root for epoch {epoch} already recorded")
        if epoch != (max(self.root_publics) + 1 if self.root_publics else 1):
            raise GovernanceError(f"epoch {epoch} out of sequence")
        payload = {"epoch": epoch, "root_public": root_public.hex()}
        if first_node_quote is not None:
            payload["first_node_quote"] = first_node_quote.hex()
        self._emit("kms_root_set", payload)

    @_transaction
    def record_root_destroyed(self, epoch: int) -> None:
        self._emit("kms_root_destroyed", {"epoch": epoch})

    @property
    def address(self) -> Digest:
        """Stable contract identity, fixed by the genesis entry."""
        if not len(self.log):
            raise GovernanceError("no genesis")
        return crypto.hash_concat(b"kmsauth-address\x00", self.log[0].chain_digest)

    @property
    def root_public(self) -> Optional[bytes]:
        return self.root_publics[max(self.root_publics)] if self.root_publics else None

    # -- applications --------------------------------------------------------

    @_transaction
    def register_app(self, manifest: AppManifest, params: GovernanceParams) -> Digest:
        app_id = app_id_for(manifest)
        if app_id in self._apps:
            raise DuplicateAppError(f"app {app_id.hex()[:16]} already registered")
        signers = set(params.signers)
        if not 1 <= params.approval_threshold <= len(signers):
            raise GovernanceError("approval threshold must be in 1..|signers|")
        self._emit("app_registered", {
            "app_id": app_id.hex(),
            "app_digest": manifest.app_digest().hex(),
            "signers": _hex(signers),
            "threshold": params.approval_threshold,
            "allowed_instances": _hex(params.allowed_instances),
        })
        return app_id

    def _app(self, app_id: Digest) -> AppAuthState:
        try:
            return self._apps[app_id]
        except KeyError:
            raise UnknownAppError(f"unknown app {app_id.hex()[:16]}") from None

    def app(self, app_id: Digest) -> AppAuthState:
        """A detached copy of the app's AppAuth state."""
        return copy.deepcopy(self._app(app_id))

    def app_ids(self) -> list[Digest]:
        return sorted(self._apps)

    @_transaction
    def propose(self, app_id: Digest, action: str, digest: Digest, proposer: bytes) -> Digest:
        app = self._app(app_id)
        if action not in ACTIONS:
            raise ParameterError(f"unknown proposal action {action!r}")
        if proposer not in app.signers:
            raise UnauthorizedError("proposer is not an AppAuth signer")
        if len(digest) != 32:
            raise ParameterError("proposal digest must be 32 bytes")
        pid = crypto.hash_concat(b"proposal\x00", app_id, action.encode(), digest,
                                 struct.pack(">Q", app.proposal_seq))
        self._emit("upgrade_proposed", {
            "app_id": app_id.hex(), "proposal_id": pid.hex(), "action": action,
            "digest": digest.hex(), "proposer": proposer.hex(),
        })
        return pid

    def propose_upgrade(self, app_id: Digest, new_code_digest: Digest, proposer: bytes) -> Digest:
        return self.propose(app_id, AUTHORIZE, new_code_digest, proposer)

    def propose_revocation(self, app_id: Digest, code_digest: Digest, proposer: bytes) -> Digest:
        return self.propose(app_id, REVOKE, code_digest, proposer)

    @_transaction
    def approve_upgrade(self, app_id: Digest, proposal_id: Digest, signer: bytes,
                        signature: bytes) -> ApprovalStatus:
        app = self._app(app_id)
        proposal = app.pending.get(proposal_id)
        if proposal is None:
            raise UnknownProposalError(f"no pending proposal {proposal_id.hex()[:16]}")
        if signer not in app.signers:
            raise UnauthorizedError("approver is not an AppAuth signer")
        message = approval_message(app_id, proposal.action, proposal.new_code_digest)
        if not crypto.verify(signer, message, signature):
            raise BadSignatureError("approval signature does not cover this proposal")
        if signer in proposal.approvals:
            return ApprovalStatus.DUPLICATE
        executed = len(proposal.approvals) + 1 >= app.approval_threshold
        self._emit("upgrade_approved", {
            "app_id": app_id.hex(), "proposal_id": proposal_id.hex(),
            "signer": signer.hex(), "signature": signature.hex(), "executed": executed,
        })
        if executed and proposal.action in (AUTHORIZE, REVOKE):
            # KmsAuth follows AppAuth synchronously, inside the same transaction.
            self._emit("kms_auth_synced", {
                "app_id": app_id.hex(),
                "allowed": _hex(self._apps[app_id].allowed_code_digests),
            })
        return ApprovalStatus.EXECUTED if executed else ApprovalStatus.RECORDED

    def is_code_authorized(self, app_id: Digest, code_digest: Digest) -> bool:
        self._app(app_id)
        return code_digest in self.app_code_view.get(app_id, frozenset())

    def is_instance_authorized(self, app_id: Digest, instance_id: Digest) -> bool:
        allowed = self._app(app_id).authorized_instance_ids
        return not allowed or instance_id in allowed

    # -- monotonic counters --------------------------------------------------

    @_transaction
    def counter_bump(self, app_id: Digest, name: str) -> int:
        self._app(app_id)
        value = self.counter_registry.get((app_id, name), 0) + 1
        self._emit("counter_bumped", {"app_id": app_id.hex(), "name": name, "value": value})
        return value

    def counter_read(self, app_id: Digest, name: str) -> int:
        self._app(app_id)
        return self.counter_registry.get((app_id, name), 0)

    # -- snapshots -----------------------------------------------------------

    def snapshot(self) -> dict:
        apps = {}
        for app_id, a in sorted(self._apps.items()):
            apps[app_id.hex()] = {
                "allowed_code_digests": _hex(a.allowed_code_digests),
                "authorized_instance_ids": _hex(a.authorized_instance_ids),
                "signers": _hex(a.signers),
                "approval_threshold": a.approval_threshold,
                "proposal_seq": a.proposal_seq,
                "pending": {
                    pid.hex(): {
                        "action": pr.action,
                        "digest": pr.new_code_digest.hex(),
                        "proposer": pr.proposer.hex(),
                        "created_at": pr.created_at,
                        "approvals": {k.hex(): v.hex() for k, v in sorted(pr.approvals.items())},
                    }
                    for pid, pr in sorted(a.pending.items())
                },
            }
        return {
            "governors": _hex(self.governors),
            "governance_threshold": self.governance_threshold,
            "governance_nonce": self.governance_nonce,
            "os_digests": _hex(self.os_digests),
            "kms_node_digest": self.kms_node_digest.hex(),
            "first_node_quote": self.first_node_quote.hex() if self.first_node_quote else None,
            "registered_kms_nodes": _hex(self.registered_kms_nodes),
            "root_publics": {str(e): k.hex() for e, k in sorted(self.root_publics.items())},
            "destroyed_epochs": sorted(self.destroyed_epochs),
            "rotation_tickets": dict(sorted(self.rotation_tickets.items())),
            "apps": apps,
            "app_code_view": {k.hex(): _hex(v) for k, v in sorted(self.app_code_view.items())},
            "counters": {f"{a.hex()}/{n}": v for (a, n), v in sorted(self.counter_registry.items())},
            "height": len(self.log),
            "head": self.log.head.hex(),
        }

    def state_bytes(self) -> bytes:
        return canonical_json(self.snapshot())

    def state_digest(self) -> Digest:
        return crypto.hash_data(self.state_bytes())

    def export_lines(self) -> list[str]:
        """Line-delimited JSON: one event per line, then a head checkpoint."""
        lines = [json.dumps(e.to_json(), sort_keys=True) for e in self.log]
        lines.append(json.dumps({"checkpoint": {
            "height": len(self.log),
            "head": self.log.head.hex(),
            "state_digest": self.state_digest().hex(),
        }}, sort_keys=True))
        return lines
