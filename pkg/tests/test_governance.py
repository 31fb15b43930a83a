import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dstack_sim import crypto
from dstack_sim.crypto import KeyPair
from dstack_sim.errors import (
    BadSignatureError,
    DuplicateAppError,
    GenesisError,
    GovernanceError,
    RootAlreadySetError,
    UnauthorizedError,
    UnknownAppError,
    UnknownProposalError,
)
from dstack_sim.governance import (
    ALLOW_INSTANCE,
    AUTHORIZE,
    REVOKE,
    ROTATE_ROOT,
    AppManifest,
    ApprovalStatus,
    Event,
    GovernanceParams,
    KmsAuth,
    app_id_for,
    approval_message,
)

RNG = random.Random(11)
GOVERNORS = [KeyPair.generate(RNG.randbytes) for _ in range(3)]
SIGNERS = [KeyPair.generate(RNG.randbytes) for _ in range(3)]
OS = crypto.hash_data(b"os")
KMS_CODE = crypto.hash_data(b"kms")


def manifest(tag: str) -> AppManifest:
    return AppManifest(f"services: {tag}".encode(), (crypto.hash_data(tag.encode()),), b"")


def chain_with_app(threshold=2):
    auth = KmsAuth.genesis([g.public for g in GOVERNORS], 2, [OS], KMS_CODE)
    m = manifest("v1")
    app_id = auth.register_app(m, GovernanceParams(tuple(s.public for s in SIGNERS), threshold))
    return auth, app_id, m


def approve(auth, app_id, pid, signer, action, digest):
    return auth.approve_upgrade(app_id, pid, signer.public,
                                crypto.sign(signer, approval_message(app_id, action, digest)))


def test_genesis_validation():
    with pytest.raises(GenesisError):
        KmsAuth.genesis([], 1, [], KMS_CODE)
    with pytest.raises(GenesisError):
        KmsAuth.genesis([GOVERNORS[0].public] * 2, 1, [], KMS_CODE)
    with pytest.raises(GenesisError):
        KmsAuth.genesis([g.public for g in GOVERNORS], 4, [], KMS_CODE)
    with pytest.raises(GenesisError):
        KmsAuth.genesis([g.public for g in GOVERNORS], 0, [], KMS_CODE)


def test_registration_sets_initial_digest_and_stable_id():
    auth, app_id, m = chain_with_app()
    assert app_id == app_id_for(m)
    assert auth.is_code_authorized(app_id, m.app_digest())
    with pytest.raises(DuplicateAppError):
        auth.register_app(m, GovernanceParams((SIGNERS[0].public,), 1))
    with pytest.raises(UnknownAppError):
        auth.is_code_authorized(bytes(32), m.app_digest())


def test_upgrade_needs_threshold_approvals():
    auth, app_id, _ = chain_with_app()
    new = manifest("v2").app_digest()
    pid = auth.propose_upgrade(app_id, new, SIGNERS[0].public)
    assert approve(auth, app_id, pid, SIGNERS[0], AUTHORIZE, new) is ApprovalStatus.RECORDED
    assert not auth.is_code_authorized(app_id, new)
    assert approve(auth, app_id, pid, SIGNERS[1], AUTHORIZE, new) is ApprovalStatus.EXECUTED
    assert auth.is_code_authorized(app_id, new)
    kinds = [e.kind for e in auth.log][-3:]
    assert kinds == ["upgrade_approved", "upgrade_approved", "kms_auth_synced"]
    with pytest.raises(UnknownProposalError):
        approve(auth, app_id, pid, SIGNERS[2], AUTHORIZE, new)


def test_duplicate_approval_is_ignored_without_event():
    auth, app_id, _ = chain_with_app()
    new = manifest("v2").app_digest()
    pid = auth.propose_upgrade(app_id, new, SIGNERS[0].public)
    approve(auth, app_id, pid, SIGNERS[0], AUTHORIZE, new)
    height = len(auth.log)
    assert approve(auth, app_id, pid, SIGNERS[0], AUTHORIZE, new) is ApprovalStatus.DUPLICATE
    assert len(auth.log) == height
    assert not auth.is_code_authorized(app_id, new)


def test_signature_and_signer_checks():
    auth, app_id, _ = chain_with_app()
    new = manifest("v2").app_digest()
    pid = auth.propose_upgrade(app_id, new, SIGNERS[0].public)
    outsider = KeyPair.generate(RNG.randbytes)
    with pytest.raises(UnauthorizedError):
        approve(auth, app_id, pid, outsider, AUTHORIZE, new)
    with pytest.raises(UnauthorizedError):
        auth.propose_upgrade(app_id, new, outsider.public)
    # A signature over a different digest does not count.
    with pytest.raises(BadSignatureError):
        auth.approve_upgrade(app_id, pid, SIGNERS[1].public,
                             crypto.sign(SIGNERS[1], approval_message(app_id, AUTHORIZE, bytes(32))))
    # Nor does one made for a different action.
    with pytest.raises(BadSignatureError):
        auth.approve_upgrade(app_id, pid, SIGNERS[1].public,
                             crypto.sign(SIGNERS[1], approval_message(app_id, REVOKE, new)))


def test_revocation_and_instance_allowlist():
    auth, app_id, m = chain_with_app()
    old = m.app_digest()
    pid = auth.propose_revocation(app_id, old, SIGNERS[0].public)
    approve(auth, app_id, pid, SIGNERS[0], REVOKE, old)
    approve(auth, app_id, pid, SIGNERS[1], REVOKE, old)
    assert not auth.is_code_authorized(app_id, old)

    inst = crypto.hash_data(b"instance")
    assert auth.is_instance_authorized(app_id, inst)  # empty allowlist admits everyone
    pid = auth.propose(app_id, ALLOW_INSTANCE, inst, SIGNERS[2].public)
    approve(auth, app_id, pid, SIGNERS[2], ALLOW_INSTANCE, inst)
    approve(auth, app_id, pid, SIGNERS[0], ALLOW_INSTANCE, inst)
    assert auth.is_instance_authorized(app_id, inst)
    assert not auth.is_instance_authorized(app_id, crypto.hash_data(b"other"))


def test_governor_gated_operations():
    auth, _, _ = chain_with_app()
    digest = crypto.hash_data(b"os-2")
    approvals = auth.sign_governance(GOVERNORS[:1], "add-os-digest", {"digest": digest.hex()})
    with pytest.raises(UnauthorizedError):
        auth.add_os_digest(digest, approvals)
    approvals = auth.sign_governance(GOVERNORS[:2], "add-os-digest", {"digest": digest.hex()})
    auth.add_os_digest(digest, approvals)
    assert digest in auth.os_digests
    # The nonce moved on, so the same approvals cannot be replayed.
    with pytest.raises(UnauthorizedError):
        auth.remove_os_digest(digest, approvals)

    assert not auth.has_rotation_ticket(ROTATE_ROOT)
    auth.authorize_rotation(ROTATE_ROOT, auth.sign_governance(GOVERNORS[1:], "authorize-rotation",
                                                              {"rotation": ROTATE_ROOT}))
    assert auth.has_rotation_ticket(ROTATE_ROOT)
    auth.consume_rotation_ticket(ROTATE_ROOT, {})
    assert not auth.has_rotation_ticket(ROTATE_ROOT)
    with pytest.raises(UnauthorizedError):
        auth.consume_rotation_ticket(ROTATE_ROOT, {})


def test_root_records_are_sequenced():
    auth, _, _ = chain_with_app()
    auth.record_root(1, b"\x01" * 32)
    with pytest.raises(RootAlreadySetError):
        auth.record_root(1, b"\x02" * 32)
    with pytest.raises(GovernanceError):
        auth.record_root(3, b"\x03" * 32)
    auth.record_root(2, b"\x02" * 32)
    assert auth.root_public == b"\x02" * 32


def test_counters_start_at_zero_and_bump():
    auth, app_id, _ = chain_with_app()
    assert auth.counter_read(app_id, "db") == 0
    assert [auth.counter_bump(app_id, "db") for _ in range(3)] == [1, 2, 3]
    assert auth.counter_read(app_id, "other") == 0


def test_app_view_is_detached():
    auth, app_id, m = chain_with_app()
    view = auth.app(app_id)
    view.allowed_code_digests.add(bytes(32))
    assert not auth.is_code_authorized(app_id, bytes(32))


def test_event_json_roundtrip_and_chain():
    auth, _, _ = chain_with_app()
    for e in auth.log:
        assert Event.from_json(e.to_json()) == e
    assert auth.log[1].chain_digest != auth.log[0].chain_digest
    assert auth.address == KmsAuth.replay(list(auth.log)).address


_OPS = st.lists(st.tuples(st.sampled_from(["propose", "approve", "bump", "revoke"]),
                          st.integers(0, 2), st.integers(0, 3)), max_size=25)


@settings(max_examples=40, deadline=None)
@given(ops=_OPS)
def test_replay_reproduces_state_for_any_history(ops):
    auth, app_id, _ = chain_with_app()
    pending = []
    for op, who, tag in ops:
        digest = manifest(f"v{tag}").app_digest()
        try:
            if op == "propose":
                pending.append((auth.propose_upgrade(app_id, digest, SIGNERS[who].public), digest, AUTHORIZE))
            elif op == "revoke":
                pending.append((auth.propose_revocation(app_id, digest, SIGNERS[who].public), digest, REVOKE))
            elif op == "approve" and pending:
                pid, d, action = pending[tag % len(pending)]
                approve(auth, app_id, pid, SIGNERS[who], action, d)
            elif op == "bump":
                auth.counter_bump(app_id, f"c{tag}")
        except UnknownProposalError:
            pass
    replayed = KmsAuth.replay(list(auth.log))
    assert replayed.state_bytes() == auth.state_bytes()
    assert replayed.log.head == auth.log.head
