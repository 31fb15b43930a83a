import pytest

import oracles
from dstack_sim import crypto
from dstack_sim.errors import (
    AdmissionError,
    DeliveryError,
    EpochExpiredError,
    QuorumUnavailableError,
    RootAlreadySetError,
    RotationError,
    SpoofedQuoteError,
)
from dstack_sim.governance import ROTATE_ROOT, ROTATE_SHARES
from dstack_sim.kms import DUPLICATION, GATEWAY, derive_bundle, verify_bundle_chain
from dstack_sim.system import GenesisConfig
from dstack_sim.walkthrough import run_walkthrough


def _deploy(**cfg):
    keep = {}
    assert run_walkthrough(42, config=GenesisConfig(**cfg), keep=keep)["ok"]
    return keep["run"]


def test_threshold_committee_holds_only_shares(deployed):
    cluster = deployed.system.cluster
    assert cluster.mode == "threshold" and cluster._dealer is None
    for name in cluster.members:
        node = cluster.nodes[name]
        assert not node.root_cache
        assert set(node.shares) == {1}
    assert sorted(cluster.share_index.values()) == [1, 2, 3]


def test_derivation_matches_hkdf_oracle(deployed):
    s, app = deployed.system, deployed.app
    secrets = s.cluster._materialize(1)
    bundle = app.bundle
    assert bundle.disk_key == oracles.hkdf_sha256(secrets.ca_secret, b"disk\x00" + app.app_id + app.instance_id)
    assert bundle.env_key == oracles.hkdf_sha256(secrets.ca_secret, b"env\x00" + app.app_id)
    assert bundle.app_ca_secret == oracles.hkdf_sha256(secrets.ca_secret, b"app-ca\x00" + app.app_id)
    sign_secret = oracles.hkdf_sha256(secrets.sign_secret, b"ecdsa\x00" + app.app_id)
    assert bundle.app_sign_key.secret == sign_secret


def test_bundle_binding_across_instances(deployed):
    s, app = deployed.system, deployed.app
    replica = s.deploy("replica", app.manifest, app.app_id)
    other = replica.request_keys(s.cluster)
    assert other.disk_key != app.bundle.disk_key
    assert other.env_key == app.bundle.env_key
    assert other.app_sign_key == app.bundle.app_sign_key
    verify_bundle_chain(other, s.kms_auth.root_public)
    assert other.cert_chain[0].subject.startswith("app/")
    assert deployed.gateway_instance.bundle.cert_chain[0].subject.startswith("gateway/")


def test_derivation_survives_one_offline_node(deployed):
    s, app = deployed.system, deployed.app
    before = app.bundle.to_bytes()
    s.cluster.kill_node("kms-0")
    assert app.request_keys(s.cluster).to_bytes() == before
    s.cluster.kill_node("kms-1")
    with pytest.raises(QuorumUnavailableError):
        app.request_keys(s.cluster)
    s.cluster.revive_node("kms-0")
    assert app.request_keys(s.cluster).to_bytes() == before


def test_late_node_is_enrolled_with_a_working_share(deployed):
    s, app = deployed.system, deployed.app
    before = app.bundle.to_bytes()
    node = s.launch_kms_node("kms-late")
    s.register_kms_node(node)
    s.cluster.admit_node(node)
    assert s.cluster.share_index["kms-late"] == 4
    assert not node.root_cache
    s.cluster.kill_node("kms-0")
    s.cluster.kill_node("kms-1")
    assert app.request_keys(s.cluster).to_bytes() == before


def test_admission_checks(deployed):
    s = deployed.system
    stranger = s.launch_kms_node("kms-x")
    with pytest.raises(AdmissionError):
        s.cluster.admit_node(stranger)  # not registered
    s.register_kms_node(stranger)
    other = s.launch_kms_node("kms-y")
    with pytest.raises(SpoofedQuoteError):
        s.cluster.admit_node(stranger, quote=other.attest())  # quote binds another key
    backdoored = s.launch_kms_node("kms-z", code_label="kms-backdoor")
    s.register_kms_node(backdoored)
    with pytest.raises(AdmissionError):
        s.cluster.admit_node(backdoored)
    with pytest.raises(AdmissionError):
        s.cluster.admit_node(s.cluster.nodes["kms-0"])
    with pytest.raises(RootAlreadySetError):
        s.cluster.bootstrap_first_node(s.launch_kms_node("kms-w"))
    assert "kms-x" not in s.cluster.nodes and "kms-z" not in s.cluster.nodes


def test_key_request_binding(deployed):
    s, app = deployed.system, deployed.app
    quote = app.key_request_quote()
    with pytest.raises(SpoofedQuoteError):
        s.cluster.request_app_keys(quote, app.manifest, app.app_id, crypto.hash_data(b"someone"))
    gw = deployed.gateway_instance
    # The gateway's quote was made for the gateway's app id.
    with pytest.raises(SpoofedQuoteError):
        s.cluster.request_app_keys(gw.key_request_quote(), app.manifest, app.app_id, gw.instance_id)


def test_share_rotation_requires_ticket_and_full_committee(deployed):
    s = deployed.system
    cluster = s.cluster
    with pytest.raises(RotationError):
        cluster.rotate_shares()
    s.authorize_rotation(ROTATE_SHARES)
    snapshot = {n: dict(cluster.nodes[n].shares) for n in cluster.members}
    cluster.kill_node("kms-2")
    with pytest.raises(QuorumUnavailableError):
        cluster.rotate_shares()
    assert {n: dict(cluster.nodes[n].shares) for n in cluster.members} == snapshot
    assert s.kms_auth.has_rotation_ticket(ROTATE_SHARES)
    cluster.revive_node("kms-2")
    cluster.rotate_shares()
    assert not s.kms_auth.has_rotation_ticket(ROTATE_SHARES)
    assert all(cluster.nodes[n].shares[1] != snapshot[n][1] for n in cluster.members)


def test_message_loss_during_rotation_leaves_shares_intact(deployed):
    s = deployed.system
    cluster = s.cluster
    s.authorize_rotation(ROTATE_SHARES)
    before = {n: dict(cluster.nodes[n].shares) for n in cluster.members}
    s.network.drop("kms-1", "kms-2", count=1)
    with pytest.raises(DeliveryError):
        cluster.rotate_shares()
    assert {n: dict(cluster.nodes[n].shares) for n in cluster.members} == before
    cluster.rotate_shares()  # the link drop was one-shot
    assert deployed.app.request_keys(cluster).to_bytes() == deployed.app.bundle.to_bytes()


def test_partition_blocks_admission_without_side_effects(deployed):
    s = deployed.system
    node = s.launch_kms_node("kms-p")
    s.register_kms_node(node)
    s.network.partition({"kms-0", "kms-1", "kms-2"}, {"kms-p"})
    with pytest.raises(DeliveryError):
        s.cluster.admit_node(node)
    assert "kms-p" not in s.cluster.nodes and not node.shares
    s.network.heal()
    s.cluster.admit_node(node)
    assert 1 in node.shares


def test_root_rotation_handover_and_expiry(deployed):
    s, app = deployed.system, deployed.app
    cluster = s.cluster
    with pytest.raises(RotationError):
        cluster.rotate_root(10)
    s.authorize_rotation(ROTATE_ROOT)
    state = cluster.rotate_root(10)
    assert state.epoch == 2 and state.predecessor.epoch == 1
    assert cluster.live_epochs() == [1, 2]
    old = app.request_keys(cluster, epoch=1)
    new = app.request_keys(cluster, epoch=2)
    assert old.disk_key != new.disk_key
    verify_bundle_chain(new, s.kms_auth.root_public)
    s.authorize_rotation(ROTATE_ROOT)
    with pytest.raises(RotationError):
        cluster.rotate_root(10)  # one handover at a time
    s.clock.advance(10)
    assert cluster.live_epochs() == [2]
    with pytest.raises(EpochExpiredError):
        app.request_keys(cluster, epoch=1)
    assert 1 in s.kms_auth.destroyed_epochs
    assert all(1 not in cluster.nodes[n].shares for n in cluster.members)


def test_duplication_mode_end_to_end():
    run = _deploy(kms_mode=DUPLICATION)
    s, app = run.system, run.app
    cluster = s.cluster
    assert all(1 in cluster.nodes[n].root_cache for n in cluster.members)
    before = app.bundle.to_bytes()
    cluster.kill_node("kms-0")
    cluster.kill_node("kms-1")
    assert app.request_keys(cluster).to_bytes() == before
    s.authorize_rotation(ROTATE_SHARES)
    with pytest.raises(RotationError):
        cluster.rotate_shares()
    cluster.revive_node("kms-0")
    cluster.revive_node("kms-1")
    s.authorize_rotation(ROTATE_ROOT)
    cluster.rotate_root(5)
    assert app.request_keys(cluster, epoch=2).epoch == 2


def test_derive_bundle_is_pure(deployed):
    s, app = deployed.system, deployed.app
    root = s.cluster._root_state(1, s.cluster._materialize(1))
    a = derive_bundle(root, app.app_id, app.instance_id)
    b = derive_bundle(root, app.app_id, app.instance_id)
    assert a.to_bytes() == b.to_bytes() == app.bundle.to_bytes()
    assert derive_bundle(root, app.app_id, app.instance_id, GATEWAY).disk_key == a.disk_key
    assert "secret" not in repr(a) and a.disk_key.hex() not in repr(a)
