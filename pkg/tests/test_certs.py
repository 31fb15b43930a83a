import random
from dataclasses import replace

import pytest

from dstack_sim import certs
from dstack_sim.crypto import KeyPair
from dstack_sim.errors import CertExpiredError, ChainError, ForeignRootError, ParameterError

RNG = random.Random(5)
ROOT = KeyPair.generate(RNG.randbytes)
MID = KeyPair.generate(RNG.randbytes)
LEAF = KeyPair.generate(RNG.randbytes)


def chain(validity=(0, 100)):
    root = certs.issue("root", ROOT.public, "root", ROOT, epoch=1, validity=validity)
    mid = certs.issue("mid", MID.public, "root", ROOT, epoch=1, validity=validity, app_id=b"\x01" * 32)
    leaf = certs.issue("leaf.example", LEAF.public, "mid", MID, epoch=1, validity=validity)
    return (leaf, mid, root)


def test_valid_chain_verifies():
    certs.verify_chain(chain(), ROOT.public, now=50)
    assert chain()[-1].self_signed and not chain()[0].self_signed


def test_issue_is_deterministic():
    assert chain()[0].to_bytes() == chain()[0].to_bytes()


def test_foreign_root():
    with pytest.raises(ForeignRootError):
        certs.verify_chain(chain(), MID.public)


def test_broken_links():
    leaf, mid, root = chain()
    with pytest.raises(ChainError):
        certs.verify_chain((replace(leaf, subject="evil.example"), mid, root), ROOT.public)
    with pytest.raises(ChainError):
        certs.verify_chain((replace(leaf, issuer="root"), mid, root), ROOT.public)
    with pytest.raises(ChainError):
        certs.verify_chain((), ROOT.public)
    other_epoch = certs.issue("leaf.example", LEAF.public, "mid", MID, epoch=2, validity=(0, 100))
    with pytest.raises(ChainError):
        certs.verify_chain((other_epoch, mid, root), ROOT.public)


def test_validity_window_is_half_open():
    with pytest.raises(CertExpiredError):
        certs.verify_chain(chain((10, 20)), ROOT.public, now=20)
    with pytest.raises(CertExpiredError):
        certs.verify_chain(chain((10, 20)), ROOT.public, now=9)
    certs.verify_chain(chain((10, 20)), ROOT.public, now=10)
    with pytest.raises(ParameterError):
        certs.issue("x", LEAF.public, "x", LEAF, epoch=1, validity=(5, 5))


def test_json_view_has_fingerprint():
    j = chain()[1].to_json()
    assert j["app_id"] == "01" * 32 and len(j["fingerprint"]) == 64
