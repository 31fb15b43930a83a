import random
from dataclasses import replace

import pytest

import oracles
from dstack_sim import crypto
from dstack_sim.crypto import ZERO_DIGEST
from dstack_sim.errors import (
    MalformedQuoteError,
    NotBootedError,
    OutdatedFirmwareError,
    ParameterError,
    RegisterError,
    SpoofedQuoteError,
)
from dstack_sim.tee_sim import (
    QUOTE_SIZE,
    BootManifest,
    MeasurementState,
    OsImage,
    Quote,
    Register,
    TeeInstance,
    VendorRoot,
    boot,
    expected_rtmr3,
    extend,
    instance_id_for,
    os_digest,
    pad_report_data,
    replay,
    verify_quote,
)


def _digest(label: str) -> bytes:
    return crypto.hash_data(label.encode())


def _manifest(app="app", kms=None) -> BootManifest:
    return OsImage.from_labels("os").manifest(_digest(app), kms)


def test_extend_matches_oracle():
    state = extend(MeasurementState(), Register.RTMR1, _digest("k"))
    assert state.rtmr[1] == oracles.rtmr_extend(ZERO_DIGEST, _digest("k"))
    assert state.mrtd == ZERO_DIGEST and state.rtmr[0] == ZERO_DIGEST


def test_extend_rejects_bad_register():
    with pytest.raises(RegisterError):
        extend(MeasurementState(), 7, _digest("x"))


def test_boot_order_follows_oracle():
    m = _manifest(kms=_digest("kms"))
    state = boot(m)
    assert state.mrtd == oracles.rtmr_extend(ZERO_DIGEST, m.ovmf_digest)
    assert state.rtmr[0] == oracles.rtmr_extend(ZERO_DIGEST, m.vm_config_digest)
    assert state.rtmr[1] == oracles.rtmr_extend(ZERO_DIGEST, m.kernel_digest)
    assert state.rtmr[2] == oracles.rtmr_extend(ZERO_DIGEST, m.initrd_rootfs_digest)
    r3 = oracles.rtmr_extend(oracles.rtmr_extend(ZERO_DIGEST, m.app_digest), _digest("kms"))
    assert state.rtmr[3] == r3 == expected_rtmr3(m.app_digest, _digest("kms"))


def test_replay_of_event_log_reproduces_registers():
    tee = TeeInstance(VendorRoot(random.Random(1).randbytes), randbytes=random.Random(2).randbytes)
    state = tee.boot(_manifest())
    assert replay(tee.event_log) == state


def test_measurement_state_serialization():
    state = boot(_manifest())
    assert MeasurementState.from_bytes(state.to_bytes()) == state
    assert set(state.to_json()) == {"MRTD", "RTMR0", "RTMR1", "RTMR2", "RTMR3"}


def test_os_digest_ignores_app_layer():
    image = OsImage.from_labels("os")
    assert os_digest(boot(image.manifest(_digest("a")))) == os_digest(boot(image.manifest(_digest("b"))))
    assert image.digest() == os_digest(boot(image.manifest(_digest("a"))))
    assert OsImage.from_labels("other").digest() != image.digest()


def test_boot_is_write_once_and_required():
    tee = TeeInstance(VendorRoot(random.Random(1).randbytes), randbytes=random.Random(2).randbytes)
    with pytest.raises(NotBootedError):
        tee.generate_quote()
    tee.boot(_manifest())
    with pytest.raises(NotBootedError):
        tee.boot(_manifest("other"))


def test_manifest_requires_digests():
    with pytest.raises(ParameterError):
        BootManifest(b"x", ZERO_DIGEST, ZERO_DIGEST, ZERO_DIGEST, ZERO_DIGEST).events()


def _quote(fw=2, report=b"hello"):
    rng = random.Random(fw)
    vendor = VendorRoot(rng.randbytes)
    tee = TeeInstance(vendor, fw, rng.randbytes)
    tee.boot(_manifest())
    return vendor, tee, tee.generate_quote(report)


def test_honest_quote_verifies_and_roundtrips():
    vendor, tee, quote = _quote()
    vq = verify_quote(quote, vendor.attestation_root(1))
    assert vq.report_data == pad_report_data(b"hello")
    assert vq.instance_id == tee.instance_id == instance_id_for(tee.tee_key_public)
    raw = quote.to_bytes()
    assert len(raw) == QUOTE_SIZE
    assert Quote.from_bytes(raw) == quote


def test_quote_from_bytes_rejects_bad_input():
    _, _, quote = _quote()
    raw = quote.to_bytes()
    with pytest.raises(MalformedQuoteError):
        Quote.from_bytes(raw[:-1])
    with pytest.raises(MalformedQuoteError):
        Quote.from_bytes(b"XXXX" + raw[4:])


def test_unendorsed_hardware_is_spoofed():
    vendor = VendorRoot(random.Random(1).randbytes)
    fake = TeeInstance(None, 5, random.Random(2).randbytes)
    fake.boot(_manifest())
    with pytest.raises(SpoofedQuoteError):
        verify_quote(fake.generate_quote(b""), vendor.attestation_root())


def test_other_vendor_is_spoofed():
    _, _, quote = _quote()
    other = VendorRoot(random.Random(99).randbytes)
    with pytest.raises(SpoofedQuoteError):
        verify_quote(quote, other.attestation_root())


def test_firmware_downgrade_claim_breaks_endorsement():
    vendor, _, quote = _quote(fw=1)
    # Claiming a newer firmware than was endorsed does not help.
    with pytest.raises(SpoofedQuoteError):
        verify_quote(replace(quote, firmware_version=3), vendor.attestation_root(2))
    with pytest.raises(OutdatedFirmwareError):
        verify_quote(quote, vendor.attestation_root(2))


def test_report_data_limits():
    assert pad_report_data(b"ab") == b"ab" + bytes(62)
    with pytest.raises(ParameterError):
        pad_report_data(bytes(65))


def test_malformed_widths_rejected():
    vendor, _, quote = _quote()
    with pytest.raises(MalformedQuoteError):
        verify_quote(replace(quote, report_data=b"short"), vendor.attestation_root())
    with pytest.raises(MalformedQuoteError):
        verify_quote(replace(quote, firmware_version=-1), vendor.attestation_root())
