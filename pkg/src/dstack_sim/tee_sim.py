"""Software stand-in for a VM-level TEE.

Measurement registers follow the usual measured-boot rule
``new = SHA256(old || event)``. The boot script extends, in order, MRTD with
the firmware, RTMR0 with the VM configuration, RTMR1 with the kernel, RTMR2
with initrd + root filesystem and RTMR3 with the application (optionally
followed by the identity of the KMS the application is bound to).

Quotes are signed by a per-instance hardware key; the simulated vendor
endorses that key together with the instance's firmware version.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional

from . import crypto
from .crypto import ZERO_DIGEST, Digest, KeyPair, RandBytes
from .errors import (
    MalformedQuoteError,
    NotBootedError,
    OutdatedFirmwareError,
    ParameterError,
    RegisterError,
    SpoofedQuoteError,
)

REPORT_DATA_SIZE = 64
QUOTE_MAGIC = b"DSQ1"
QUOTE_SIZE = 4 + 32 + 4 * 32 + REPORT_DATA_SIZE + 32 + 4 + 64 + 64
_ENDORSE_TAG = b"dstack-sim/vendor-endorsement\x00"


class Register(enum.IntEnum):
    MRTD = 0
    RTMR0 = 1
    RTMR1 = 2
    RTMR2 = 3
    RTMR3 = 4


@dataclass(frozen=True)
class MeasurementState:
    mrtd: Digest = ZERO_DIGEST
    rtmr: tuple[Digest, Digest, Digest, Digest] = (ZERO_DIGEST,) * 4

    def get(self, register: Register) -> Digest:
        if register == Register.MRTD:
            return self.mrtd
        return self.rtmr[register - 1]

    def to_bytes(self) -> bytes:
        return self.mrtd + b"".join(self.rtmr)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MeasurementState":
        if len(data) != 5 * 32:
            raise MalformedQuoteError("measurement block must be 160 bytes")
        regs = [data[i : i + 32] for i in range(0, 160, 32)]
        return cls(mrtd=regs[0], rtmr=tuple(regs[1:]))

    def to_json(self) -> dict:
        return {
            "MRTD": self.mrtd.hex(),
            **{f"RTMR{i}": r.hex() for i, r in enumerate(self.rtmr)},
        }


def extend(state: MeasurementState, register, event: Digest) -> MeasurementState:
    try:
        register = Register(register)
    except ValueError:
        raise RegisterError(f"unknown register {register!r}") from None
    if len(event) != crypto.DIGEST_SIZE:
        raise RegisterError("event digest must be 32 bytes")
    new_value = crypto.hash_concat(state.get(register), event)
    if register == Register.MRTD:
        return MeasurementState(mrtd=new_value, rtmr=state.rtmr)
    rtmr = list(state.rtmr)
    rtmr[register - 1] = new_value
    return MeasurementState(mrtd=state.mrtd, rtmr=tuple(rtmr))


def replay(events: Iterable[tuple[Register, Digest]]) -> MeasurementState:
    state = MeasurementState()
    for register, event in events:
        state = extend(state, register, event)
    return state


@dataclass(frozen=True)
class BootManifest:
    ovmf_digest: Digest
    vm_config_digest: Digest
    kernel_digest: Digest
    initrd_rootfs_digest: Digest
    app_digest: Digest
    # Identity of the KMS the app is bound to; None for KMS nodes.
    kms_identity: Optional[Digest] = None

    def events(self) -> list[tuple[Register, Digest]]:
        for name in ("ovmf_digest", "vm_config_digest", "kernel_digest",
                     "initrd_rootfs_digest", "app_digest"):
            value = getattr(self, name)
            if not isinstance(value, bytes) or len(value) != 32:
                raise ParameterError(f"manifest field {name} must be a 32-byte digest")
        log = [
            (Register.MRTD, self.ovmf_digest),
            (Register.RTMR0, self.vm_config_digest),
            (Register.RTMR1, self.kernel_digest),
            (Register.RTMR2, self.initrd_rootfs_digest),
            (Register.RTMR3, self.app_digest),
        ]
        if self.kms_identity is not None:
            log.append((Register.RTMR3, self.kms_identity))
        return log


def boot(manifest: BootManifest) -> MeasurementState:
    return replay(manifest.events())


def expected_rtmr3(app_digest: Digest, kms_identity: Optional[Digest] = None) -> Digest:
    state = extend(MeasurementState(), Register.RTMR3, app_digest)
    if kms_identity is not None:
        state = extend(state, Register.RTMR3, kms_identity)
    return state.rtmr[3]


def os_digest(state: MeasurementState) -> Digest:
    """Identity of the OS stack: MRTD and RTMR0-2, independent of the app."""
    return crypto.hash_concat(b"dstack-os\x00", state.mrtd, *state.rtmr[:3])


@dataclass(frozen=True)
class OsImage:
    """The four measured OS components; ``digest()`` is what KmsAuth registers."""

    ovmf_digest: Digest
    vm_config_digest: Digest
    kernel_digest: Digest
    initrd_rootfs_digest: Digest

    @classmethod
    def from_labels(cls, label: str) -> "OsImage":
        h = lambda part: crypto.hash_data(f"{label}/{part}".encode())  # noqa: E731
        return cls(h("ovmf"), h("vm-config"), h("kernel"), h("initrd-rootfs"))

    def manifest(self, app_digest: Digest, kms_identity: Optional[Digest] = None) -> BootManifest:
        return BootManifest(
            self.ovmf_digest, self.vm_config_digest, self.kernel_digest,
            self.initrd_rootfs_digest, app_digest, kms_identity,
        )

    def digest(self) -> Digest:
        return os_digest(boot(self.manifest(ZERO_DIGEST)))


# ---------------------------------------------------------------------------
# Quotes


@dataclass(frozen=True)
class AttestationRoot:
    vendor_public: bytes
    min_firmware_version: int = 0

    def __post_init__(self):
        if self.min_firmware_version < 0:
            raise ParameterError("min_firmware_version must be >= 0")


@dataclass(frozen=True)
class Quote:
    measurements: MeasurementState
    report_data: bytes
    tee_key_public: bytes
    firmware_version: int
    endorsement: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return (
            QUOTE_MAGIC
            + self.measurements.to_bytes()
            + self.report_data
            + self.tee_key_public
            + struct.pack(">I", self.firmware_version)
            + self.endorsement
        )

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        if len(data) != QUOTE_SIZE or data[:4] != QUOTE_MAGIC:
            raise MalformedQuoteError("not a canonical quote")
        pos = 4
        meas = MeasurementState.from_bytes(data[pos : pos + 160]); pos += 160
        report_data = data[pos : pos + 64]; pos += 64
        tee_key = data[pos : pos + 32]; pos += 32
        (fw,) = struct.unpack(">I", data[pos : pos + 4]); pos += 4
        endorsement = data[pos : pos + 64]; pos += 64
        return cls(meas, report_data, tee_key, fw, endorsement, data[pos:])

    def digest(self) -> Digest:
        return crypto.hash_data(self.to_bytes())

    def to_json(self) -> dict:
        return {
            "measurements": self.measurements.to_json(),
            "report_data": self.report_data.hex(),
            "tee_key_public": self.tee_key_public.hex(),
            "firmware_version": self.firmware_version,
            "endorsement": self.endorsement.hex(),
            "signature": self.signature.hex(),
            "digest": self.digest().hex(),
        }


@dataclass(frozen=True)
class VerifiedQuote:
    measurements: MeasurementState
    report_data: bytes
    tee_key_public: bytes
    firmware_version: int

    @property
    def instance_id(self) -> Digest:
        return instance_id_for(self.tee_key_public)


def instance_id_for(tee_key_public: bytes) -> Digest:
    return crypto.hash_concat(b"dstack-instance\x00", tee_key_public)


def _endorsement_message(tee_key_public: bytes, firmware_version: int) -> bytes:
    return _ENDORSE_TAG + tee_key_public + struct.pack(">I", firmware_version)


def pad_report_data(data: bytes) -> bytes:
    if len(data) > REPORT_DATA_SIZE:
        raise ParameterError(f"report_data exceeds {REPORT_DATA_SIZE} bytes")
    return bytes(data) + bytes(REPORT_DATA_SIZE - len(data))


class VendorRoot:
    """The simulated hardware vendor: endorses per-instance quoting keys."""

    def __init__(self, randbytes: RandBytes = os.urandom):
        self._key = KeyPair.generate(randbytes)

    @property
    def public(self) -> bytes:
        return self._key.public

    def endorse(self, tee_key_public: bytes, firmware_version: int) -> bytes:
        return crypto.sign(self._key, _endorsement_message(tee_key_public, firmware_version))

    def attestation_root(self, min_firmware_version: int = 0) -> AttestationRoot:
        return AttestationRoot(self._key.public, min_firmware_version)


class TeeInstance:
    """One confidential VM. Its register bank changes only through ``boot``."""

    def __init__(self, vendor: Optional[VendorRoot], firmware_version: int = 1,
                 randbytes: RandBytes = os.urandom):
        self._hw_key = KeyPair.generate(randbytes)
        self.firmware_version = firmware_version
        if vendor is None:
            # Non-TEE hardware: nothing but its own key vouches for it.
            self._endorsement = crypto.sign(
                self._hw_key, _endorsement_message(self._hw_key.public, firmware_version))
        else:
            self._endorsement = vendor.endorse(self._hw_key.public, firmware_version)
        self._state: Optional[MeasurementState] = None
        self._event_log: list[tuple[Register, Digest]] = []

    @property
    def tee_key_public(self) -> bytes:
        return self._hw_key.public

    @property
    def instance_id(self) -> Digest:
        return instance_id_for(self._hw_key.public)

    @property
    def measurements(self) -> MeasurementState:
        if self._state is None:
            raise NotBootedError("instance has not booted")
        return self._state

    @property
    def event_log(self) -> tuple[tuple[Register, Digest], ...]:
        return tuple(self._event_log)

    def boot(self, manifest: BootManifest) -> MeasurementState:
        if self._state is not None:
            raise NotBootedError("instance already booted; measurements are write-once")
        self._event_log = manifest.events()
        self._state = replay(self._event_log)
        return self._state

    def generate_quote(self, report_data: bytes = b"") -> Quote:
        unsigned = Quote(
            measurements=self.measurements,
            report_data=pad_report_data(report_data),
            tee_key_public=self._hw_key.public,
            firmware_version=self.firmware_version,
            endorsement=self._endorsement,
        )
        return replace(unsigned, signature=crypto.sign(self._hw_key, unsigned.body()))


def verify_quote(quote: Quote, root: AttestationRoot) -> VerifiedQuote:
    if (len(quote.report_data) != REPORT_DATA_SIZE
            or len(quote.tee_key_public) != crypto.PUBLIC_KEY_SIZE
            or not 0 <= quote.firmware_version < 2**32):
        raise MalformedQuoteError("quote fields have non-canonical widths")
    endorsed = crypto.verify(
        root.vendor_public,
        _endorsement_message(quote.tee_key_public, quote.firmware_version),
        quote.endorsement,
    )
    if not endorsed:
        raise SpoofedQuoteError("quoting key is not endorsed by the vendor root")
    if not crypto.verify(quote.tee_key_public, quote.body(), quote.signature):
        raise SpoofedQuoteError("quote signature does not verify")
    if quote.firmware_version < root.min_firmware_version:
        raise OutdatedFirmwareError(
            f"firmware {quote.firmware_version} below minimum {root.min_firmware_version}")
    return VerifiedQuote(quote.measurements, quote.report_data,
                         quote.tee_key_public, quote.firmware_version)


def quote_json(quote: Quote) -> str:
    return json.dumps(quote.to_json(), indent=2, sort_keys=True)
