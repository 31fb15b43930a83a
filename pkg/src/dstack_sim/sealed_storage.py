"""Encrypted application volumes with rollback protection.

Volume file format, version 1 (big-endian, byte-exact)::

    offset  size  field
    0       4     magic "DSVL"
    4       1     version = 1
    5       1     key slot: 0 = disk key (instance-bound), 1 = env key (portable)
    6       32    app_id
    38      4     epoch (u32)
    42      32    origin instance id
    74      8     counter value (u64)
    82      12    AES-GCM nonce
    94      2     counter name length n (u16)
    96      n     counter name, UTF-8
    96+n    ...   AES-256-GCM ciphertext || 16-byte tag

Bytes 0..96+n are the associated data, so every header field is
authenticated. Backups are volumes in the env-key slot: any instance of the
same app can read them, which is how data moves between instances whose
disk keys differ.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Collection, Optional, Protocol

from . import crypto
from .crypto import ZERO_DIGEST, Digest, RandBytes
from .errors import (
    CounterUnavailableError,
    DecryptError,
    EpochExpiredError,
    RollbackDetectedError,
    UnrecoverableError,
    VolumeFormatError,
)
from .governance import KmsAuth
from .kms import AppKeyBundle

MAGIC = b"DSVL"
VERSION = 1
DISK = 0
ENV = 1
_FIXED = struct.Struct(">4sBB32sI32sQ12sH")


class CounterService(Protocol):
    def bump(self, app_id: Digest, name: str) -> int: ...
    def read(self, app_id: Digest, name: str) -> int: ...


class ChainCounters:
    """Counters held in the KmsAuth registry; the trusted authority."""

    trusted = True

    def __init__(self, kms_auth: KmsAuth):
        self.kms_auth = kms_auth
        self.available = True

    def _check(self):
        if not self.available:
            raise CounterUnavailableError("governance counter registry unreachable")

    def bump(self, app_id: Digest, name: str) -> int:
        self._check()
        return self.kms_auth.counter_bump(app_id, name)

    def read(self, app_id: Digest, name: str) -> int:
        self._check()
        return self.kms_auth.counter_read(app_id, name)


class LocalCounters:
    """Instance-local counters, optionally persisted as JSON. Untrusted: whoever
    controls the file can roll it back together with the data."""

    trusted = False

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.available = True
        self._values: dict[str, int] = {}
        if self.path and self.path.exists():
            self._values = json.loads(self.path.read_text())

    @staticmethod
    def _key(app_id: Digest, name: str) -> str:
        return f"{app_id.hex()}/{name}"

    def bump(self, app_id: Digest, name: str) -> int:
        if not self.available:
            raise CounterUnavailableError("local counter store unavailable")
        key = self._key(app_id, name)
        self._values[key] = self._values.get(key, 0) + 1
        if self.path:
            self.path.write_text(json.dumps(self._values, sort_keys=True))
        return self._values[key]

    def read(self, app_id: Digest, name: str) -> int:
        if not self.available:
            raise CounterUnavailableError("local counter store unavailable")
        return self._values.get(self._key(app_id, name), 0)


@dataclass(frozen=True)
class VolumeHeader:
    app_id: Digest
    epoch: int
    counter_name: str
    counter_value: int
    nonce: bytes
    key_slot: int = DISK
    origin: Digest = ZERO_DIGEST

    def to_bytes(self) -> bytes:
        name = self.counter_name.encode()
        return _FIXED.pack(MAGIC, VERSION, self.key_slot, self.app_id, self.epoch,
                           self.origin, self.counter_value, self.nonce, len(name)) + name


@dataclass(frozen=True)
class SealedVolume:
    header: VolumeHeader
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedVolume":
        if len(data) < _FIXED.size:
            raise VolumeFormatError("volume shorter than fixed header")
        magic, version, slot, app_id, epoch, origin, counter, nonce, name_len = _FIXED.unpack_from(data)
        if magic != MAGIC:
            raise VolumeFormatError("bad magic")
        if version != VERSION:
            raise VolumeFormatError(f"unsupported volume version {version}")
        if slot not in (DISK, ENV):
            raise VolumeFormatError(f"unknown key slot {slot}")
        end = _FIXED.size + name_len
        if len(data) < end:
            raise VolumeFormatError("counter name truncated")
        try:
            name = data[_FIXED.size:end].decode()
        except UnicodeDecodeError:
            raise VolumeFormatError("counter name is not UTF-8") from None
        header = VolumeHeader(app_id, epoch, name, counter, nonce, slot, origin)
        return cls(header, bytes(data[end:]))


@dataclass(frozen=True)
class BackupBlob:
    volume: SealedVolume

    @property
    def source_instance(self) -> Digest:
        return self.volume.header.origin

    def to_bytes(self) -> bytes:
        return self.volume.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BackupBlob":
        volume = SealedVolume.from_bytes(data)
        if volume.header.key_slot != ENV:
            raise VolumeFormatError("not a backup: volume is bound to one instance")
        return cls(volume)


def _key(bundle: AppKeyBundle, slot: int) -> bytes:
    return bundle.disk_key if slot == DISK else bundle.env_key


def _encrypt(bundle: AppKeyBundle, plaintext: bytes, name: str, value: int, slot: int,
             randbytes: RandBytes) -> SealedVolume:
    header = VolumeHeader(bundle.app_id, bundle.epoch, name, value,
                          randbytes(crypto.NONCE_SIZE), slot, bundle.instance_id)
    aad = header.to_bytes()
    return SealedVolume(header, crypto.aead_seal(_key(bundle, slot), header.nonce, aad, plaintext))


def seal(bundle: AppKeyBundle, plaintext: bytes, counters: CounterService,
         counter_name: str = "data", randbytes: RandBytes = os.urandom) -> SealedVolume:
    # Bump first: if the counter service is down nothing is written.
    value = counters.bump(bundle.app_id, counter_name)
    return _encrypt(bundle, plaintext, counter_name, value, DISK, randbytes)


def _open(bundle: AppKeyBundle, volume: SealedVolume, counters: CounterService,
          live_epochs: Optional[Collection[int]]) -> bytes:
    h = volume.header
    if live_epochs is not None and h.epoch not in live_epochs:
        raise EpochExpiredError(f"volume sealed under epoch {h.epoch}, which is no longer live")
    plaintext = crypto.aead_open(_key(bundle, h.key_slot), h.nonce, h.to_bytes(), volume.ciphertext)
    last = counters.read(h.app_id, h.counter_name)
    if h.counter_value < last:
        raise RollbackDetectedError(
            f"{h.counter_name}: snapshot counter {h.counter_value} < last known {last}")
    return plaintext


def unseal(bundle: AppKeyBundle, volume: SealedVolume, counters: CounterService,
           live_epochs: Optional[Collection[int]] = None) -> bytes:
    if volume.header.key_slot != DISK:
        raise DecryptError("backup blobs are opened with restore()")
    return _open(bundle, volume, counters, live_epochs)


def migrate(volume: SealedVolume, old_bundle: AppKeyBundle, new_bundle: AppKeyBundle,
            counters: CounterService, live_epochs: Optional[Collection[int]] = None,
            randbytes: RandBytes = os.urandom) -> SealedVolume:
    """Re-seal under ``new_bundle``; the usual path from epoch N to N+1."""
    try:
        plaintext = _open(old_bundle, volume, counters, live_epochs)
    except EpochExpiredError as exc:
        raise UnrecoverableError(f"cannot migrate: {exc}; the old root is destroyed") from exc
    return seal(new_bundle, plaintext, counters, volume.header.counter_name, randbytes)


def backup(volume: SealedVolume, bundle: AppKeyBundle, counters: CounterService,
           live_epochs: Optional[Collection[int]] = None,
           randbytes: RandBytes = os.urandom) -> BackupBlob:
    """Portable copy under the env key, keeping the snapshot's counter value."""
    plaintext = unseal(bundle, volume, counters, live_epochs)
    h = volume.header
    return BackupBlob(_encrypt(bundle, plaintext, h.counter_name, h.counter_value, ENV, randbytes))


def restore(blob: BackupBlob, bundle: AppKeyBundle, counters: CounterService,
            live_epochs: Optional[Collection[int]] = None) -> bytes:
    return _open(bundle, blob.volume, counters, live_epochs)


def restore_to_volume(blob: BackupBlob, bundle: AppKeyBundle, counters: CounterService,
                      live_epochs: Optional[Collection[int]] = None,
                      randbytes: RandBytes = os.urandom) -> SealedVolume:
    """Restore on (possibly another) instance and re-seal under its disk key."""
    plaintext = restore(blob, bundle, counters, live_epochs)
    return seal(bundle, plaintext, counters, blob.volume.header.counter_name, randbytes)


def tamper_header(volume: SealedVolume, **changes) -> SealedVolume:
    """Return ``volume`` with header fields replaced; for tests and attack scripts."""
    return SealedVolume(replace(volume.header, **changes), volume.ciphertext)
