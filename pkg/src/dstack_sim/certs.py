"""Minimal certificates and chains.

Not X.509: a certificate is a fixed set of fields serialized canonically and
signed with Ed25519 by the issuer. Field correspondence with X.509:

=================  ==========================================
field              X.509 analogue
=================  ==========================================
subject            subject CN / SAN dNSName
subject_public     subjectPublicKeyInfo
issuer             issuer CN
app_id_ext         private extension (app identity)
quote_digest_ext   private extension (attestation evidence)
epoch              private extension (KMS root epoch)
validity           notBefore / notAfter, in logical ticks
=================  ==========================================

Chains are ordered leaf first, root last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from . import crypto
from .crypto import Digest, KeyPair
from .errors import CertExpiredError, ChainError, ForeignRootError, ParameterError
from .wire import pack_fields

CERT_MAGIC = b"DSC1"


@dataclass(frozen=True)
class Certificate:
    subject: str
    subject_public: bytes
    issuer: str
    app_id_ext: Optional[Digest]
    quote_digest_ext: Optional[Digest]
    epoch: int
    validity: tuple[int, int]
    signature: bytes = b""

    def tbs(self) -> bytes:
        """The signed portion."""
        return pack_fields(
            CERT_MAGIC,
            self.subject.encode(),
            self.subject_public,
            self.issuer.encode(),
            self.app_id_ext or b"",
            self.quote_digest_ext or b"",
            struct.pack(">IQQ", self.epoch, *self.validity),
        )

    def to_bytes(self) -> bytes:
        return self.tbs() + self.signature

    def fingerprint(self) -> Digest:
        return crypto.hash_data(self.to_bytes())

    @property
    def self_signed(self) -> bool:
        return self.issuer == self.subject

    def valid_at(self, now: int) -> bool:
        return self.validity[0] <= now < self.validity[1]

    def to_json(self) -> dict:
        return {
            "subject": self.subject,
            "subject_public": self.subject_public.hex(),
            "issuer": self.issuer,
            "app_id": self.app_id_ext.hex() if self.app_id_ext else None,
            "quote_digest": self.quote_digest_ext.hex() if self.quote_digest_ext else None,
            "epoch": self.epoch,
            "validity": list(self.validity),
            "fingerprint": self.fingerprint().hex(),
        }


CertificateChain = tuple[Certificate, ...]


def issue(subject: str, subject_public: bytes, issuer: str, issuer_key: KeyPair, *,
          epoch: int, validity: tuple[int, int], app_id: Optional[Digest] = None,
          quote_digest: Optional[Digest] = None) -> Certificate:
    start, end = validity
    if not start < end:
        raise ParameterError("certificate validity must satisfy start < end")
    cert = Certificate(subject, subject_public, issuer, app_id, quote_digest, epoch, (start, end))
    return replace(cert, signature=crypto.sign(issuer_key, cert.tbs()))


def verify_chain(chain: Sequence[Certificate], root_public: bytes, now: Optional[int] = None) -> None:
    """Raise unless ``chain`` is a well-formed chain ending at ``root_public``.

    Checks, in order: the root key matches, every signature and issuer link,
    consistent epochs, then (if ``now`` is given) every validity window.
    """
    if not chain:
        raise ChainError("empty chain")
    root = chain[-1]
    if root.subject_public != root_public:
        raise ForeignRootError("chain is rooted in a different key")
    if not root.self_signed or not crypto.verify(root.subject_public, root.tbs(), root.signature):
        raise ChainError("root certificate is not validly self-signed")
    for child, parent in zip(chain, chain[1:]):
        if child.issuer != parent.subject:
            raise ChainError(f"{child.subject!r} names issuer {child.issuer!r}, next is {parent.subject!r}")
        if not crypto.verify(parent.subject_public, child.tbs(), child.signature):
            raise ChainError(f"signature on {child.subject!r} does not verify")
    if any(c.epoch != root.epoch for c in chain):
        raise ChainError("certificates from different epochs")
    if now is not None:
        for c in chain:
            if not c.valid_at(now):
                raise CertExpiredError(f"{c.subject!r} not valid at tick {now}")
