"""Gateway: attested app registration, subdomain certificates, routing, CT watch.

The gateway is itself a KMS-keyed app. It signs subdomain leaf certificates
with its own KMS-derived signing key, so every served chain is

    subdomain leaf -> gateway leaf -> gateway app CA -> KMS root

and a client holding only the on-chain root key can check it end to end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import certs, crypto, wire
from .certs import Certificate, CertificateChain
from .clock import LogicalClock
from .crypto import Digest
from .errors import (
    AppRejectedError,
    CaaDeniedError,
    CertExpiredError,
    ChainError,
    ForeignRootError,
    NoRouteError,
    ParameterError,
    UnknownAppError,
    ZoneError,
)
from .governance import AppManifest, KmsAuth
from .kms import AppKeyBundle, kms_identity
from .tee_sim import AttestationRoot, Quote, expected_rtmr3, os_digest, pad_report_data, verify_quote

log = logging.getLogger(__name__)

DEFAULT_ZONE = "dstack.example"
LEAF_LIFETIME = 1000
SUBDOMAIN_HEX_CHARS = 16

Endpoint = Callable[[bytes], bytes]


def subdomain_for(app_id: Digest, zone_apex: str) -> str:
    return f"{app_id.hex()[:SUBDOMAIN_HEX_CHARS]}.{zone_apex.lower().rstrip('.')}"


def registration_report_data(app_id: Digest, subject_public: bytes) -> bytes:
    return crypto.hash_concat(b"gateway-register\x00", app_id, subject_public)


# ---------------------------------------------------------------------------
# CAA


@dataclass(frozen=True)
class CaaRecord:
    domain: str
    allowed_issuer: str


class Zone:
    """A managed DNS zone holding at most one CAA record per name."""

    def __init__(self, apex: str):
        self.apex = apex.lower().rstrip(".")
        self.records: dict[str, CaaRecord] = {}

    def contains(self, domain: str) -> bool:
        domain = domain.lower().rstrip(".")
        return domain == self.apex or domain.endswith("." + self.apex)

    def set_caa(self, record: CaaRecord) -> None:
        if not self.contains(record.domain):
            raise ZoneError(f"{record.domain} is outside zone {self.apex}")
        self.records[record.domain.lower().rstrip(".")] = record

    def lookup(self, domain: str) -> Optional[CaaRecord]:
        # Climb towards the apex like a resolver does for CAA.
        name = domain.lower().rstrip(".")
        while True:
            if name in self.records:
                return self.records[name]
            if name == self.apex or "." not in name:
                return None
            name = name.split(".", 1)[1]


def caa_check(zone: Zone, domain: str, issuer: str) -> bool:
    if not zone.contains(domain):
        raise ZoneError(f"{domain} is outside zone {zone.apex}")
    record = zone.lookup(domain)
    return record is not None and record.allowed_issuer == issuer


# ---------------------------------------------------------------------------
# Certificate transparency


@dataclass(frozen=True)
class CtEntry:
    index: int
    time: int
    certificate: Certificate


class CtLog:
    """Append-only; anyone may submit, as with public CT logs."""

    def __init__(self):
        self._entries: list[CtEntry] = []

    def append(self, time: int, cert: Certificate) -> CtEntry:
        entry = CtEntry(len(self._entries), time, cert)
        self._entries.append(entry)
        return entry

    @property
    def entries(self) -> tuple[CtEntry, ...]:
        return tuple(self._entries)

    def contains(self, cert: Certificate) -> bool:
        fp = cert.fingerprint()
        return any(e.certificate.fingerprint() == fp for e in self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def to_json(self) -> list[dict]:
        return [{"index": e.index, "time": e.time, **e.certificate.to_json()} for e in self._entries]


@dataclass(frozen=True)
class Alert:
    index: int
    time: int
    subject: str
    issuer: str
    fingerprint: str


def ct_monitor_scan(ct_log: CtLog, zone: Zone, expected_issuer: str) -> list[Alert]:
    return [
        Alert(e.index, e.time, e.certificate.subject, e.certificate.issuer,
              e.certificate.fingerprint().hex())
        for e in ct_log.entries
        if zone.contains(e.certificate.subject) and e.certificate.issuer != expected_issuer
    ]


class AlertStore:
    def __init__(self):
        self._alerts: dict[int, Alert] = {}

    def add(self, alerts: Iterable[Alert]) -> list[Alert]:
        fresh = [a for a in alerts if a.index not in self._alerts]
        for a in fresh:
            self._alerts[a.index] = a
            log.warning("rogue certificate for %s issued by %s (CT index %d)",
                        a.subject, a.issuer, a.index)
        return fresh

    def all(self) -> list[Alert]:
        return [self._alerts[i] for i in sorted(self._alerts)]


# ---------------------------------------------------------------------------
# Client-side verification


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = "verified"

    def __bool__(self) -> bool:
        return self.ok


VERIFIED = "verified"
FOREIGN_ROOT = "foreign-root"
INVALID_CHAIN = "invalid-chain"
EXPIRED_CERT = "expired-cert"
NAME_MISMATCH = "name-mismatch"
UNVERIFIED_APP = "unverified-app"


def verify_presented_chain(chain: CertificateChain, expected_root: bytes, registry: KmsAuth,
                           now: int, host: Optional[str] = None) -> Verdict:
    """What a client checks: chain, on-chain root, app authorization, validity, name."""
    try:
        certs.verify_chain(chain, expected_root, now)
    except ForeignRootError:
        return Verdict(False, FOREIGN_ROOT)
    except CertExpiredError:
        return Verdict(False, EXPIRED_CERT)
    except ChainError:
        return Verdict(False, INVALID_CHAIN)
    if host is not None and chain[0].subject != host:
        return Verdict(False, NAME_MISMATCH)
    for cert in chain:
        if cert.app_id_ext is None:
            continue
        try:
            allowed = registry.app(cert.app_id_ext).allowed_code_digests
        except UnknownAppError:
            return Verdict(False, UNVERIFIED_APP)
        if not allowed:
            return Verdict(False, UNVERIFIED_APP)
    return Verdict(True, VERIFIED)


# ---------------------------------------------------------------------------
# Requests


@dataclass(frozen=True)
class Request:
    host: str
    body: bytes

    def to_bytes(self) -> bytes:
        return wire.encode("request", wire.pack_fields(self.host.encode(), self.body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Request":
        kind, payload = wire.decode(data)
        if kind != "request":
            raise ParameterError(f"expected request envelope, got {kind}")
        host, body = wire.unpack_fields(payload)
        return cls(host.decode(), body)


@dataclass(frozen=True)
class Response:
    host: str
    body: bytes
    chain: CertificateChain

    def to_bytes(self) -> bytes:
        return wire.encode("response", wire.pack_fields(
            self.host.encode(), self.body, *(c.to_bytes() for c in self.chain)))


@dataclass
class RouteEntry:
    host: str
    app_id: Digest
    endpoint: Endpoint
    subject_public: bytes
    quote_digest: Optional[Digest]
    chain: CertificateChain


@dataclass
class Gateway:
    bundle: AppKeyBundle
    kms_auth: KmsAuth
    clock: LogicalClock
    attestation_root: Optional[AttestationRoot] = None
    zone_apex: str = DEFAULT_ZONE
    ct_log: CtLog = field(default_factory=CtLog)
    leaf_lifetime: int = LEAF_LIFETIME
    expected_root: Optional[bytes] = None

    def __post_init__(self):
        if self.expected_root is None:
            self.expected_root = self.bundle.cert_chain[-1].subject_public
        self.issuer_name = self.bundle.cert_chain[0].subject
        self.zone = Zone(self.zone_apex)
        self.zone.set_caa(CaaRecord(self.zone.apex, self.issuer_name))
        self.zones: dict[str, Zone] = {self.zone.apex: self.zone}
        self.routes: dict[str, RouteEntry] = {}
        self.alerts = AlertStore()

    def caa_set(self, zone_apex: str, record: CaaRecord) -> None:
        zone = self.zones.setdefault(zone_apex, Zone(zone_apex))
        zone.set_caa(record)

    # -- issuance ------------------------------------------------------------

    def _issue(self, host: str, zone: Zone, app_id: Digest, subject_public: bytes,
               quote_digest: Optional[Digest]) -> CertificateChain:
        if not caa_check(zone, host, self.issuer_name):
            raise CaaDeniedError(f"CAA for {host} does not name {self.issuer_name}")
        now = self.clock.now
        leaf = certs.issue(
            host, subject_public, self.issuer_name, self.bundle.app_sign_key,
            epoch=self.bundle.epoch, validity=(now, now + self.leaf_lifetime),
            app_id=app_id, quote_digest=quote_digest,
        )
        # Logged before it can ever be served.
        self.ct_log.append(now, leaf)
        return (leaf,) + tuple(self.bundle.cert_chain)

    def _check_authorized(self, app_id: Digest) -> None:
        try:
            allowed = self.kms_auth.app(app_id).allowed_code_digests
        except UnknownAppError:
            raise AppRejectedError("app is not registered in governance") from None
        if not allowed:
            raise AppRejectedError("app has no authorized code version")

    def _verify_app_chain(self, app_chain: CertificateChain) -> tuple[Digest, bytes]:
        certs.verify_chain(app_chain, self.expected_root, self.clock.now)
        app_id = app_chain[0].app_id_ext
        if app_id is None:
            raise ChainError("leaf carries no app identity")
        self._check_authorized(app_id)
        return app_id, app_chain[0].subject_public

    def _verify_app_quote(self, quote: Quote, manifest: AppManifest, app_id: Digest,
                          subject_public: bytes) -> None:
        if self.attestation_root is None:
            raise AppRejectedError("gateway has no attestation root for direct quotes")
        vq = verify_quote(quote, self.attestation_root)
        if vq.report_data != pad_report_data(registration_report_data(app_id, subject_public)):
            raise AppRejectedError("quote does not bind the registering key")
        if os_digest(vq.measurements) not in self.kms_auth.os_digests:
            raise AppRejectedError("app runs on an unregistered OS build")
        digest = manifest.app_digest()
        self._check_authorized(app_id)
        if not self.kms_auth.is_code_authorized(app_id, digest):
            raise AppRejectedError("code digest not authorized")
        if vq.measurements.rtmr[3] != expected_rtmr3(digest, kms_identity(self.kms_auth)):
            raise AppRejectedError("RTMR3 does not match the manifest")

    def register_app(self, app_chain: Optional[CertificateChain] = None, *,
                     endpoint: Endpoint, quote: Optional[Quote] = None,
                     manifest: Optional[AppManifest] = None, app_id: Optional[Digest] = None,
                     subject_public: Optional[bytes] = None) -> str:
        """Register by KMS-issued chain or by direct quote; returns the subdomain."""
        if app_chain is not None:
            app_id, subject_public = self._verify_app_chain(app_chain)
            quote_digest = None
        elif quote is not None and manifest is not None and app_id and subject_public:
            self._verify_app_quote(quote, manifest, app_id, subject_public)
            quote_digest = quote.digest()
        else:
            raise ParameterError("need an app chain, or quote + manifest + app_id + subject_public")
        host = subdomain_for(app_id, self.zone.apex)
        chain = self._issue(host, self.zone, app_id, subject_public, quote_digest)
        self.routes[host] = RouteEntry(host, app_id, endpoint, subject_public, quote_digest, chain)
        return host

    def register_custom_domain(self, app_chain: CertificateChain, domain: str,
                               caa: CaaRecord, endpoint: Endpoint) -> str:
        """Ingress variant: caller-supplied domain and CAA record, same checks."""
        app_id, subject_public = self._verify_app_chain(app_chain)
        zone = Zone(domain)
        zone.set_caa(caa)
        chain = self._issue(zone.apex, zone, app_id, subject_public, None)
        self.zones[zone.apex] = zone
        self.routes[zone.apex] = RouteEntry(zone.apex, app_id, endpoint, subject_public, None, chain)
        return zone.apex

    def renew(self, host: str) -> CertificateChain:
        entry = self._entry(host)
        self._check_authorized(entry.app_id)
        zone = next(z for z in self.zones.values() if z.contains(host))
        entry.chain = self._issue(host, zone, entry.app_id, entry.subject_public, entry.quote_digest)
        return entry.chain

    # -- serving -------------------------------------------------------------

    def _entry(self, host: str) -> RouteEntry:
        try:
            return self.routes[host.lower()]
        except KeyError:
            raise NoRouteError(f"no route for {host}") from None

    def route(self, request: Request) -> Response:
        entry = self._entry(request.host)
        if not entry.chain[0].valid_at(self.clock.now):
            self.renew(entry.host)
        return Response(request.host, entry.endpoint(request.body), entry.chain)

    def monitor(self) -> list[Alert]:
        """Scan CT for every zone this gateway manages; returns newly seen alerts."""
        found = []
        for zone in self.zones.values():
            found.extend(ct_monitor_scan(self.ct_log, zone, self.issuer_name))
        return self.alerts.add(found)

    def routing_table(self) -> list[dict]:
        return [
            {"host": e.host, "app_id": e.app_id.hex(), "leaf": e.chain[0].to_json()}
            for e in sorted(self.routes.values(), key=lambda e: e.host)
        ]
