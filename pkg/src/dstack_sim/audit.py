"""Independent audit of an exported governance log.

The auditor trusts nothing but the file: it re-derives every chain link,
replays the events into a fresh registry and compares the result with
either a live registry or the checkpoint at the end of the export.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .crypto import ZERO_DIGEST
from .errors import AuditParseError, DstackError
from .governance import Event, KmsAuth, chain_link


@dataclass
class AuditReport:
    height: int
    head: str
    chain_ok: bool
    divergence_index: Optional[int]
    replay_error: Optional[str]
    state_digest: Optional[str]
    compared_with: str
    diff: list[str] = field(default_factory=list)
    first_byte_diff: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.chain_ok and self.replay_error is None and not self.diff

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "head": self.head,
            "chain_ok": self.chain_ok,
            "divergence_index": self.divergence_index,
            "replay_error": self.replay_error,
            "state_digest": self.state_digest,
            "compared_with": self.compared_with,
            "diff": self.diff,
            "first_byte_diff": self.first_byte_diff,
            "ok": self.ok,
        }


_EVENT_KEYS = {"seq", "time", "kind", "payload", "payload_digest", "chain_digest"}


def parse_export(lines: Iterable[str]) -> tuple[list[Event], Optional[dict]]:
    """Parse line-delimited JSON. Line numbers in errors are 1-based."""
    events: list[Event] = []
    checkpoint = None
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if checkpoint is not None:
            raise AuditParseError(number, "content after the checkpoint line")
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AuditParseError(number, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise AuditParseError(number, "expected a JSON object")
        if "checkpoint" in obj:
            checkpoint = obj["checkpoint"]
            continue
        missing = _EVENT_KEYS - set(obj)
        if missing:
            raise AuditParseError(number, f"event missing fields {sorted(missing)}")
        try:
            events.append(Event.from_json(obj))
        except (TypeError, ValueError) as exc:
            raise AuditParseError(number, f"bad event field: {exc}") from None
    return events, checkpoint


def first_broken_link(events: list[Event]) -> Optional[int]:
    prev = ZERO_DIGEST
    for i, e in enumerate(events):
        payload_digest, link = chain_link(prev, i, i + 1, e.kind, e.payload)
        if (e.seq, e.time) != (i, i + 1) or e.payload_digest != payload_digest or e.chain_digest != link:
            return i
        prev = e.chain_digest
    return None


def _diff(a, b, path: str = "") -> list[str]:
    if isinstance(a, dict) and isinstance(b, dict):
        out = []
        for key in sorted(set(a) | set(b), key=str):
            sub = f"{path}.{key}" if path else str(key)
            if key not in a:
                out.append(f"+ {sub}")
            elif key not in b:
                out.append(f"- {sub}")
            else:
                out.extend(_diff(a[key], b[key], sub))
        return out
    return [] if a == b else [f"~ {path}"]


def _first_byte(a: bytes, b: bytes) -> Optional[int]:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return None if len(a) == len(b) else min(len(a), len(b))


def audit(lines: Iterable[str], live: Optional[KmsAuth] = None) -> AuditReport:
    events, checkpoint = parse_export(lines)
    broken = first_broken_link(events)
    replay_error = None
    replayed = None
    try:
        replayed = KmsAuth.replay(events)
    except (DstackError, KeyError, TypeError, ValueError) as exc:
        replay_error = f"{type(exc).__name__}: {exc}"
    report = AuditReport(
        height=len(events),
        head=events[-1].chain_digest.hex() if events else ZERO_DIGEST.hex(),
        chain_ok=broken is None,
        divergence_index=broken,
        replay_error=replay_error,
        state_digest=replayed.state_digest().hex() if replayed else None,
        compared_with="live" if live is not None else ("checkpoint" if checkpoint else "none"),
    )
    if replayed is None:
        return report
    if live is not None:
        ours, theirs = replayed.snapshot(), live.snapshot()
        report.diff = _diff(theirs, ours)
        report.first_byte_diff = _first_byte(live.state_bytes(), replayed.state_bytes())
    elif checkpoint is not None:
        expected = {"height": checkpoint.get("height"), "head": checkpoint.get("head"),
                    "state_digest": checkpoint.get("state_digest")}
        got = {"height": report.height, "head": replayed.log.head.hex(),
               "state_digest": report.state_digest}
        report.diff = _diff(expected, got)
    return report


def report_text(report: AuditReport) -> str:
    lines = [f"events: {report.height}  head: {report.head[:16]}",
             f"hash chain: {'intact' if report.chain_ok else f'broken at index {report.divergence_index}'}"]
    if report.replay_error:
        lines.append(f"replay failed: {report.replay_error}")
    else:
        lines.append(f"replayed state digest: {report.state_digest}")
    lines.append(f"compared with: {report.compared_with}")
    for d in report.diff:
        lines.append(f"  {d}")
    if report.first_byte_diff is not None:
        lines.append(f"canonical state differs first at byte {report.first_byte_diff}")
    lines.append("PASS" if report.ok else "FAIL")
    return "\n".join(lines)
