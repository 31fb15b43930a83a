"""Deterministic in-process network for the KMS and gateway actors.

Every message goes through the destination actor's mailbox and is
delivered by the single event loop in ``run``. Faults are limited to drop,
delay and partition; the network never alters or invents a message.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .clock import LogicalClock
from .errors import DeliveryError


@dataclass(frozen=True)
class Delivery:
    seq: int
    tick: int
    src: str
    dst: str
    size: int
    delivered: bool


class SimNetwork:
    def __init__(self, clock: Optional[LogicalClock] = None, seed: int = 0):
        self.clock = clock or LogicalClock()
        self._rng = random.Random(seed)
        self.mailboxes: dict[str, deque] = {}
        self.trace: list[Delivery] = []
        self._partition: Optional[list[frozenset[str]]] = None
        self._drop_links: dict[tuple[str, str], Optional[int]] = {}
        self._drop_rate = 0.0
        self._delay: dict[tuple[str, str], int] = {}

    # -- fault controls ------------------------------------------------------

    def partition(self, *groups) -> None:
        """Only actors in the same group can talk; unlisted actors are isolated."""
        self._partition = [frozenset(g) for g in groups]

    def heal(self) -> None:
        self._partition = None
        self._drop_links.clear()
        self._drop_rate = 0.0

    def drop(self, src: str, dst: str, count: Optional[int] = None) -> None:
        """Drop the next ``count`` messages on a link (all of them if None)."""
        self._drop_links[(src, dst)] = count

    def drop_randomly(self, rate: float) -> None:
        self._drop_rate = rate

    def delay(self, src: str, dst: str, ticks: int) -> None:
        self._delay[(src, dst)] = ticks

    def _reachable(self, src: str, dst: str) -> bool:
        if self._partition is None:
            return True
        return any(src in g and dst in g for g in self._partition)

    def _should_drop(self, src: str, dst: str) -> bool:
        link = (src, dst)
        if link in self._drop_links:
            left = self._drop_links[link]
            if left is None:
                return True
            if left > 0:
                self._drop_links[link] = left - 1
                return True
            del self._drop_links[link]
        # Draw even when the rate is zero so the RNG stream does not depend on it.
        return self._rng.random() < self._drop_rate

    # -- delivery ------------------------------------------------------------

    def post(self, src: str, dst: str, envelope: bytes) -> None:
        self.mailboxes.setdefault(dst, deque()).append((src, envelope))

    def run(self, dst: str) -> list[tuple[str, bytes]]:
        """Deliver everything queued for ``dst`` in FIFO order."""
        box = self.mailboxes.get(dst, deque())
        out = []
        while box:
            src, envelope = box.popleft()
            ok = self._reachable(src, dst) and not self._should_drop(src, dst)
            if ok and self._delay.get((src, dst)):
                self.clock.advance(self._delay[(src, dst)])
            self.trace.append(Delivery(len(self.trace), self.clock.now, src, dst, len(envelope), ok))
            if ok:
                out.append((src, envelope))
        return out

    def send(self, src: str, dst: str, envelope: bytes) -> bytes:
        """Synchronous point-to-point delivery; raises if the message is lost."""
        self.post(src, dst, envelope)
        delivered = self.run(dst)
        if not delivered:
            raise DeliveryError(f"message {src} -> {dst} lost")
        return delivered[-1][1]
