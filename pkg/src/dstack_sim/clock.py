"""Logical time. Nothing in the package reads the wall clock."""

from __future__ import annotations


class LogicalClock:
    def __init__(self, start: int = 0):
        self._now = start

    @property
    def now(self) -> int:
        return self._now

    def advance(self, ticks: int = 1) -> int:
        if ticks < 0:
            raise ValueError("logical time never moves backwards")
        self._now += ticks
        return self._now
