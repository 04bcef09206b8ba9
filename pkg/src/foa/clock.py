"""Deterministic millisecond clock for agent-call costs and timeouts."""
from __future__ import annotations

import threading


class SimClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def advance(self, ms: float) -> float:
        if ms < 0:
            raise ValueError("cannot move a clock backwards")
        with self._lock:
            self._now += ms
            return self._now
