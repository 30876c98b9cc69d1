"""Injectable clocks. Time is measured in integer ticks."""

from __future__ import annotations

import threading
import time
from typing import Callable


class ManualClock:
    """Clock that only moves when told to.

    Tick listeners are called once for every tick crossed by ``advance``,
    which is what drives the scheduler deterministically in tests.
    """

    def __init__(self, start: int = 0):
        self._now = start
        self._lock = threading.RLock()
        self._listeners: list[Callable[[int], None]] = []

    def now(self) -> int:
        return self._now

    def advance(self, ticks: int = 1) -> int:
        if ticks < 0:
            raise ValueError("cannot move a clock backwards")
        with self._lock:
            if not self._listeners:
                self._now += ticks
                return self._now
            for _ in range(ticks):
                self._now += 1
                for listener in list(self._listeners):
                    listener(self._now)
            return self._now

    def advance_to(self, tick: int) -> int:
        return self.advance(max(0, tick - self._now))

    def sleep(self, ticks: int) -> None:
        self.advance(ticks)

    def add_listener(self, fn: Callable[[int], None]) -> None:
        with self._lock:
            self._listeners.append(fn)

    def remove_listener(self, fn: Callable[[int], None]) -> None:
        with self._lock:
            if fn in self._listeners:
                self._listeners.remove(fn)


class SystemClock:
    """Wall-clock ticks (default one tick per second)."""

    def __init__(self, tick_seconds: float = 1.0):
        self.tick_seconds = tick_seconds

    def now(self) -> int:
        return int(time.time() / self.tick_seconds)

    def sleep(self, ticks: int) -> None:
        if ticks > 0:
            time.sleep(ticks * self.tick_seconds)

    def add_listener(self, fn) -> None:
        raise NotImplementedError("tick listeners need a ManualClock")

    def remove_listener(self, fn) -> None:
        pass
