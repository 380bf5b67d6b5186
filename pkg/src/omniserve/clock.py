"""Clocks in integer microseconds: virtual for benchmarks, wall for serving."""

from __future__ import annotations

import threading
import time


class Clock:
    virtual = False

    def now(self) -> int:
        raise NotImplementedError

    def advance_to(self, t: int, wake: threading.Event | None = None) -> None:
        """Move time forward to ``t`` (or until ``wake`` is set, for wall clocks)."""
        raise NotImplementedError


class VirtualClock(Clock):
    virtual = True

    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance_to(self, t: int, wake: threading.Event | None = None) -> None:
        if t < self._now:
            raise ValueError(f"virtual clock cannot go back from {self._now} to {t}")
        self._now = t


class WallClock(Clock):
    """Monotonic clock; ``time_scale`` < 1 compresses simulated latencies."""

    def __init__(self, time_scale: float = 1.0):
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.time_scale = time_scale
        self._origin = time.monotonic()

    def now(self) -> int:
        return int((time.monotonic() - self._origin) * 1e6 / self.time_scale)

    def advance_to(self, t: int, wake: threading.Event | None = None) -> None:
        delay = (t - self.now()) * self.time_scale / 1e6
        if delay <= 0:
            return
        if wake is not None:
            wake.wait(delay)
        else:
            time.sleep(delay)


def make_clock(kind: str, time_scale: float = 1.0) -> Clock:
    if kind == "virtual":
        return VirtualClock()
    if kind == "wall":
        return WallClock(time_scale)
    raise ValueError(f"unknown clock {kind!r}")
