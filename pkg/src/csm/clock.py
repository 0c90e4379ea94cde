"""Monotonic clocks and timer scheduling.

RealClock schedules callbacks on a single background thread per clock.
VirtualClock never moves on its own; tests advance it manually and due
timers fire inline, in (due time, creation order) order, which keeps
timer-driven runs fully deterministic.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable, Optional


class TimerHandle:
    def __init__(self):
        self._cancelled = threading.Event()

    def cancel(self) -> None:
        self._cancelled.set()

    @property
    def cancelled(self) -> bool:
        return self._cancelled.is_set()


class _Entry:
    __slots__ = ("due", "seq", "interval", "fn", "handle")

    def __init__(self, due: float, seq: int, interval: Optional[float], fn: Callable[[], None], handle: TimerHandle):
        self.due = due
        self.seq = seq
        self.interval = interval  # None for one-shot
        self.fn = fn
        self.handle = handle

    def __lt__(self, other: "_Entry") -> bool:
        return (self.due, self.seq) < (other.due, other.seq)


class Clock:
    def now(self) -> float:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError

    def schedule(self, delay: float, fn: Callable[[], None], repeating: bool = False) -> TimerHandle:
        """Run fn after delay seconds; with repeating, again every delay
        seconds until the handle is cancelled. fn must not block."""
        raise NotImplementedError


class RealClock(Clock):
    def __init__(self):
        self._lock = threading.Lock()
        self._wakeup = threading.Condition(self._lock)
        self._heap: list[_Entry] = []
        self._seq = itertools.count()
        self._thread: Optional[threading.Thread] = None
        self._stopped = False

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)

    def schedule(self, delay: float, fn: Callable[[], None], repeating: bool = False) -> TimerHandle:
        handle = TimerHandle()
        entry = _Entry(self.now() + delay, next(self._seq), delay if repeating else None, fn, handle)
        with self._wakeup:
            heapq.heappush(self._heap, entry)
            if self._thread is None:
                self._thread = threading.Thread(target=self._loop, name="clock", daemon=True)
                self._thread.start()
            self._wakeup.notify()
        return handle

    def _loop(self) -> None:
        while True:
            with self._wakeup:
                if self._stopped:
                    return
                if not self._heap:
                    self._wakeup.wait(timeout=1.0)
                    continue
                entry = self._heap[0]
                wait = entry.due - self.now()
                if wait > 0:
                    self._wakeup.wait(timeout=wait)
                    continue
                heapq.heappop(self._heap)
                if entry.handle.cancelled:
                    continue
                if entry.interval is not None:
                    entry.due += entry.interval
                    entry.seq = next(self._seq)
                    heapq.heappush(self._heap, entry)
            try:
                entry.fn()
            except Exception:
                pass  # timer callbacks must not kill the scheduler

    def stop(self) -> None:
        with self._wakeup:
            self._stopped = True
            self._wakeup.notify()


class VirtualClock(Clock):
    """Manually advanced clock. Timer callbacks run on the advancing thread."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._heap: list[_Entry] = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)

    def schedule(self, delay: float, fn: Callable[[], None], repeating: bool = False) -> TimerHandle:
        handle = TimerHandle()
        heapq.heappush(
            self._heap,
            _Entry(self._now + delay, next(self._seq), delay if repeating else None, fn, handle),
        )
        return handle

    def advance(self, seconds: float) -> None:
        deadline = self._now + seconds
        while self._heap and self._heap[0].due <= deadline:
            entry = heapq.heappop(self._heap)
            if entry.handle.cancelled:
                continue
            self._now = max(self._now, entry.due)
            if entry.interval is not None:
                entry.due += entry.interval
                entry.seq = next(self._seq)
                heapq.heappush(self._heap, entry)
            entry.fn()
        self._now = deadline
